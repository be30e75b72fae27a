//! Small dense kernels over row-major slices.

use crate::scalar::Scalar;

/// Dot product with eight independent accumulators (stable order per length).
#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `y[rows x out] = x[rows x inp] * w^T` with `w` stored `[out x inp]`.
/// Returns the number of multiply-accumulates performed.
pub(crate) fn matmul_t<F: Scalar>(x: &[F], w: &[F], rows: usize, inp: usize, out: usize, y: &mut Vec<F>) -> u64 {
    y.clear();
    y.resize(rows * out, F::zero());
    let mut macs = 0u64;
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * inp..(o + 1) * inp]);
            macs += inp as u64;
        }
    }
    macs
}

/// Backward of [`matmul_t`]: accumulates `dx += dy * w` and `dw += dy^T x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_t_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    rows: usize,
    inp: usize,
    out: usize,
    dx: &mut [F],
    dw: &mut [F],
) {
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let dyr = &dy[r * out..(r + 1) * out];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for (o, &g) in dyr.iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            axpy(g, &w[o * inp..(o + 1) * inp], dxr);
            axpy(g, xr, &mut dw[o * inp..(o + 1) * inp]);
        }
    }
}

pub(crate) const RMS_EPS: f64 = 1e-5;

/// RMS normalisation with a gain; returns the normalised rows and `1/rms` per row.
pub(crate) fn rmsnorm<F: Scalar>(x: &[F], gain: &[F], rows: usize, d: usize) -> (Vec<F>, Vec<F>) {
    let mut y = vec![F::zero(); rows * d];
    let mut inv = Vec::with_capacity(rows);
    let eps = F::of(RMS_EPS);
    let n = F::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = dot(xr, xr) / n;
        let ri = (ms + eps).sqrt().recip();
        inv.push(ri);
        for ((yi, xi), gi) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *yi = *xi * ri * *gi;
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm`]; accumulates into `dx` and `dgain`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rmsnorm_backward<F: Scalar>(
    x: &[F],
    gain: &[F],
    inv: &[F],
    dy: &[F],
    rows: usize,
    d: usize,
    dx: &mut [F],
    dgain: &mut [F],
) {
    let n = F::of(d as f64);
    let mut u = vec![F::zero(); d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let ri = inv[r];
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * ri;
            u[i] = dyr[i] * gain[i];
        }
        let ux = dot(&u, xr);
        let coef = ri * ri * ri * ux / n;
        for (i, dxi) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *dxi += ri * u[i] - coef * xr[i];
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(z: F) -> F {
    (F::one() + (-z).exp()).recip()
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_in_place<F: Scalar>(x: &mut [F]) {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in x.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn argmax<F: Scalar>(x: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
