//! READ/WRITE scheduling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{StepKind, StreamTrace};
use crate::error::{Error, Result};
use crate::tokens::{special, TokenId};

pub const DEFAULT_WRITE_CAP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    WaitK,
    ReadN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// `k` for wait-k, `n` for read-n.
    pub param: usize,
    /// Maximum target tokens per segment (read-n only).
    pub write_cap: usize,
}

impl PolicySpec {
    pub fn wait_k(k: usize) -> Self {
        Self {
            kind: PolicyKind::WaitK,
            param: k,
            write_cap: DEFAULT_WRITE_CAP,
        }
    }

    pub fn read_n(n: usize) -> Self {
        Self {
            kind: PolicyKind::ReadN,
            param: n,
            write_cap: DEFAULT_WRITE_CAP,
        }
    }

    pub fn with_write_cap(mut self, cap: usize) -> Self {
        self.write_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.param == 0 {
            return Err(Error::Invalid(format!("{self}: parameter must be at least 1")));
        }
        if self.kind == PolicyKind::ReadN && self.write_cap == 0 {
            return Err(Error::Invalid("read-n write cap must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            PolicyKind::WaitK => "wait-k",
            PolicyKind::ReadN => "read-n",
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::WaitK => write!(f, "wait-k:{}", self.param),
            PolicyKind::ReadN if self.write_cap == DEFAULT_WRITE_CAP => {
                write!(f, "read-n:{}", self.param)
            }
            PolicyKind::ReadN => write!(f, "read-n:{},{}", self.param, self.write_cap),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    /// `wait-k:K` or `read-n:N[,cap]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad policy `{s}`; expected wait-k:K or read-n:N[,cap]"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let spec = match kind {
            "wait-k" => PolicySpec::wait_k(rest.parse().map_err(|_| bad())?),
            "read-n" => {
                let (n, cap) = match rest.split_once(',') {
                    Some((n, cap)) => (n, Some(cap)),
                    None => (rest, None),
                };
                let mut spec = PolicySpec::read_n(n.parse().map_err(|_| bad())?);
                if let Some(cap) = cap {
                    spec.write_cap = cap.parse().map_err(|_| bad())?;
                }
                spec
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Read(usize),
    Write,
    Finish,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyState {
    pub src_read: usize,
    pub src_remaining: usize,
    pub tgt_emitted: usize,
    /// Targets written since the last READ.
    pub segment_written: usize,
    pub last_emitted: Option<TokenId>,
}

impl PolicyState {
    pub fn new(src_len: usize) -> Self {
        Self {
            src_remaining: src_len,
            ..Self::default()
        }
    }

    pub fn src_exhausted(&self) -> bool {
        self.src_remaining == 0
    }

    pub fn observe_read(&mut self, n: usize) {
        let n = n.min(self.src_remaining);
        self.src_read += n;
        self.src_remaining -= n;
        self.segment_written = 0;
    }

    pub fn observe_write(&mut self, token: TokenId) {
        self.tgt_emitted += 1;
        self.segment_written += 1;
        self.last_emitted = Some(token);
    }

    pub fn finished(&self) -> bool {
        self.last_emitted == Some(special::EOS)
    }
}

/// `min(k + j - 1, |S|)`, with `j` counted from 1.
pub fn waitk_g(j: usize, k: usize, src_len: usize) -> usize {
    (k + j.max(1) - 1).min(src_len)
}

pub fn next_action(spec: &PolicySpec, state: &PolicyState) -> Action {
    if state.finished() {
        return Action::Finish;
    }
    let can_read = !state.src_exhausted();
    match spec.kind {
        PolicyKind::WaitK => {
            if can_read && state.src_read < spec.param + state.tgt_emitted {
                Action::Read(1)
            } else {
                Action::Write
            }
        }
        PolicyKind::ReadN => {
            let segment_done = state.segment_written > 0
                && (state.last_emitted == Some(special::EOSEG) || state.segment_written >= spec.write_cap);
            if can_read && (state.src_read == 0 || segment_done) {
                Action::Read(spec.param.min(state.src_remaining))
            } else {
                Action::Write
            }
        }
    }
}

/// Source tokens read before each emitted token, in emission order.
pub fn delays_from_trace(trace: &StreamTrace) -> Result<Vec<usize>> {
    let g: Vec<usize> = trace
        .steps
        .iter()
        .filter(|s| s.kind == StepKind::Write && s.emitted.is_some())
        .map(|s| s.src_read)
        .collect();
    for (j, w) in g.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(Error::Delays(format!("trace delays decrease at target {}", j + 2)));
        }
    }
    Ok(g)
}

/// Action sequence of a policy against a fixed emission script; targets are
/// taken from `emit` in order and the script ends with EOS.
pub fn schedule(spec: &PolicySpec, src_len: usize, emit: &[TokenId]) -> Vec<(Action, Option<TokenId>)> {
    let mut state = PolicyState::new(src_len);
    let mut out = Vec::new();
    let mut next = emit.iter().copied().chain(std::iter::once(special::EOS));
    loop {
        match next_action(spec, &state) {
            Action::Finish => {
                out.push((Action::Finish, None));
                return out;
            }
            Action::Read(n) => {
                state.observe_read(n);
                out.push((Action::Read(n), None));
            }
            Action::Write => {
                let tok = next.next().unwrap_or(special::EOS);
                state.observe_write(tok);
                out.push((Action::Write, Some(tok)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waitk_examples() {
        assert_eq!(waitk_g(1, 3, 10), 3);
        assert_eq!(waitk_g(8, 3, 10), 10);
        assert_eq!(waitk_g(1, 1, 1), 1);
    }

    /// Enumerate "read k, then alternate" literally and record reads per write.
    fn enumerate_waitk(k: usize, src_len: usize, n_targets: usize) -> Vec<usize> {
        let mut read = 0;
        let mut g = Vec::new();
        while read < k.min(src_len) {
            read += 1;
        }
        for _ in 0..n_targets {
            g.push(read);
            if read < src_len {
                read += 1;
            }
        }
        g
    }

    #[test]
    fn waitk_matches_enumeration_exhaustively() {
        for k in 1..10 {
            for s in 1..31 {
                let g = enumerate_waitk(k, s, s + 5);
                for (j, &gj) in g.iter().enumerate() {
                    assert_eq!(waitk_g(j + 1, k, s), gj, "k={k} |S|={s} j={}", j + 1);
                }
            }
        }
    }

    #[test]
    fn wait2_ordering() {
        let sched = schedule(&PolicySpec::wait_k(2), 4, &[20, 21, 22, 23]);
        let kinds: Vec<String> = sched
            .iter()
            .map(|(a, _)| match a {
                Action::Read(_) => "R".into(),
                Action::Write => "W".into(),
                Action::Finish => "F".into(),
            })
            .collect();
        assert_eq!(kinds.concat(), "RRWRWRWWWF");
    }

    #[test]
    fn read_n_clamps_and_reads_after_segment_end() {
        let spec = PolicySpec::read_n(5);
        let mut st = PolicyState::new(3);
        assert_eq!(next_action(&spec, &st), Action::Read(3));
        st.observe_read(3);
        assert_eq!(next_action(&spec, &st), Action::Write);

        let mut st = PolicyState::new(12);
        st.observe_read(5);
        st.observe_write(30);
        assert_eq!(next_action(&spec, &st), Action::Write);
        st.observe_write(special::EOSEG);
        assert_eq!(next_action(&spec, &st), Action::Read(5));
    }

    #[test]
    fn read_n_cap_forces_read() {
        let spec = PolicySpec::read_n(2).with_write_cap(3);
        let mut st = PolicyState::new(10);
        st.observe_read(2);
        for _ in 0..3 {
            assert_eq!(next_action(&spec, &st), Action::Write);
            st.observe_write(30);
        }
        assert_eq!(next_action(&spec, &st), Action::Read(2));
    }

    #[test]
    fn read_n_writes_until_eos_after_exhaustion() {
        let spec = PolicySpec::read_n(4).with_write_cap(1);
        let mut st = PolicyState::new(4);
        st.observe_read(4);
        for _ in 0..10 {
            assert_eq!(next_action(&spec, &st), Action::Write);
            st.observe_write(special::EOSEG);
        }
        st.observe_write(special::EOS);
        assert_eq!(next_action(&spec, &st), Action::Finish);
    }

    #[test]
    fn finish_is_absorbing() {
        for spec in [PolicySpec::wait_k(3), PolicySpec::read_n(3)] {
            let mut st = PolicyState::new(5);
            st.observe_write(special::EOS);
            for _ in 0..5 {
                assert_eq!(next_action(&spec, &st), Action::Finish);
            }
        }
    }

    #[test]
    fn parse_and_display() {
        assert_eq!("wait-k:3".parse::<PolicySpec>().unwrap(), PolicySpec::wait_k(3));
        assert_eq!(
            "read-n:5,8".parse::<PolicySpec>().unwrap(),
            PolicySpec::read_n(5).with_write_cap(8)
        );
        assert_eq!("read-n:5".parse::<PolicySpec>().unwrap().write_cap, 16);
        for s in ["wait-k:3", "read-n:5", "read-n:5,8"] {
            assert_eq!(s.parse::<PolicySpec>().unwrap().to_string(), s);
        }
        for bad in ["wait-k", "wait-k:0", "read-n:x", "foo:3", "read-n:3,0"] {
            assert!(bad.parse::<PolicySpec>().is_err(), "{bad}");
        }
    }
}
