//! Criterion benchmarks for the forward step, streaming strategies and mask
//! construction. Run with `cargo bench -p slotstream-bench`.
