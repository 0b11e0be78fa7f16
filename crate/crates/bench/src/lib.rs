//! Criterion benchmarks for the emqs kernels; see `benches/kernels.rs`.
