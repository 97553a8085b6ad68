//! Criterion benchmarks for the kappa engine live in `benches/`.
