//! Criterion benchmarks for the capsule model live in `benches/`.
