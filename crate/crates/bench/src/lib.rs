//! Criterion benchmarks for mcal-core live under `benches/`.
