//! Criterion benchmarks for the hot paths of `dipt-core`; see `benches/`.
