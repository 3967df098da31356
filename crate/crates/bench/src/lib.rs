//! Criterion benchmarks for `vbgp-core`; see `benches/`.
