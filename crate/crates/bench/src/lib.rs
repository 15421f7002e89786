//! Criterion benchmarks for `qdetect-core`; see `benches/`.
