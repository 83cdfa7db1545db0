//! Criterion benchmarks for `keypose-core`; see `benches/`.
