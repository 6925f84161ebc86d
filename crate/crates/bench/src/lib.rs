//! Benchmarks for zsym live in `benches/`.
