//! Criterion benchmarks for the rendering, encoding and decoding passes; see `benches/`.
