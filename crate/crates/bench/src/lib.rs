//! Criterion benchmarks for the codec and network kernels; see `benches/`.
