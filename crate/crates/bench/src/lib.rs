//! Benchmarks for the simulator live under `benches/`.
