//! Benchmarks for the training step, toy decoding and data packing; see `benches/`.
