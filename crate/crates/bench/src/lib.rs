//! Benchmarks live in `benches/`; run them with `cargo bench -p fssam2-bench`.
