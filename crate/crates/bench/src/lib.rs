//! Benchmarks live in `benches/`; run `cargo bench -p minor-sft-bench`.
