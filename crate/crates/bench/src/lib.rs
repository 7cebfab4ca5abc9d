// Benchmarks live in benches/; see kernels.rs.
