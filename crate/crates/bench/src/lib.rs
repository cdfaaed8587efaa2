//! Criterion benchmarks for the backend primitives live in `benches/`.
