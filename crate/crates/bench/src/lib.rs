//! Criterion benchmarks for the solver stack live in `benches/`.
