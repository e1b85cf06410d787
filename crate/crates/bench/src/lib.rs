//! Criterion benchmarks for the TPSR toolkit; see `benches/`.
