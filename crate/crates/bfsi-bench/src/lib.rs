//! Criterion benches live in benches/; nothing is exported.
