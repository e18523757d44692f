//! Host crate for the criterion benchmarks in `benches/`.
//!
//! `forward` times one user's forward pass for the star model and the
//! self-attention baseline over a grid of window lengths, plus the closed-form
//! operation counts.
