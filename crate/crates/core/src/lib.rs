//! Core library for a trainable image codec and its robustness toolkit:
//! a small autodiff engine, an entropy-coded bitstream format, invertible
//! image transforms, gradient attacks, randomized encoding defenses, and
//! image-quality metrics. Everything is deterministic given explicit seeds.

pub mod attack;
pub mod codec;
pub mod defense;
pub mod entropy;
pub mod metrics;
pub mod seed;
pub mod tensor;
pub mod transform;
