//! Trace-driven simulation of an LLM serving engine that morphs layer
//! precision and elastically resizes its paged KV cache under memory
//! pressure, plus the offline profiler that orders layers for morphing.

pub mod controller;
pub mod engine;
pub mod kvpool;
pub mod precision;
pub mod profiler;
pub mod scalar;
pub mod toymodel;
pub mod workload;

pub use precision::{PerPrecision, Precision};
pub use scalar::Scalar;

pub type ToyModelF64 = toymodel::ToyModel<f64>;
pub type ToyModelF32 = toymodel::ToyModel<f32>;
pub type SensitivityScoresF64 = profiler::SensitivityScores<f64>;
pub type GreedyProfileF64 = profiler::GreedyProfile<f64>;
