//! Expressive piano performance rendering with conditional flow matching.

pub mod codec;
pub mod midi;
pub mod flow;
pub mod maskgen;
pub mod conditioning;
pub mod model;
pub mod sampler;
pub mod eval;
pub mod augment;
pub mod synth;
pub mod pipeline;
