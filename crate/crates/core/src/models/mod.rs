//! Networks: the hallucinator pair, the toy backbone and its classifier
//! head, plus their binary checkpoints.

mod backbone;
pub mod checkpoint;
mod hallucinator;
mod nn;
mod noise;

pub use backbone::{BackboneModel, ClassifierHead, EmbeddingNet};
pub use hallucinator::{
    generator_kernels, hallucinate, BoundHallucinator, HallucinatorDims, HallucinatorModel, HallucinatorVariant,
};
pub use nn::{Layer, Sequential};
pub use noise::NoiseSampler;
