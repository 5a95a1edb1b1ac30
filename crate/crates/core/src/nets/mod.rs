//! Encoder, stochastic heads, decoders and the pair discriminator.

mod discriminator;
mod layers;
mod model;
mod params;

pub use discriminator::{Discriminator, PairTrace};
pub use layers::{Cache, Conv2d, ForwardCtx, Layer, Linear, Sequential};
pub use model::{
    groups, reparam_sample, DecodeTrace, EncoderSpec, EnsembleModel, GaussianLatent, LatentTrace, ModelConfig,
    STD_FLOOR,
};
pub use params::{assign_params, flatten_params, param_digest, ParamGrad, ParamSet};
