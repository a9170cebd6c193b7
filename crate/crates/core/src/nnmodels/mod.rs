//! Target classifier, generator, and the layer substrate both run on.

pub mod generator;
pub mod layers;
pub mod target;

pub use generator::{
    generate, pretrain_generator, project_latents, Generator, GeneratorConfig, GeneratorTape, PretrainOptions,
    PretrainReport, DEFAULT_LATENT_DIM,
};
pub use layers::{Activation, Tensor};
pub use target::{classification_loss, classify, ArchId, TargetModel};
