//! Desk-scale gradient-inversion laboratory.
//!
//! A federated client reports the gradient of its private batch
//! ([`flsim`]), optionally transformed by a defense ([`defenses`]). The
//! server-side attacker reconstructs the batch by optimising either the
//! latent codes of a generator or the pixels directly so that the gradient of
//! the candidate batch matches the observed one ([`attack`], [`gradmatch`]).
//! Reconstructions are scored with PSNR/SSIM under optimal slot matching
//! ([`metrics`]).

pub mod attack;
pub mod checkpoint;
pub mod defenses;
pub mod error;
pub mod flsim;
pub mod gradmatch;
pub mod metrics;
pub mod nnmodels;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use flsim::GradientSet;
pub use tensor::{ImageBatch, ImageShape, LabelBatch, LatentBatch, NamedArray};
