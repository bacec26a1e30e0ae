//! Multi-modal volumetric pre-training on synthetic 3D studies.
//!
//! The crate implements the full pipeline: synthetic study generation,
//! cross-modal and template-fill cube masking, a small differentiable 3D
//! encoder-decoder with a projection head, the reconstruction/distillation/
//! contrastive objectives, the pre-training loop with learnable modality
//! templates, and the downstream fine-tuning and evaluation harness.

pub mod distill;
pub mod downstream;
pub mod error;
pub mod losses;
pub mod mask;
pub mod mvpv;
pub mod net;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
