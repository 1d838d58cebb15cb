//! Label-conditioned generative radiance fields at desk scale.
//!
//! One shared-weight field network represents several object classes and
//! colour styles. Class and style labels select rows of learned embedding
//! tables that multiply the shape and appearance latent codes, and the
//! network emits one density per class and one colour per style. The crate
//! contains everything needed to train and inspect such a model on the CPU:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation and RMSprop.
//! * [`geometry`]: pinhole cameras on a hemisphere, patch rays, bilinear
//!   patch extraction.
//! * [`encoding`]: sinusoidal positional encoding.
//! * [`field`]: the conditional radiance field and label embeddings.
//! * [`renderer`]: stratified/hierarchical sampling and alpha compositing.
//! * [`discriminators`]: patch discriminator and auxiliary classifier.
//! * [`trainer`]: adversarial and reconstruction training loops.
//! * [`dataset`]: procedural labelled, posed dataset and its manifest.
//! * [`metrics`]: FID, KID, PSNR and SSIM.
//! * [`checkpoint`]: the binary parameter container.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod discriminators;
pub mod encoding;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};
