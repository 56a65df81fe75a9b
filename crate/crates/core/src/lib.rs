//! A two-stage text-to-image generator: a conditional VAE draws a
//! low-resolution sketch from a text embedding, and a conditional GAN refines
//! it to four times the resolution. Includes the data pipeline, Inception
//! Score / Fréchet distance evaluation with an in-repo classifier, and the
//! training harness behind the `cvaegan` binary.

pub mod cgan;
pub mod cond_aug;
pub mod cvae;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod imageio;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod profile;

pub use error::{Error, Result};
pub use profile::Profile;
