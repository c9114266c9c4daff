//! Few-shot adaptation of a desk-scale diffusion model.
//!
//! The crate covers the full pipeline: noise schedules and the phasic gates,
//! the forward/reverse/estimate processes, a small fusion-augmented denoiser
//! with reverse-mode gradients, the adaptation losses (directional
//! distribution consistency, Gram style, diffusion and the pairwise baseline),
//! structure-guided sampling, a 2-D loss-geometry lab and the harness that
//! ties them together behind files and a CLI.

pub mod autodiff;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geolab;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
