//! Timestep-indexed task routing for diffusion denoisers.
//!
//! The crate is organised around four pieces:
//!
//! - [`masks`]: binary routing mask banks (one row per denoising timestep) and
//!   their overlap statistics.
//! - [`schedule`] and [`diffusion`]: the cosine noise schedule, forward
//!   noising, the noise-prediction objective, EMA/Adam state and ancestral
//!   sampling with respaced timesteps.
//! - [`denoiser`]: a small residual MLP denoiser whose blocks apply a routing
//!   mask in either the ADM placement (after normalisation) or the DiT
//!   placement (block input, complementary skip), with hand-written exact
//!   gradients.
//! - [`analysis`]: linear CKA over per-block activations and heatmap exports.

pub mod analysis;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod masks;
pub mod params;
pub mod schedule;

pub use error::{Error, Result};
