//! Guided-diffusion vessel trajectory prediction: AIS preprocessing,
//! interaction and scene conditioning, a conditional denoiser, the
//! accelerated deterministic sampler and geodesic evaluation.

pub mod ais;
pub mod archive;
pub mod config;
pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod plot;
pub mod scene;
pub mod synthetic;
pub mod trace;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
