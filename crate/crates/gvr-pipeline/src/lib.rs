//! Generative-visual-rationale pipeline: data ingestion, WGAN-GP training,
//! generator inversion, latent predictors, counterfactual rationale
//! generation, attribution baselines, rendering and orchestration.

pub mod attribution;
pub mod autoencoder;
pub mod data;
pub mod error;
pub mod gan;
pub mod gvr;
pub mod orchestrator;
pub mod predictors;
pub(crate) mod runlog;
pub mod viz;

pub use error::{PipelineError, Result};
