//! Text-to-motion latent diffusion with a latent realignment module, motion
//! textual inversion and the standard text-to-motion evaluation metrics,
//! trained end to end on a procedural motion corpus.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffcore;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod motion;
pub mod mti;
pub mod pipeline;
pub mod projector;
pub mod rng;
pub mod textenc;
pub mod vae;

pub use error::{Error, Result};
