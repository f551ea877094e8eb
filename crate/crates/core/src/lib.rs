//! Desk-scale bi-temporal change captioning.
//!
//! A small ViT encodes both images of a pair independently, a
//! difference-aware enhancer fuses multi-scale change information into the
//! penultimate features, a projector maps them into the decoder width, and
//! a causal transformer generates the caption. Everything runs on the
//! reverse-mode tape in [`autodiff`].

pub mod autodiff;
pub mod bridge;
pub mod data;
pub mod encoder;
pub mod enhancer;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
