//! One-shot image-guided image-to-image translation on small diffusion
//! backbones.

pub mod attention;
pub mod attention_control;
pub mod backbone;
pub mod error;
pub mod guidance;
pub mod inversion;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod schedule;

pub use error::{Error, Result};
