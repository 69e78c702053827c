//! End-to-end translation: codec, toy data, dual-stream denoising, metrics
//! and persistence.

pub mod codec;
pub mod config;
pub mod demo;
pub mod image;
pub mod metrics;
pub mod run;
pub mod store;
pub mod toy;
pub mod translate;

pub use codec::{CodecKind, IdentityCodec, LatentCodec, PatchAutoencoder, ScaledIdentityCodec};
pub use config::TranslationConfig;
pub use image::Image;
pub use metrics::{evaluate_metrics, MetricBlock};
pub use run::{RunDir, StageCache};
pub use translate::{
    ddim_invert_full, ddim_sample, run_dual_stream, DualStreamOutput, Reference, StepDiagnostics,
    TranslationResult, Translator,
};
