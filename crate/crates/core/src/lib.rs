//! glyphgen: a desk-scale latent-diffusion scene-text generator.
//!
//! The pieces, bottom up:
//!
//! - [`nn`]: f64 tape autodiff, parameters, AdamW, checkpoints.
//! - [`fonts`]: bundled procedural bitmap fonts and the rasterizer.
//! - [`dataset`]: synthetic scene-text corpus with exact per-line ground truth.
//! - [`attr`]: non-learned attribute extraction (glyph/position rendering,
//!   adaptive-threshold font patches, clustering color picker).
//! - [`latent`]: the fixed orthogonal patch codec standing in for a VAE.
//! - [`aux`]: fusion of glyph canvas / position map / masked image into
//!   auxiliary latent pixels.
//! - [`embed`]: byte tokenizer, the four attribute encoders, per-line
//!   representations and the prompt/caption condition builders.
//! - [`recognizer`]: the small conv strip recognizer (frozen and trainable copies).
//! - [`model`]: the toy U-Net denoiser, the timestep-free write branch, the
//!   gated fusion attention layers, the training loss and attention capture.
//! - [`sampler`]: DDIM with classifier-free guidance, run-once branch caching,
//!   and mask-preserving editing.
//! - [`trainer`]: the training loop.
//! - [`eval`]: recognition metrics, evaluation reports, watermark detection.
//! - [`bench`]: inference timing comparisons.
//! - [`ablate`]: toggle-matrix training/eval runs, attention dumps, gain sweeps.

pub mod ablate;
pub mod imgops;
pub mod attr;
pub mod aux;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fonts;
pub mod latent;
pub mod model;
pub mod nn;
pub mod recognizer;
pub mod sampler;
pub mod trainer;

pub use error::{GlyphError, Result};
