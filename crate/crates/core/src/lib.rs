//! Stroke-space diffusion over cubic-Bézier sketches.
//!
//! A sketch is a fixed-length ordered list of cubic strokes. The denoiser is
//! a transformer decoder that predicts the clean stroke coordinates from a
//! noised copy, a timestep and a conditioning image; sampling runs the
//! x0-prediction loop with classifier-free guidance and an optional
//! refinement pass. Around it sit the geometric tooling (SVG, rasterizers,
//! attention-driven stroke initialization and ordering), a toy dataset
//! generator and evaluation metrics.

pub mod dataset;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod evalkit;
pub mod geometry;
pub mod rasterizer;
pub mod seeds;
pub mod strokeops;
pub mod training;

pub use error::{Result, VsdError};
pub use geometry::{Canvas, NormalizedSketch, Point, Sketch, Stroke};
pub use rasterizer::RasterGrid;
