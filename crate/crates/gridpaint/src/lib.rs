//! Exemplar-guided image editing by grid diffusion inpainting.
//!
//! An edit is demonstrated, not described: one or more before/after example
//! pairs are stacked with a query image into a panel grid whose last cell is
//! missing, and a pixel-space diffusion model inpaints that cell. A visual
//! prompt encoder summarises the panels (plus optional interest-region boxes)
//! into a token sequence that conditions the denoiser through cross-attention
//! at its innermost blocks.
//!
//! The crate is self-contained and CPU-only: the tensor work is hand-rolled
//! on `ndarray` in f64, all randomness flows from one root seed through named
//! substreams, and every batch-level loop can run data-parallel (rayon) or
//! sequential with bit-identical results.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod grid;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod seeds;
pub mod tasks;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
