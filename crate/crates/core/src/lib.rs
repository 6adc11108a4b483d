//! Diffusion inpainting with per-pixel time conditioning.
//!
//! Every pixel carries its own diffusion time, so known pixels can stay
//! clean (time 0) while the region being generated is denoised from pure
//! noise. The crate contains a small reverse-mode autodiff engine, a tiny
//! U-Net whose scale-shift normalization is conditioned per pixel, the
//! training loop, the samplers (plain DDPM, time-map inpainting, and a
//! resampling baseline), evaluation metrics and file formats.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod timemap;
pub mod training;

pub use error::{Error, Result};
