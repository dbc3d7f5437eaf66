//! Physics-driven neural ODE forecaster for gridded atmospheric fields.
//!
//! The state `u` (K scalar channels on a lat-lon grid) is advected by a
//! per-channel velocity `v`. A local network estimates `v(t0)` from `u` and
//! `∇u`, a patch-attention network with an additive linear branch drives
//! `v̇`, and a source network corrects the integrated trajectory afterwards.

pub mod autodiff;
pub mod datasets;
pub mod dynamics;
pub mod embeddings;
pub mod evaluation;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod models;
pub mod training;

pub use error::{Error, Result};
