//! Deformable-template neural signed distance fields reconstructed from
//! posed multi-view images through differentiable volume rendering.

pub mod dataio;
pub mod diffcore;
pub mod evalkit;
pub mod fields;
pub mod losses;
pub mod meshing;
pub mod renderer;
pub mod trainer;
mod error;

pub use error::{Error, Result};
