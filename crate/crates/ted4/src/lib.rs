//! Desk-scale codec and training harness for temporally activated,
//! embedding-deformed anchor-based dynamic Gaussian-splat scenes.
//!
//! The crate covers the full loop: synthetic multi-camera scenes, an anchor
//! model decoded into Gaussian primitives, an embedding-based deformation
//! field with per-anchor temporal activation windows, a CPU rasterizer with
//! analytic gradients, a coordinate-conditioned entropy model, a bit-exact
//! range coder, and a rate-distortion training schedule.

pub mod anchor;
pub mod deform;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod fp16;
pub mod img;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod raster;
pub mod scene;
pub mod special;
pub mod tape;
pub mod train;
pub mod temporal;

pub use error::{Error, Result};
