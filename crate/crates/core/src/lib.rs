//! Clip-level dynamic Gaussian splatting for monocular video.
//!
//! The crate is `no_std` (with `alloc`) and covers the numerical side of the
//! pipeline:
//!
//! - [`gaussian`] and [`sh`]: the Gaussian primitive, cameras, covariance and
//!   spherical-harmonic color.
//! - [`raster`]: tile-based differentiable rasterizer with an analytic
//!   backward pass.
//! - [`loss`]: L1/SSIM reconstruction loss with gradients, PSNR, WarpSSIM and
//!   the edit-quality combiner.
//! - [`hashgrid`], [`mlp`] and [`deform`]: the per-clip 4D hash-grid
//!   deformation field.
//! - [`decompose`] and [`synthetic`]: masked, clipped structure-from-motion
//!   decomposition of a video, background sphere initialization, and a
//!   ground-truth synthetic scene used as an SfM stand-in.
//! - [`train`]: stage-1 foreground/background training with learnable
//!   per-frame merge maps.
//! - [`refine`]: stage-2 refinement of edited videos with frozen geometry.
//!
//! File formats, image IO and the command line live in the `vidgs` crate.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adam;
pub mod decompose;
pub mod deform;
pub mod error;
pub mod gaussian;
pub mod hashgrid;
pub mod image;
pub mod loss;
pub mod math;
pub mod mlp;
pub mod raster;
pub mod refine;
pub mod sh;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use gaussian::{Camera, Gaussian, GaussianSet, Intrinsics, Role, ShDegree};
pub use image::{Image, Mask, Plane};
