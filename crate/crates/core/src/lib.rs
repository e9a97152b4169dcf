//! General fisheye camera model with a differentiable rectification layer.
//!
//! The crate is organised bottom-up:
//!
//! * [`camera_model`] – the 8-parameter radial polynomial fisheye model and
//!   the classical reference projections.
//! * [`image_core`] – rasters, bilinear / nearest sampling and PNG/PNM I/O.
//! * [`rect_layer`] – forward warp (rectified → fisheye lookup) and its exact
//!   backward pass with respect to the parameters and the fisheye image.
//! * [`synthesizer`] – renders fisheye images from perspective sources with
//!   randomized ground-truth parameters.
//! * [`estimator`] – recovers parameters from a fisheye / ground-truth pair by
//!   ADAGRAD on the L2 reconstruction loss.
//! * [`metrics`] – PSNR and SSIM.

pub mod camera_model;
pub mod error;
pub mod estimator;
pub mod image_core;
pub mod metrics;
pub mod patterns;
pub mod rect_layer;
pub mod synthesizer;

pub use camera_model::{DistortionParams, FisheyeCoords, PinholeCoords, ProjectionKind};
pub use error::{Error, Result};
pub use image_core::{FillMode, ImageBuffer, LabelMap};
pub use rect_layer::{GradientBundle, PinholeGeometry, WarpGrid};
