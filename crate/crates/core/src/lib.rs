//! Through-plane super-resolution of thick-slice CT volumes.
//!
//! [`tensor`] and [`nn`] provide a small autodiff engine and layers,
//! [`attention`] the windowed cosine attention blocks, [`model`] the
//! encoder–decoder network, [`volume`] volumes, phantoms and patch
//! sampling, [`pipeline`] training and sliding-window inference, and
//! [`metrics`] PSNR/SSIM reporting.

pub mod attention;
pub mod io_util;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod volume;
