//! Sparse steered-Gaussian mixture regression for 2D images.
//!
//! A pool of anisotropic Gaussian kernels is fitted to an image by gradient
//! descent under one of two regression heads: a plain weighted kernel sum
//! (RBF) or a softmax-gated mixture (SMoE). Training can run globally or
//! rasterized, where each 16×16 block only touches the kernels whose 99%
//! confidence boxes reach it. On top of the fitted continuous model sit
//! segmentation-guided initialization, multi-hypothesis denoising and native
//! super-resolution with kernel sharpening.

pub mod denoise;
pub mod geometry;
pub mod grad;
pub mod image;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod resample;
pub mod segment;
pub mod synth;
pub mod tile;

pub use crate::image::ImageBuffer;
pub use crate::kernel::{Chol2, Kernel, KernelSet, Vec2};
pub use crate::render::RegressionHead;
pub use crate::tile::{TileGrid, TileIndex};
