//! Differentiable volume rendering over semantic occupancy voxel grids.
//!
//! A dense grid stores per-voxel density and per-class semantic logits.
//! Pinhole cameras cast rays through the grid; alpha compositing along
//! each ray produces depth, semantics, and opacity images together with
//! the per-ray termination distribution. Everything is differentiable:
//! [`render::render_backward`] pushes image-space gradients back onto the
//! voxel fields analytically.
//!
//! On top of the renderer sit the distillation losses ([`losses`]): a
//! ray-termination KL for rendered depth, a segment-pooled affinity loss
//! plus pixel KL for rendered semantics, and a scale-invariant log-depth
//! term. [`distill`] wires them into a teacher/student training loop on
//! synthetic scenes, and [`segments`] provides the super-pixel machinery
//! used by the affinity loss.
//!
//! All results are deterministic: given the same inputs and seeds, every
//! function returns bit-identical output regardless of worker-thread count.

pub mod camera;
pub mod distill;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod render;
pub mod segments;
pub mod volume;

pub use error::{Error, Result};
