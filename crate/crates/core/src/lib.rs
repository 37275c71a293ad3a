//! Desk-scale spoof-trace disentanglement.
//!
//! A face image carrying a presentation attack differs from its live
//! counterpart by a *spoof trace*. This crate disentangles that trace as a
//! hierarchical `{s, b, C, T}` representation (color range bias, color
//! balance bias, low-resolution content pattern, full-resolution texture),
//! reconstructs the live counterpart, synthesizes new spoof samples through
//! a differentiable landmark-driven warping layer, and scores inputs for
//! anti-spoofing.
//!
//! Everything runs on a small reverse-mode tensor engine ([`tensor`]) in
//! 64-bit floats. Data-parallel inner loops use rayon when the `parallel`
//! feature (default) is enabled and fall back to sequential execution
//! otherwise; both paths are bit-identical.

pub mod error;
pub(crate) mod parallel;
pub mod tensor;
pub mod warp3d;
pub mod trace;
pub mod models;
pub mod losses;
pub mod synthdata;
pub mod train;
pub mod eval;
pub mod io;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
