//! Text-prior guided super-resolution for low-resolution text images.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`graph`]), the neural blocks built on it ([`nn`], [`attention`]), the
//! text-prior interpreter ([`interpreter`]), the full reconstruction network
//! ([`network`]), losses and metrics including the triplex SSIM ([`losses`]),
//! a synthetic glyph corpus ([`synth`]), and training/evaluation ([`train`]).

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod interpreter;
pub mod kernels;
pub mod losses;
pub mod network;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{finite_diff_gradient, Graph, Padding, SparseMap, Var};
pub use network::NetworkConfig;
pub use tensor::{Precision, Scalar, Tensor};
