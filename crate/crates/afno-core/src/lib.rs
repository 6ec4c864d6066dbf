//! Adaptive Fourier Neural Operator token mixing at desk scale.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode
//! differentiation, 2D real FFTs over token grids, four token mixers
//! (self-attention, GFN, FNO, AFNO), a toy ViT-style backbone, the
//! random-walk inpainting training task, and a complexity/latency
//! analysis harness.
//!
//! Parallel inner loops (matmul rows, FFT lines, attention rows) run on
//! rayon when the default `parallel` feature is enabled; disabling it
//! yields a fully sequential build with identical numerics.

pub mod analysis;
pub mod backbone;
pub mod error;
pub mod mixers;
pub mod parallel;
pub mod rng;
pub mod spectral;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dtype, Graph, ParamId, ParamSet, Tensor, Var};
