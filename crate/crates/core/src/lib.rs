//! Super token attention and the hierarchical vision backbone built on it.
//!
//! Modules:
//! - [`tensor`]: dense tensors, a reverse-mode tape and a finite-difference oracle
//! - [`sta`]: super token sampling, attention over super tokens, token upsampling
//! - [`blocks`]: transformer blocks, stem, merging, head and the model builder
//! - [`flops`]: analytic multiply-accumulate and parameter accounting
//! - [`train`]: synthetic data, optimizers and the training loop
//! - [`image`], [`viz`]: PPM/PGM I/O and super-token visualizations
//! - [`verify`]: the self-check suites exposed by the CLI

pub mod blocks;
pub mod error;
pub mod flops;
pub mod image;
pub mod sta;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
