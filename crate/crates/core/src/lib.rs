//! Segmentation stack built around grouped deformable convolution: a
//! reverse-mode tape with gradient checking, the ARFM encoder-decoder with
//! encoder/decoder generator-weight sharing, an IoU-adaptive combined loss,
//! overlap/distance metrics with exact oracles, and a deterministic training
//! harness over synthetic data.

pub mod arfm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcn;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Result, SacError};
pub use tensor::{NumericMode, Scalar, Tensor};
