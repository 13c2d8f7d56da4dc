//! Stratified window attention for 3D point-cloud segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense tensors, a small reverse-mode graph over a closed op set,
//!   AdamW, finite-difference gradient checks and the `STW1` checkpoint format.
//! - [`geometry`]: grid sampling, farthest point sampling, exact kNN, window
//!   assignment, interpolation weights, augmentations and test-time perturbations.
//! - [`indexing`]: query/key index pairs for dense and stratified windows, plus the
//!   padded-mask representation used as an oracle.
//! - [`attention`]: gather / scatter-softmax / segment-sum attention with contextual
//!   relative position encoding, its analytic backward, and memory accounting.
//! - [`network`]: point embedding, transformer blocks, down/upsampling and the
//!   segmentation model, including gradient saliency maps.
//! - [`training`]: synthetic scenes, metrics, the training loop and robustness runs.
//! - [`cli_io`]: cloud/config file formats and the command-line entry points.
//! - [`verify`]: the gradient-check and oracle-comparison suites shared by the CLI
//!   and the test targets.

pub mod attention;
pub mod cli_io;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod indexing;
pub mod network;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
