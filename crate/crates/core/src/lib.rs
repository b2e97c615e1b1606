//! Physics-informed neural network training with Stein derivative
//! estimators, tensor-train compressed layers and square-block
//! shared-exponent integer arithmetic.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f64` tensors, GEMM, contraction, seeded sampling.
//! - [`smx`]: 4×4 shared-exponent quantization codec, quantized GEMM and the
//!   quantization-flip analysis.
//! - [`tt`]: tensor-train layers with sequential and partial-reconstruction
//!   evaluation.
//! - [`network`]: tanh MLP with dense or TT hidden layers and perturbation-pair
//!   propagation (difference-based and naive quantization).
//! - [`stein`]: Gaussian-smoothing derivative estimators and a hyper-dual
//!   exact-derivative oracle.
//! - [`pde`]: Poisson 2-D, HJB 20-D and Heat 100-D benchmark problems.
//! - [`trainer`]: Adam training loop and the ablation matrix.
//! - [`perfmodel`]: closed-form MAC and byte counters.

pub mod error;
pub mod network;
pub mod pde;
pub mod perfmodel;
pub mod smx;
pub mod stein;
pub mod tensor;
pub mod trainer;
pub mod tt;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, RngStream};
