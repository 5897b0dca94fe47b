//! Minimal reverse-mode array engine.
//!
//! Provides exactly what the angiophase networks need: 2-D convolution,
//! max pooling, dense layers, per-channel temporal convolution, ReLU,
//! sigmoid, dropout, nearest upsampling and channel concatenation, plus
//! an Adam optimizer, finite-difference gradient checking and a simple
//! weight file format. Everything runs in `f64` on the CPU.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{EngineError, Result};
pub use gradcheck::{grad_check, grad_check_sampled, grad_check_with, GradCheckReport, Loss};
pub use graph::{sigmoid, CustomOp, Gradients, Graph, Mode, NodeId};
pub use io::{arch_hash, load_weights, save_weights, WeightManifest};
pub use layers::{forward, Forward, LayerSpec, Padding, Sequential};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
