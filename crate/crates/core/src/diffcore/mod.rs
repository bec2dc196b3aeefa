//! Minimal differentiable-computation substrate: tensors, a reverse-mode tape,
//! transformer building blocks, AdamW and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::{sinusoidal_pe, DropoutStream, LayerNorm, Linear, Mlp, StackConfig, TransformerStack};
pub use optim::{AdamWConfig, OptState};
pub use params::{ParamBlock, ParamId, ParamStore, Scope};
pub use tensor::Tensor2;
