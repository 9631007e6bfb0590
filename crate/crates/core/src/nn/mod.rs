//! Minimal tensor algebra with reverse-mode gradients, sized for CPU training.

mod gemm;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{softmax_in_place, GroupTarget, Graph, NllGroup, RowMix, Var};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
