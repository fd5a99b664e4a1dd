//! A small reverse-mode differentiable tensor engine: layers, the two
//! losses, the gradient reversal layer and optimizer updates.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{apply_update, apply_update_with_rates, Algorithm, GroupRates, OptimConfig, OptimState};
pub use params::{GroupKind, ModelGrads, ModelParams, ParamGroup};
pub use tensor::Tensor;
