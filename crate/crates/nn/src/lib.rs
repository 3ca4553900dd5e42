//! Small dense-tensor autodiff library used by the agents: a define-by-run
//! [`Graph`], dense / layer-norm / multi-head attention layers, Adam, and a
//! flat checkpoint format. Everything is `f64` and deterministic given seeds.

mod adam;
pub mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{NnError, Result};
pub use gradcheck::grad_check;
pub use graph::{softmax, Gradients, Graph, Var};
pub use layers::{
    apply_activation, attention_forward, cross_attention_forward, dense_forward, glorot_uniform,
    init_params, Activation, AttentionVars, LayerKind, LayerSpec, Mlp,
};
pub use params::{derive_seed, ParamCursor, ParamSet};
pub use tensor::Tensor;
