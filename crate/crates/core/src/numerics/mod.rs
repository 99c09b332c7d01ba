//! Double-precision differentiable kernel: tensors, a reverse-mode tape,
//! model layers, gradient checking, optimization and checkpoints.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use gradcheck::{finite_diff_check, GradCheck, MIN_COORDS, NEGLIGIBLE_GRAD};
pub use graph::{masked_softmax, normalize_columns, smooth_l1, Graph, NodeId, BN_EPS};
pub use layers::{mha_ffn_block, recurrent_step};
pub use optim::Adam;
pub use params::{Gradients, Parameter, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("no feasible action: every entry is masked")]
    NoFeasibleAction,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("width {d_h} is not divisible into {n_head} heads")]
    HeadSplit { d_h: usize, n_head: usize },
}

/// Runs a backward pass from `loss` and writes the gradients into the
/// store's slots, replacing previous contents unless `accumulate` is set.
pub fn backprop(
    graph: &Graph<'_>,
    loss: NodeId,
    params: &mut ParameterStore,
    accumulate: bool,
) -> Result<(), NumericsError> {
    let grads = graph.backward(loss)?;
    params.store_grads(&grads, accumulate);
    Ok(())
}
