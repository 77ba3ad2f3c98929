//! Training objective and optimizers.

mod loss;
mod optim;

pub use loss::{batch_loss, pair_labels, sigmoid_pair_loss, sigmoid_pair_loss_value};
pub use optim::{adamw_step, muon_step, AdamState, HybridOptimizer, MuonState, OptimConfig, OptimizerKind, ParamState};
