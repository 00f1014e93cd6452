//! Reference test-time adaptation baselines: entropy minimization on
//! batch-norm parameters (TENT), its reliability/redundancy-weighted variant
//! (ETA), and gradient-free prototype updates (T3A).

mod eta;
mod t3a;
mod tent;

pub use eta::{eta_adapt, eta_weight, EtaState};
pub use t3a::{t3a_centroids, t3a_collect, t3a_predict, SupportSet};
pub use tent::{entropy_grad_at_logits, tent_adapt, tent_loss, AdaptBatchLog};
