//! Weighted entropy minimization: observations are down-weighted to zero
//! when unreliable (entropy above a threshold) or redundant (too similar to
//! an exponential moving average of accepted predictions).
//!
//! The weight's functional form, exp(e0 - H) gated by the two tests, is a
//! reconstruction; so is the EMA decay default of 0.9.

use crate::error::{Error, Result};
use crate::metrics::entropy_nats;
use crate::nn::{softmax_temp, BnMode, Network};
use crate::tensor::Tensor;

use super::tent::{entropy_grad_at_logits, fixed_batches, AdaptBatchLog};

#[derive(Debug, Clone)]
pub struct EtaState {
    /// Entropy threshold in nats; typically 0.4 * ln(C).
    pub e0: f64,
    /// Cosine-similarity redundancy threshold.
    pub epsilon: f64,
    /// EMA of accepted probability rows.
    pub ema: Option<Vec<f64>>,
    pub ema_decay: f64,
}

impl EtaState {
    pub fn new(classes: usize, epsilon: f64) -> Self {
        Self {
            e0: 0.4 * (classes as f64).ln(),
            epsilon,
            ema: None,
            ema_decay: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.e0 <= 0.0 {
            return Err(Error::Parameter("e0 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Parameter("epsilon must be in [0, 1]".into()));
        }
        Ok(())
    }
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Sample weight for one probability row. Accepted rows fold into the EMA.
pub fn eta_weight(row: &[f64], state: &mut EtaState) -> Result<f64> {
    state.validate()?;
    let h = entropy_nats(row)?;
    if h >= state.e0 {
        return Ok(0.0);
    }
    if let Some(ema) = &state.ema {
        if cosine_similarity(row, ema) > state.epsilon {
            return Ok(0.0);
        }
    }
    let weight = (state.e0 - h).exp();
    match &mut state.ema {
        Some(ema) => {
            for (e, p) in ema.iter_mut().zip(row) {
                *e = state.ema_decay * *e + (1.0 - state.ema_decay) * p;
            }
        }
        None => state.ema = Some(row.to_vec()),
    }
    Ok(weight)
}

/// Weighted entropy minimization on batch-norm parameters, one SGD step per
/// batch. Zero-weight samples contribute nothing to the gradient.
pub fn eta_adapt(
    mut network: Network,
    observations: &Tensor,
    state: &mut EtaState,
    lambda: f64,
    batch_size: usize,
) -> Result<(Network, Vec<AdaptBatchLog>)> {
    if observations.rows() == 0 {
        return Err(Error::Input("no observations to adapt on".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    network.freeze_non_bn()?;
    network.bn_mode = BnMode::BatchStats;
    let mut logs = Vec::new();
    for (batch_index, batch) in fixed_batches(observations, batch_size).into_iter().enumerate() {
        if batch.rows() < 2 {
            continue;
        }
        let (logits, cache) = network.forward_cached(&batch)?;
        let probs = softmax_temp(&logits, 1.0)?;
        let n = batch.rows() as f64;
        let mut weights = Vec::with_capacity(batch.rows());
        let mut loss = 0.0;
        let mut entropy_before = 0.0;
        for row in probs.iter_rows() {
            let h = entropy_nats(row)?;
            entropy_before += h;
            let w = eta_weight(row, state)?;
            loss += w * h;
            weights.push(w);
        }
        loss /= n;
        entropy_before /= n;
        if weights.iter().all(|w| *w == 0.0) {
            logs.push(AdaptBatchLog {
                batch_index,
                loss,
                mean_entropy_before: entropy_before,
                mean_entropy_after: entropy_before,
            });
            continue;
        }
        let mut d_logits = entropy_grad_at_logits(&probs, Some(&weights))?;
        for v in d_logits.data_mut() {
            *v /= n;
        }
        let grads = network.backward(&cache, &d_logits)?;
        network.sgd_step(&grads, lambda)?;

        let after = softmax_temp(&network.forward(&batch)?, 1.0)?;
        let mut entropy_after = 0.0;
        for row in after.iter_rows() {
            entropy_after += entropy_nats(row)?;
        }
        logs.push(AdaptBatchLog {
            batch_index,
            loss,
            mean_entropy_before: entropy_before,
            mean_entropy_after: entropy_after / n,
        });
    }
    Ok((network, logs))
}
