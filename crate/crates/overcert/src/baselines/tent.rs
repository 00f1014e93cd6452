//! Test-time entropy minimization over batch-norm scale/shift parameters.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::entropy_nats;
use crate::nn::{softmax_backward, softmax_temp, BnMode, Network, PROB_FLOOR};
use crate::tensor::Tensor;

/// Shannon entropy of one probability row in nats.
pub fn tent_loss(row: &[f64]) -> Result<f64> {
    entropy_nats(row)
}

/// dH/dlogits for a batch of probability rows, optionally weighted per
/// sample. With H = -sum p ln p this is computed through the softmax
/// Jacobian from dH/dp = -(ln p + 1).
pub fn entropy_grad_at_logits(probs: &Tensor, weights: Option<&[f64]>) -> Result<Tensor> {
    let mut d_probs = Tensor::zeros(probs.shape().to_vec());
    for i in 0..probs.rows() {
        let w = weights.map(|w| w[i]).unwrap_or(1.0);
        if w == 0.0 {
            continue;
        }
        for (dst, p) in d_probs.row_mut(i).iter_mut().zip(probs.row(i)) {
            *dst = -w * (p.max(PROB_FLOOR).ln() + 1.0);
        }
    }
    softmax_backward(probs, &d_probs)
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptBatchLog {
    pub batch_index: usize,
    pub loss: f64,
    pub mean_entropy_before: f64,
    pub mean_entropy_after: f64,
}

/// One SGD step per batch on batch-norm parameters only, minimizing mean
/// entropy with batch statistics. All other parameters stay untouched.
pub fn tent_adapt(
    mut network: Network,
    observations: &Tensor,
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
            // Cannot take batch statistics over a singleton remainder.
            continue;
        }
        let (logits, cache) = network.forward_cached(&batch)?;
        let probs = softmax_temp(&logits, 1.0)?;
        let n = batch.rows() as f64;
        let mut loss = 0.0;
        for row in probs.iter_rows() {
            loss += tent_loss(row)?;
        }
        loss /= n;
        let mut d_logits = entropy_grad_at_logits(&probs, None)?;
        for v in d_logits.data_mut() {
            *v /= n;
        }
        let grads = network.backward(&cache, &d_logits)?;
        network.sgd_step(&grads, lambda)?;

        let after = softmax_temp(&network.forward(&batch)?, 1.0)?;
        let mut after_loss = 0.0;
        for row in after.iter_rows() {
            after_loss += tent_loss(row)?;
        }
        logs.push(AdaptBatchLog {
            batch_index,
            loss,
            mean_entropy_before: loss,
            mean_entropy_after: after_loss / n,
        });
    }
    Ok((network, logs))
}

pub(crate) fn fixed_batches(data: &Tensor, batch_size: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < data.rows() {
        let end = (start + batch_size).min(data.rows());
        let rows: Vec<Vec<f64>> = (start..end).map(|i| data.row(i).to_vec()).collect();
        out.push(Tensor::from_rows(&rows).expect("rectangular rows"));
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn bn_network() -> Network {
        let mut l1 = Layer::dense(2, 3);
        if let Layer::Dense { weights, bias, .. } = &mut l1 {
            weights.copy_from_slice(&[0.9, -0.4, 0.2, 1.1, -0.7, 0.3]);
            bias.copy_from_slice(&[0.1, -0.1, 0.05]);
        }
        let mut l3 = Layer::dense(3, 3);
        if let Layer::Dense { weights, .. } = &mut l3 {
            weights.copy_from_slice(&[1.2, 0.1, -0.3, -0.2, 0.8, 0.4, 0.3, -0.5, 1.0]);
        }
        Network::new(vec![l1, Layer::batch_norm(3), Layer::relu(3), l3]).unwrap()
    }

    fn observations() -> Tensor {
        Tensor::from_rows(&[
            vec![1.0, 0.2],
            vec![-0.5, 1.3],
            vec![0.8, -0.9],
            vec![2.0, 0.4],
            vec![-1.2, -0.3],
            vec![0.1, 1.8],
        ])
        .unwrap()
    }

    #[test]
    fn tent_loss_values() {
        let c = 5;
        let uniform = vec![1.0 / c as f64; c];
        assert!((tent_loss(&uniform).unwrap() - (c as f64).ln()).abs() < 1e-12);
        assert_eq!(tent_loss(&[0.0, 1.0]).unwrap(), 0.0);
        assert!((tent_loss(&[0.6704, 0.3296]).unwrap() - 0.634).abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let net = bn_network();
        let before = net.param_checksum();
        let (adapted, _) = tent_adapt(net, &observations(), 0.0, 3).unwrap();
        assert_eq!(before, adapted.param_checksum());
    }

    #[test]
    fn non_bn_parameters_untouched() {
        let net = bn_network();
        let dense_before: Vec<Vec<f64>> = net
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { weights, .. } => Some(weights.clone()),
                _ => None,
            })
            .collect();
        let (adapted, logs) = tent_adapt(net, &observations(), 0.01, 3).unwrap();
        let dense_after: Vec<Vec<f64>> = adapted
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { weights, .. } => Some(weights.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(dense_before, dense_after);
        assert!(!logs.is_empty());
    }

    #[test]
    fn entropy_decreases_after_one_step() {
        // Descent property on a fixed batch with a small step.
        let net = bn_network();
        let (_, logs) = tent_adapt(net, &observations(), 0.01, 6).unwrap();
        assert_eq!(logs.len(), 1);
        assert!(
            logs[0].mean_entropy_after < logs[0].mean_entropy_before,
            "entropy {} -> {}",
            logs[0].mean_entropy_before,
            logs[0].mean_entropy_after
        );
    }

    #[test]
    fn requires_bn_layer() {
        let net = Network::new(vec![Layer::dense(2, 2)]).unwrap();
        assert!(tent_adapt(net, &observations(), 0.01, 3).is_err());
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        // Independent check of the analytic entropy/softmax chain on a
        // single logits row.
        let logits = vec![0.4, -1.1, 0.9];
        let t = Tensor::from_rows(&[logits.clone()]).unwrap();
        let probs = softmax_temp(&t, 1.0).unwrap();
        let grad = entropy_grad_at_logits(&probs, None).unwrap();
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[k] += h;
            dn[k] -= h;
            let pu = softmax_temp(&Tensor::from_rows(&[up]).unwrap(), 1.0).unwrap();
            let pd = softmax_temp(&Tensor::from_rows(&[dn]).unwrap(), 1.0).unwrap();
            let fd = (entropy_nats(pu.row(0)).unwrap() - entropy_nats(pd.row(0)).unwrap())
                / (2.0 * h);
            assert!((grad.row(0)[k] - fd).abs() < 1e-6);
        }
    }
}
