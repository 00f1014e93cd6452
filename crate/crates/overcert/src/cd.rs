//! Certainty distillation: source reference statistics, the per-sample
//! certainty regularizer tau, the tempered teacher/student update, and the
//! terminal temperature scaling.
//!
//! Teacher and student start as two copies of the same source-trained model.
//! Each batch gets a tau per sample from the teacher's entropy (relative to
//! the source mean entropy) and logit norm (relative to the source median
//! norm). The student is distilled toward the teacher's tempered outputs for
//! a single SGD step per batch, then temperature-scaled with the final
//! batch's average tau.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{entropy_bits, logit_norm};
use crate::nn::{softmax_backward, softmax_temp, Network, PROB_FLOOR};
use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Source-domain reference statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    /// Mean base-2 entropy of the model on the source training set.
    pub h0: f64,
    /// Median Euclidean norm of the source training-set logits.
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy per class, averaged over classes.
    PerClassBce,
    /// Soft-target cross-entropy.
    SoftCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdConfig {
    pub t_min: f64,
    pub t_max: f64,
    /// Entropy scale in step 6; defaults to log2(C).
    pub h_max: f64,
    /// Fraction of student parameters frozen, counted from the output end.
    pub beta: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub loss: LossKind,
}

impl CdConfig {
    pub fn for_classes(classes: usize) -> Self {
        Self {
            t_min: 1.2,
            t_max: 5.0,
            h_max: (classes as f64).log2(),
            beta: 0.0,
            lambda: 0.001,
            batch_size: 50,
            loss: LossKind::PerClassBce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min <= self.t_max) {
            return Err(Error::Parameter(
                "temperature bounds need 0 < t_min <= t_max".into(),
            ));
        }
        if self.h_max <= 0.0 {
            return Err(Error::Parameter("h_max must be positive".into()));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Parameter("lambda must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Parameter("beta must be in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample certainty regularizers for one batch.
#[derive(Debug, Clone)]
pub struct TauVector {
    pub taus: Vec<f64>,
    pub t_avg: f64,
}

/// Mean entropy and median logit norm of the model on source data, computed
/// with running batch-norm statistics at temperature 1.
pub fn compute_source_stats(network: &Network, source: &Tensor) -> Result<SourceStats> {
    if source.rows() == 0 {
        return Err(Error::Input("source data is empty".into()));
    }
    let mut eval = network.clone();
    eval.bn_mode = crate::nn::BnMode::RunningStats;
    let logits = eval.forward(source)?;
    let probs = softmax_temp(&logits, 1.0)?;
    let mut entropy_sum = 0.0;
    for row in probs.iter_rows() {
        entropy_sum += entropy_bits(row)?;
    }
    let mut norms: Vec<f64> = logits.iter_rows().map(logit_norm).collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Even counts take the midpoint of the two central values.
    let kappa = if norms.len() % 2 == 1 {
        norms[norms.len() / 2]
    } else {
        (norms[norms.len() / 2 - 1] + norms[norms.len() / 2]) / 2.0
    };
    Ok(SourceStats {
        h0: entropy_sum / source.rows() as f64,
        kappa,
    })
}

/// Per-sample tau from the teacher's logits.
///
/// For each sample i:
///   e_i   = sigmoid(entropy_bits(softmax(z_i)) - h0)
///   t_i   = t_min + (e_i / h_max) * (t_max - t_min)
///   tau_i = [1 + (2/5) * (1.5 - 1.5 * sigmoid(|z_i| / kappa))] * t_i
pub fn compute_tau(
    teacher_logits: &Tensor,
    stats: &SourceStats,
    config: &CdConfig,
) -> Result<TauVector> {
    config.validate()?;
    if stats.kappa <= 0.0 {
        return Err(Error::Parameter(
            "kappa must be positive (division by the source median norm)".into(),
        ));
    }
    if teacher_logits.rows() == 0 {
        return Err(Error::Input("no logits to regularize".into()));
    }
    let probs = softmax_temp(teacher_logits, 1.0)?;
    let mut taus = Vec::with_capacity(teacher_logits.rows());
    for (logit_row, prob_row) in teacher_logits.iter_rows().zip(probs.iter_rows()) {
        let e = sigmoid(entropy_bits(prob_row)? - stats.h0);
        let t = config.t_min + (e / config.h_max) * (config.t_max - config.t_min);
        let norm_ratio = logit_norm(logit_row) / stats.kappa;
        let tau = (1.0 + 0.4 * (1.5 - 1.5 * sigmoid(norm_ratio))) * t;
        taus.push(tau);
    }
    let t_avg = taus.iter().sum::<f64>() / taus.len() as f64;
    Ok(TauVector { taus, t_avg })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Distillation loss between one student row (temperature 1) and one teacher
/// row (temperature tau_i), scaled by t_avg squared.
pub fn cd_loss(student: &[f64], teacher: &[f64], t_avg: f64, kind: LossKind) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Shape("student/teacher class count mismatch".into()));
    }
    if t_avg <= 0.0 {
        return Err(Error::Parameter("t_avg must be positive".into()));
    }
    for p in student.iter().chain(teacher) {
        if !(0.0..=1.0 + 1e-9).contains(p) {
            return Err(Error::Input("probability outside [0, 1]".into()));
        }
    }
    let c = student.len() as f64;
    let raw = match kind {
        LossKind::PerClassBce => {
            student
                .iter()
                .zip(teacher)
                .map(|(s, t)| {
                    let s = clamp_prob(*s);
                    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / c
        }
        LossKind::SoftCrossEntropy => student
            .iter()
            .zip(teacher)
            .map(|(s, t)| -t * clamp_prob(*s).ln())
            .sum(),
    };
    Ok(t_avg * t_avg * raw)
}

/// dL/d(student probabilities) for one row.
fn cd_loss_grad_probs(
    student: &[f64],
    teacher: &[f64],
    t_avg: f64,
    kind: LossKind,
) -> Vec<f64> {
    let scale = t_avg * t_avg;
    let c = student.len() as f64;
    student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let s = clamp_prob(*s);
            match kind {
                LossKind::PerClassBce => scale / c * (-t / s + (1.0 - t) / (1.0 - s)),
                LossKind::SoftCrossEntropy => scale * (-t / s),
            }
        })
        .collect()
}

/// One per-batch record from an adaptation run.
#[derive(Debug, Clone, Serialize)]
pub struct CdBatchLog {
    pub batch_index: usize,
    pub t_avg: f64,
    pub loss: f64,
    pub mean_entropy_before: f64,
    pub mean_entropy_after: f64,
}

/// The distillation update. The teacher is read-only; the student is frozen
/// per `config.beta` once, updated with one SGD step per batch, and finally
/// temperature-scaled with the last batch's average tau.
pub fn cd_adapt(
    teacher: &Network,
    mut student: Network,
    observations: &Tensor,
    stats: &SourceStats,
    config: &CdConfig,
) -> Result<(Network, Vec<CdBatchLog>)> {
    config.validate()?;
    if observations.rows() == 0 {
        return Err(Error::Input("no observations to adapt on".into()));
    }
    student.freeze_output_fraction(config.beta)?;
    let n = observations.rows();
    let mut logs = Vec::new();
    let mut last_t_avg = 1.0;
    let mut start = 0;
    let mut batch_index = 0;
    while start < n {
        let end = (start + config.batch_size).min(n);
        let rows: Vec<Vec<f64>> = (start..end)
            .map(|i| observations.row(i).to_vec())
            .collect();
        let batch = Tensor::from_rows(&rows)?;

        let teacher_logits = teacher.forward(&batch)?;
        let tau = compute_tau(&teacher_logits, stats, config)?;
        last_t_avg = tau.t_avg;

        let (student_logits, cache) = student.forward_cached(&batch)?;
        let student_probs = softmax_temp(&student_logits, 1.0)?;
        let entropy_before = mean_entropy(&student_probs)?;

        let mut loss_sum = 0.0;
        let batch_n = batch.rows() as f64;
        let mut d_probs = Tensor::zeros(vec![batch.rows(), student_probs.cols()]);
        for i in 0..batch.rows() {
            let teacher_probs = softmax_temp_row(teacher_logits.row(i), tau.taus[i])?;
            loss_sum += cd_loss(student_probs.row(i), &teacher_probs, tau.t_avg, config.loss)?;
            let g = cd_loss_grad_probs(
                student_probs.row(i),
                &teacher_probs,
                tau.t_avg,
                config.loss,
            );
            for (dst, src) in d_probs.row_mut(i).iter_mut().zip(g) {
                // The batch loss is the average of per-sample losses.
                *dst = src / batch_n;
            }
        }
        let loss = loss_sum / batch_n;
        let d_logits = softmax_backward(&student_probs, &d_probs)?;
        let grads = student.backward(&cache, &d_logits)?;
        student.sgd_step(&grads, config.lambda)?;

        let after_probs = softmax_temp(&student.forward(&batch)?, 1.0)?;
        logs.push(CdBatchLog {
            batch_index,
            t_avg: tau.t_avg,
            loss,
            mean_entropy_before: entropy_before,
            mean_entropy_after: mean_entropy(&after_probs)?,
        });
        start = end;
        batch_index += 1;
    }
    student.temperature_scale(last_t_avg)?;
    Ok((student, logs))
}

fn softmax_temp_row(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let t = Tensor::from_rows(&[logits.to_vec()])?;
    Ok(softmax_temp(&t, temperature)?.row(0).to_vec())
}

fn mean_entropy(probs: &Tensor) -> Result<f64> {
    let mut sum = 0.0;
    for row in probs.iter_rows() {
        sum += entropy_bits(row)?;
    }
    Ok(sum / probs.rows() as f64)
}

/// Adaptation log rows as CSV.
pub fn cd_log_csv(logs: &[CdBatchLog]) -> String {
    let mut out =
        String::from("batch_index,t_avg,loss,mean_entropy_before,mean_entropy_after\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.batch_index, l.t_avg, l.loss, l.mean_entropy_before, l.mean_entropy_after
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn example_logits() -> Tensor {
        Tensor::from_rows(&[
            vec![8.0, 7.29],       // g_s
            vec![0.9199, 0.00019], // g_t1
            vec![6.1, 6.5],        // g_t2
        ])
        .unwrap()
    }

    fn example_config() -> CdConfig {
        CdConfig {
            t_min: 1.2,
            t_max: 4.0,
            h_max: 1.0,
            beta: 0.0,
            lambda: 0.001,
            batch_size: 50,
            loss: LossKind::PerClassBce,
        }
    }

    #[test]
    fn tau_worked_example_values_and_ordering() {
        let stats = SourceStats {
            h0: 0.914,
            kappa: 10.823,
        };
        let tau = compute_tau(&example_logits(), &stats, &example_config()).unwrap();
        let (tau_s, tau_t1, tau_t2) = (tau.taus[0], tau.taus[1], tau.taus[2]);
        // Independent scalar oracle values (see tests/acceptance.rs for the
        // oracle itself).
        assert!((tau_s - 3.020).abs() < 1e-3);
        assert!((tau_t2 - 3.123).abs() < 1e-3);
        assert!((tau_t1 - 3.300).abs() < 1e-3);
        assert!(tau_s < tau_t2 && tau_t2 < tau_t1);
        let mean = (tau_s + tau_t1 + tau_t2) / 3.0;
        assert!((tau.t_avg - mean).abs() < 1e-12);
    }

    #[test]
    fn tau_limit_collapses_to_t_min() {
        // t_min = t_max pins t_i; a huge norm ratio drives the bracket to 1.
        let stats = SourceStats {
            h0: 0.5,
            kappa: 1e-6,
        };
        let cfg = CdConfig {
            t_min: 2.0,
            t_max: 2.0,
            ..example_config()
        };
        let logits = Tensor::from_rows(&[vec![400.0, 100.0]]).unwrap();
        let tau = compute_tau(&logits, &stats, &cfg).unwrap();
        assert!((tau.taus[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn tau_rejects_zero_kappa() {
        let stats = SourceStats { h0: 0.5, kappa: 0.0 };
        assert!(compute_tau(&example_logits(), &stats, &example_config()).is_err());
    }

    #[test]
    fn source_stats_single_sample() {
        let mut l = Layer::dense(2, 2);
        if let Layer::Dense { weights, .. } = &mut l {
            weights.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let net = Network::new(vec![l]).unwrap();
        let x = Tensor::from_rows(&[vec![8.0, 7.29]]).unwrap();
        let stats = compute_source_stats(&net, &x).unwrap();
        assert!((stats.h0 - 0.914).abs() < 0.002);
        assert!((stats.kappa - 10.823).abs() < 0.001);
    }

    #[test]
    fn source_stats_median_midpoint_for_even_counts() {
        // Identity network, samples with logit norms 3 and 5 -> kappa 4.
        let mut l = Layer::dense(2, 2);
        if let Layer::Dense { weights, .. } = &mut l {
            weights.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let net = Network::new(vec![l]).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let stats = compute_source_stats(&net, &x).unwrap();
        assert!((stats.kappa - 4.0).abs() < 1e-12);
    }

    #[test]
    fn source_stats_huge_margin_entropy_near_zero() {
        let mut l = Layer::dense(2, 2);
        if let Layer::Dense { weights, .. } = &mut l {
            weights.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let net = Network::new(vec![l]).unwrap();
        let x = Tensor::from_rows(&[vec![100.0, 0.0], vec![0.0, 90.0]]).unwrap();
        let stats = compute_source_stats(&net, &x).unwrap();
        assert!(stats.h0 < 1e-9);
    }

    #[test]
    fn cd_loss_uniform_matches_ln2() {
        let l = cd_loss(&[0.5, 0.5], &[0.5, 0.5], 1.0, LossKind::PerClassBce).unwrap();
        assert!((l - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cd_loss_quadratic_in_t_avg() {
        let s = [0.7, 0.3];
        let t = [0.4, 0.6];
        for kind in [LossKind::PerClassBce, LossKind::SoftCrossEntropy] {
            let l1 = cd_loss(&s, &t, 1.5, kind).unwrap();
            let l2 = cd_loss(&s, &t, 3.0, kind).unwrap();
            assert!((l2 - 4.0 * l1).abs() < 1e-9);
        }
    }

    #[test]
    fn cd_loss_rejects_bad_probabilities() {
        assert!(cd_loss(&[1.2, -0.2], &[0.5, 0.5], 1.0, LossKind::PerClassBce).is_err());
        assert!(cd_loss(&[0.5, 0.5], &[0.5, 0.5], 0.0, LossKind::PerClassBce).is_err());
    }

    #[test]
    fn cd_loss_gradient_vanishes_at_teacher() {
        // When student probs equal teacher probs the gradient at the logits
        // is zero for both loss kinds.
        let probs = Tensor::from_rows(&[vec![0.3, 0.45, 0.25]]).unwrap();
        for kind in [LossKind::PerClassBce, LossKind::SoftCrossEntropy] {
            let g = cd_loss_grad_probs(probs.row(0), probs.row(0), 2.0, kind);
            let gt = Tensor::from_rows(&[g]).unwrap();
            let at_logits = softmax_backward(&probs, &gt).unwrap();
            for v in at_logits.data() {
                assert!(v.abs() < 1e-9, "logit gradient {v} not ~0");
            }
        }
    }
}
