//! Calibration and certainty instrumentation.
//!
//! Entropy is exposed in two bases: base-2 (`entropy_bits`, what gets
//! reported) and natural log (`entropy_nats`, what the entropy-minimization
//! losses use).

use crate::error::{Error, Result};
use crate::nn::PROB_FLOOR;
use crate::tensor::Tensor;

fn check_row(row: &[f64]) -> Result<()> {
    if row.iter().any(|p| *p < 0.0) {
        return Err(Error::Input("negative probability".into()));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!(
            "probability row sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Shannon entropy in bits, with 0·log 0 := 0.
pub fn entropy_bits(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    Ok(row
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.max(PROB_FLOOR).log2())
        .sum())
}

/// Shannon entropy in nats, with 0·log 0 := 0.
pub fn entropy_nats(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    Ok(row
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.max(PROB_FLOOR).ln())
        .sum())
}

/// Reciprocal of base-2 entropy. A one-hot row has zero entropy, for which
/// the sentinel `f64::INFINITY` is returned.
pub fn certainty(row: &[f64]) -> Result<f64> {
    let h = entropy_bits(row)?;
    if h == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(1.0 / h)
    }
}

/// Euclidean norm of a logits row.
pub fn logit_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// A batch of probabilistic predictions with optional ground truth.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub probabilities: Tensor,
    pub predicted: Vec<usize>,
    pub confidences: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl PredictionBatch {
    pub fn from_probabilities(probabilities: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != probabilities.rows() {
                return Err(Error::Input("label count does not match batch".into()));
            }
        }
        let mut predicted = Vec::with_capacity(probabilities.rows());
        let mut confidences = Vec::with_capacity(probabilities.rows());
        for row in probabilities.iter_rows() {
            check_row(row)?;
            let k = argmax(row);
            predicted.push(k);
            confidences.push(row[k]);
        }
        Ok(Self {
            probabilities,
            predicted,
            confidences,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_entropy_bits(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut sum = 0.0;
        for row in self.probabilities.iter_rows() {
            sum += entropy_bits(row)?;
        }
        Ok(sum / self.len() as f64)
    }

    pub fn mean_certainty(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut sum = 0.0;
        for row in self.probabilities.iter_rows() {
            sum += certainty(row)?;
        }
        Ok(sum / self.len() as f64)
    }
}

/// Fraction of argmax predictions matching the labels.
pub fn accuracy(batch: &PredictionBatch) -> Result<f64> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Input("accuracy needs labels".into()))?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let correct = batch
        .predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Equal-width reliability bins over confidence in [0, 1].
#[derive(Debug, Clone)]
pub struct ReliabilityBins {
    pub bins: usize,
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Samples on a bin edge fall into the upper bin; the final bin is closed
/// at 1.0.
fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).floor() as usize).min(bins - 1)
}

pub fn reliability_bins(batch: &PredictionBatch, bins: usize) -> Result<ReliabilityBins> {
    if bins == 0 {
        return Err(Error::Parameter("bins must be >= 1".into()));
    }
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Input("reliability bins need labels".into()))?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for i in 0..batch.len() {
        let b = bin_index(batch.confidences[i], bins);
        counts[b] += 1;
        conf_sum[b] += batch.confidences[i];
        if batch.predicted[i] == labels[i] {
            correct[b] += 1;
        }
    }
    let mean_confidence = counts
        .iter()
        .zip(&conf_sum)
        .map(|(c, s)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect();
    let accuracy = counts
        .iter()
        .zip(&correct)
        .map(|(c, k)| if *c > 0 { *k as f64 / *c as f64 } else { 0.0 })
        .collect();
    Ok(ReliabilityBins {
        bins,
        counts,
        mean_confidence,
        accuracy,
    })
}

impl ReliabilityBins {
    /// CSV rows `bin_low,bin_high,count,mean_confidence,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,mean_confidence,accuracy\n");
        for b in 0..self.bins {
            let low = b as f64 / self.bins as f64;
            let high = (b + 1) as f64 / self.bins as f64;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                low, high, self.counts[b], self.mean_confidence[b], self.accuracy[b]
            ));
        }
        out
    }
}

/// Expected calibration error: bin-weighted |accuracy - confidence| gap.
/// Empty bins contribute zero.
pub fn ece(batch: &PredictionBatch, bins: usize) -> Result<f64> {
    let rb = reliability_bins(batch, bins)?;
    let n = batch.len() as f64;
    Ok(rb
        .counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(b, c)| *c as f64 / n * (rb.accuracy[b] - rb.mean_confidence[b]).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_temp;

    fn softmax_row(logits: &[f64]) -> Vec<f64> {
        let t = Tensor::from_rows(&[logits.to_vec()]).unwrap();
        softmax_temp(&t, 1.0).unwrap().row(0).to_vec()
    }

    #[test]
    fn entropy_worked_values() {
        // Reported toy values: 0.92, 0.86, 0.97 bits.
        assert!((entropy_bits(&softmax_row(&[8.0, 7.29])).unwrap() - 0.92).abs() < 0.005);
        assert!(
            (entropy_bits(&softmax_row(&[0.9199, 0.00019])).unwrap() - 0.86).abs() < 0.005
        );
        assert!((entropy_bits(&softmax_row(&[6.1, 6.5])).unwrap() - 0.97).abs() < 0.005);
    }

    #[test]
    fn entropy_extremes() {
        assert!((entropy_bits(&[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(entropy_bits(&[1.0, 0.0]).unwrap(), 0.0);
        assert!(entropy_bits(&[-0.1, 1.1]).is_err());
        assert!(entropy_bits(&[0.3, 0.3]).is_err());
    }

    #[test]
    fn certainty_values() {
        assert!((certainty(&[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        let c = certainty(&softmax_row(&[8.0, 7.29])).unwrap();
        assert!((c - 1.0 / 0.9146).abs() < 2e-3);
        assert!(certainty(&[1.0, 0.0]).unwrap().is_infinite());
    }

    #[test]
    fn logit_norm_values() {
        assert!((logit_norm(&[8.0, 7.29]) - 10.823).abs() < 5e-4);
        assert_eq!(logit_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert!((logit_norm(&[3.0, 4.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_fractions() {
        let probs = Tensor::from_rows(&[
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.6, 0.4],
            vec![0.3, 0.7],
        ])
        .unwrap();
        let b = PredictionBatch::from_probabilities(probs, Some(vec![0, 1, 0, 0])).unwrap();
        assert!((accuracy(&b).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ece_hand_enumerations() {
        // All correct at confidence 1.0 -> ECE 0.
        let probs = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = PredictionBatch::from_probabilities(probs, Some(vec![0, 1])).unwrap();
        assert_eq!(ece(&b, 15).unwrap(), 0.0);

        // 4 samples, all confidence 0.8, 3 correct -> |0.75 - 0.8| = 0.05.
        let probs = Tensor::from_rows(&[vec![0.8, 0.2]; 4]).unwrap();
        let b = PredictionBatch::from_probabilities(probs, Some(vec![0, 0, 0, 1])).unwrap();
        assert!((ece(&b, 15).unwrap() - 0.05).abs() < 1e-12);

        // Two occupied bins: 2 at conf 0.6 both correct, 2 at conf 0.9 one
        // correct -> 0.5*0.4 + 0.5*0.4 = 0.4.
        let probs = Tensor::from_rows(&[
            vec![0.6, 0.4],
            vec![0.6, 0.4],
            vec![0.9, 0.1],
            vec![0.9, 0.1],
        ])
        .unwrap();
        let b = PredictionBatch::from_probabilities(probs, Some(vec![0, 0, 0, 1])).unwrap();
        assert!((ece(&b, 15).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ece_rejects_empty_or_unlabeled() {
        let probs = Tensor::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let b = PredictionBatch::from_probabilities(probs, None).unwrap();
        assert!(ece(&b, 15).is_err());
    }

    #[test]
    fn edge_confidence_goes_to_upper_bin() {
        assert_eq!(bin_index(0.8, 15), 12);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.0, 15), 0);
    }

    #[test]
    fn bins_partition_batch() {
        let probs = Tensor::from_rows(&[
            vec![0.55, 0.45],
            vec![0.95, 0.05],
            vec![0.75, 0.25],
        ])
        .unwrap();
        let b = PredictionBatch::from_probabilities(probs, Some(vec![0, 0, 1])).unwrap();
        let rb = reliability_bins(&b, 15).unwrap();
        assert_eq!(rb.counts.iter().sum::<usize>(), 3);
        let csv = rb.to_csv();
        assert!(csv.lines().count() == 16);
    }
}
