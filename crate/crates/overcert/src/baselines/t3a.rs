//! Gradient-free prototype adaptation. Feature-extractor outputs are
//! collected per predicted class, optionally keeping only the M
//! lowest-entropy entries, and classification is a softmax over inner
//! products with the class centroids.
//!
//! Each class list is seeded with the corresponding classifier weight row
//! (bias ignored) at maximum entropy, so predictions before any update match
//! the base classifier; the seeding is a reconstruction.

use crate::error::{Error, Result};
use crate::metrics::{argmax, entropy_nats};
use crate::nn::{softmax_temp, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SupportSet {
    /// Per class: (representation, entropy at insertion), kept sorted by
    /// ascending entropy when bounded.
    supports: Vec<Vec<(Vec<f64>, f64)>>,
    /// Initialization prototypes, the fallback for emptied classes.
    init: Vec<Vec<f64>>,
    /// Retention bound per class; `None` means unbounded.
    pub max_per_class: Option<usize>,
}

impl SupportSet {
    /// Seed each class with the classifier's weight row.
    pub fn from_classifier(network: &Network, max_per_class: Option<usize>) -> Result<Self> {
        let rows = network.classifier_weight_rows()?;
        let classes = rows.len();
        let max_entropy = (classes as f64).ln();
        let supports = rows
            .iter()
            .map(|r| vec![(r.clone(), max_entropy)])
            .collect();
        Ok(Self {
            supports,
            init: rows,
            max_per_class,
        })
    }

    pub fn classes(&self) -> usize {
        self.init.len()
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.supports[class].len()
    }

    /// Total stored support entries across classes.
    pub fn total_supports(&self) -> usize {
        self.supports.iter().map(|s| s.len()).sum()
    }

    /// Append `z` to the predicted class's list; evict the highest-entropy
    /// entries when over the retention bound.
    pub fn update(&mut self, z: Vec<f64>, predicted: usize, entropy: f64) -> Result<()> {
        if predicted >= self.classes() {
            return Err(Error::Input(format!(
                "predicted class {predicted} out of range"
            )));
        }
        let list = &mut self.supports[predicted];
        list.push((z, entropy));
        if let Some(m) = self.max_per_class {
            list.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            list.truncate(m);
        }
        Ok(())
    }

    /// Per-class centroids. Empty classes fall back to the initialization
    /// prototype.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        self.supports
            .iter()
            .enumerate()
            .map(|(k, list)| {
                if list.is_empty() {
                    return self.init[k].clone();
                }
                let dim = list[0].0.len();
                let mut c = vec![0.0; dim];
                for (z, _) in list {
                    for (ci, zi) in c.iter_mut().zip(z) {
                        *ci += zi;
                    }
                }
                let n = list.len() as f64;
                c.iter_mut().for_each(|v| *v /= n);
                c
            })
            .collect()
    }
}

pub fn t3a_centroids(support: &SupportSet) -> Vec<Vec<f64>> {
    support.centroids()
}

/// Softmax over inner products with the centroids.
pub fn t3a_predict(z: &[f64], centroids: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    if centroids.iter().any(|c| c.len() != z.len()) {
        return Err(Error::Shape(
            "representation/centroid dimensionality mismatch".into(),
        ));
    }
    let logits: Vec<f64> = centroids
        .iter()
        .map(|c| c.iter().zip(z).map(|(ci, zi)| ci * zi).sum())
        .collect();
    let t = Tensor::from_rows(&[logits])?;
    let probs = softmax_temp(&t, 1.0)?.row(0).to_vec();
    Ok((argmax(&probs), probs))
}

/// Run one pass over the observations, inserting each feature representation
/// into the support set under its prototype-based prediction. No gradients
/// are involved.
pub fn t3a_collect(
    network: &Network,
    observations: &Tensor,
    max_per_class: Option<usize>,
) -> Result<SupportSet> {
    if observations.rows() == 0 {
        return Err(Error::Input("no observations to adapt on".into()));
    }
    let mut support = SupportSet::from_classifier(network, max_per_class)?;
    let features = network.features(observations)?;
    for i in 0..features.rows() {
        let z = features.row(i);
        let centroids = support.centroids();
        let (predicted, probs) = t3a_predict(z, &centroids)?;
        let h = entropy_nats(&probs)?;
        support.update(z.to_vec(), predicted, h)?;
    }
    Ok(support)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn classifier_network() -> Network {
        let mut l = Layer::dense(2, 2);
        if let Layer::Dense { weights, .. } = &mut l {
            weights.copy_from_slice(&[2.0, 0.0, 0.0, 2.0]);
        }
        Network::new(vec![l]).unwrap()
    }

    #[test]
    fn bounded_retention_keeps_lowest_entropy() {
        let net = classifier_network();
        let mut s = SupportSet::from_classifier(&net, Some(1)).unwrap();
        s.update(vec![1.0, 0.0], 0, 0.9).unwrap();
        assert_eq!(s.class_len(0), 1);
        s.update(vec![0.5, 0.5], 0, 0.3).unwrap();
        assert_eq!(s.class_len(0), 1);
        assert_eq!(s.centroids()[0], vec![0.5, 0.5]);
        // Other class untouched.
        assert_eq!(s.class_len(1), 1);
    }

    #[test]
    fn unbounded_grows_by_one_per_insert() {
        let net = classifier_network();
        let mut s = SupportSet::from_classifier(&net, None).unwrap();
        for i in 0..5 {
            s.update(vec![i as f64, 0.0], 0, 0.1 * i as f64).unwrap();
            assert_eq!(s.class_len(0), i + 2);
        }
    }

    #[test]
    fn centroid_arithmetic() {
        let net = classifier_network();
        let mut s = SupportSet::from_classifier(&net, Some(10)).unwrap();
        // Displace the seed for class 0 with two real supports.
        s.max_per_class = Some(2);
        s.update(vec![0.0, 2.0], 0, 0.1).unwrap();
        s.update(vec![2.0, 0.0], 0, 0.2).unwrap();
        assert_eq!(s.centroids()[0], vec![1.0, 1.0]);

        // Random supports vs independent summation.
        let mut s = SupportSet::from_classifier(&net, None).unwrap();
        let vs = [vec![0.3, -1.2], vec![2.5, 0.7], vec![-0.4, 0.9]];
        for v in &vs {
            s.update(v.clone(), 1, 0.5).unwrap();
        }
        let init = &s.init[1];
        let mean0 = (init[0] + vs.iter().map(|v| v[0]).sum::<f64>()) / 4.0;
        let mean1 = (init[1] + vs.iter().map(|v| v[1]).sum::<f64>()) / 4.0;
        let c = s.centroids();
        assert!((c[1][0] - mean0).abs() < 1e-12);
        assert!((c[1][1] - mean1).abs() < 1e-12);
    }

    #[test]
    fn seeded_predictions_match_base_classifier() {
        // Bias-free classifier: z . w_k reproduces the logits exactly.
        let net = classifier_network();
        let s = SupportSet::from_classifier(&net, None).unwrap();
        let centroids = s.centroids();
        for z in [[0.7, -0.3], [-1.0, 2.0], [0.2, 0.1]] {
            let x = Tensor::from_rows(&[z.to_vec()]).unwrap();
            let logits = net.forward(&x).unwrap();
            let (pred, _) = t3a_predict(&z, &centroids).unwrap();
            assert_eq!(pred, argmax(logits.row(0)));
        }
    }

    #[test]
    fn orthogonal_representation_gives_uniform() {
        let centroids = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let (_, probs) = t3a_predict(&[0.0, 0.0, 5.0], &centroids).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_class_hand_example() {
        let centroids = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let (pred, probs) = t3a_predict(&[1.0, 0.0], &centroids).unwrap();
        assert_eq!(pred, 0);
        // p0 = sigmoid(2).
        assert!((probs[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!((probs[0] - 0.881).abs() < 1e-3);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let centroids = vec![vec![1.0, 0.0]];
        assert!(t3a_predict(&[1.0, 0.0, 0.0], &centroids).is_err());
    }
}
