//! Experiment configuration, read from a TOML file. Every field has a
//! default so a minimal file (or none at all) runs the reference setup.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cd::{CdConfig, LossKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    None,
    Cd,
    Tent,
    Eta,
    T3a,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::None,
        AlgorithmKind::Cd,
        AlgorithmKind::Tent,
        AlgorithmKind::Eta,
        AlgorithmKind::T3a,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::None => "none",
            AlgorithmKind::Cd => "cd",
            AlgorithmKind::Tent => "tent",
            AlgorithmKind::Eta => "eta",
            AlgorithmKind::T3a => "t3a",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Hidden widths; each becomes a dense -> batch_norm -> relu block
    /// followed by a final dense classifier.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 32],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_samples: usize,
    pub target_samples: usize,
    pub separation: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            train_samples: 5000,
            target_samples: 2000,
            separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Momentum for updating batch-norm running statistics during training.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 64,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub algorithms: Vec<AlgorithmKind>,
    pub seeds: Vec<u64>,
    pub ece_bins: usize,
    /// Batch size for the TENT/ETA baselines.
    pub baseline_batch_size: usize,
    /// Learning rate for the TENT/ETA baselines.
    pub baseline_lambda: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            algorithms: AlgorithmKind::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3],
            ece_bins: 15,
            baseline_batch_size: 64,
            baseline_lambda: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CdSection {
    pub t_min: f64,
    pub t_max: f64,
    /// Entropy scale; when absent it defaults to log2(classes).
    pub h_max: Option<f64>,
    pub beta: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub loss: LossKind,
}

impl Default for CdSection {
    fn default() -> Self {
        Self {
            t_min: 1.2,
            t_max: 5.0,
            h_max: None,
            beta: 0.0,
            lambda: 0.001,
            batch_size: 50,
            loss: LossKind::PerClassBce,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EtaSection {
    pub epsilon: f64,
    pub ema_decay: f64,
}

impl Default for EtaSection {
    fn default() -> Self {
        Self {
            epsilon: 0.4,
            ema_decay: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct T3aSection {
    /// Retention bound per class; absent means unbounded.
    pub max_per_class: Option<usize>,
}

impl Default for T3aSection {
    fn default() -> Self {
        Self { max_per_class: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub cd: CdSection,
    pub eta: EtaSection,
    pub t3a: T3aSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))
    }

    pub fn cd_config(&self) -> CdConfig {
        CdConfig {
            t_min: self.cd.t_min,
            t_max: self.cd.t_max,
            h_max: self
                .cd
                .h_max
                .unwrap_or_else(|| (self.dataset.classes as f64).log2()),
            beta: self.cd.beta,
            lambda: self.cd.lambda,
            batch_size: self.cd.batch_size,
            loss: self.cd.loss,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.experiment.seeds, vec![0, 1, 2, 3]);
        assert_eq!(cfg.experiment.ece_bins, 15);
        assert_eq!(cfg.cd.batch_size, 50);
        let cd = cfg.cd_config();
        assert!((cd.h_max - 10f64.log2()).abs() < 1e-12);
        assert!((cd.t_min - 1.2).abs() < 1e-12);
        assert!((cd.t_max - 5.0).abs() < 1e-12);
        assert!((cd.lambda - 0.001).abs() < 1e-12);
    }

    #[test]
    fn partial_toml_overrides() {
        let cfg: ExperimentConfig =
            toml::from_str("[cd]\nbeta = 0.5\n[dataset]\nclasses = 4\n").unwrap();
        assert!((cfg.cd.beta - 0.5).abs() < 1e-12);
        assert_eq!(cfg.dataset.classes, 4);
        assert_eq!(cfg.backbone.widths, vec![64, 32]);
    }
}
