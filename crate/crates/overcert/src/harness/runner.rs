//! Experiment driver: source training, per-cell adaptation runs, evaluation,
//! and memory-overhead accounting.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{eta_adapt, t3a_centroids, t3a_collect, tent_adapt, EtaState, SupportSet};
use crate::cd::{cd_adapt, compute_source_stats, SourceStats};
use crate::data::{apply_corruption, batch_iter, generate_source, CorruptionKind, LabeledDataset, ShiftSpec};
use crate::error::{Error, Result};
use crate::harness::config::{AlgorithmKind, ExperimentConfig};
use crate::metrics::{accuracy, ece, PredictionBatch};
use crate::nn::{load_network, save_network, softmax_temp, BnMode, Layer, Network};
use crate::tensor::Tensor;

/// One result row: a single (algorithm, domain, intensity, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub corruption: String,
    pub intensity: u8,
    pub seed: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_entropy_bits: f64,
    pub mean_certainty: f64,
    pub memory_params: u64,
    pub memory_bytes: u64,
}

/// A model ready for evaluation: either a plain network or a network plus
/// prototype centroids.
pub enum Predictor {
    Network(Network),
    Prototype {
        network: Network,
        centroids: Vec<Vec<f64>>,
    },
}

impl Predictor {
    pub fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        match self {
            Predictor::Network(net) => net.predict_probs(batch),
            Predictor::Prototype { network, centroids } => {
                let features = network.features(batch)?;
                let mut rows = Vec::with_capacity(features.rows());
                for i in 0..features.rows() {
                    let (_, probs) =
                        crate::baselines::t3a_predict(features.row(i), centroids)?;
                    rows.push(probs);
                }
                Tensor::from_rows(&rows)
            }
        }
    }
}

/// Dense -> batch_norm -> relu blocks at the configured widths, then a dense
/// classifier. Weights are seeded Gaussian scaled by 1/sqrt(fan_in).
pub fn build_network(dim: usize, classes: usize, widths: &[usize], seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_745f_696e_6974);
    let mut layers = Vec::new();
    let mut fan_in = dim;
    for &w in widths {
        layers.push(init_dense(fan_in, w, &mut rng));
        layers.push(Layer::batch_norm(w));
        layers.push(Layer::relu(w));
        fan_in = w;
    }
    layers.push(init_dense(fan_in, classes, &mut rng));
    Network::new(layers)
}

fn init_dense<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Layer {
    let scale = 1.0 / (input_dim as f64).sqrt();
    let mut layer = Layer::dense(input_dim, output_dim);
    if let Layer::Dense { weights, .. } = &mut layer {
        for w in weights.iter_mut() {
            *w = scale * gaussian(rng);
        }
    }
    layer
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Train the backbone on freshly generated source data by minimizing
/// cross-entropy with SGD. Batch-norm uses batch statistics during training
/// and folds them into the running statistics; the returned network is in
/// running-stats mode.
pub fn train_source(config: &ExperimentConfig, seed: u64) -> Result<(Network, SourceStats)> {
    let ds = &config.dataset;
    let source = generate_source(ds.classes, ds.dim, ds.train_samples, ds.separation, seed)?;
    let mut net = build_network(ds.dim, ds.classes, &config.backbone.widths, seed)?;
    net.bn_mode = BnMode::BatchStats;
    let tc = &config.train;
    for epoch in 0..tc.epochs {
        let batches = batch_iter(&source, tc.batch_size, seed.wrapping_add(epoch as u64))?;
        for (batch, labels) in &batches {
            if batch.rows() < 2 {
                continue;
            }
            let (logits, cache) = net.forward_cached(batch)?;
            net.absorb_batch_stats(&cache, tc.bn_momentum);
            let probs = softmax_temp(&logits, 1.0)?;
            let n = batch.rows() as f64;
            // Cross-entropy gradient at the logits: (p - onehot) / n.
            let mut d_logits = probs.clone();
            for (i, label) in labels.iter().enumerate() {
                d_logits.row_mut(i)[*label] -= 1.0;
            }
            for v in d_logits.data_mut() {
                *v /= n;
                if !v.is_finite() {
                    return Err(Error::NonFinite("source training loss gradient".into()));
                }
            }
            let grads = net.backward(&cache, &d_logits)?;
            net.sgd_step(&grads, tc.learning_rate)?;
        }
    }
    net.bn_mode = BnMode::RunningStats;
    let stats = compute_source_stats(&net, &source.features)?;
    Ok((net, stats))
}

/// Save a trained checkpoint plus its source statistics next to it.
pub fn save_checkpoint(net: &Network, stats: &SourceStats, path: &Path) -> Result<()> {
    save_network(net, path)?;
    let stats_json = serde_json::to_string_pretty(stats)
        .map_err(|e| Error::Config(format!("serializing source stats: {e}")))?;
    std::fs::write(stats_path(path), stats_json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, SourceStats)> {
    if !path.exists() {
        return Err(Error::Input(format!("missing checkpoint {path:?}")));
    }
    let net = load_network(path)?;
    let text = std::fs::read_to_string(stats_path(path))?;
    let stats = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("reading source stats: {e}")))?;
    Ok((net, stats))
}

fn stats_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".stats.json");
    std::path::PathBuf::from(p)
}

/// Memory overhead in stored parameters for each algorithm on a backbone.
/// CD: the unfrozen parameter count, i.e. (1 - realized beta) * total.
/// T3A: bound * classifier parameters, or realized supports * feature width
/// when unbounded. TENT/ETA: the batch-norm parameter count.
pub fn memory_overhead(
    algorithm: AlgorithmKind,
    network: &Network,
    cd_beta: f64,
    t3a_bound: Option<usize>,
    t3a_realized: Option<(usize, usize)>,
) -> Result<u64> {
    Ok(match algorithm {
        AlgorithmKind::None => 0,
        AlgorithmKind::Cd => {
            let mut probe = network.clone();
            probe.freeze_output_fraction(cd_beta)?;
            probe.unfrozen_param_count() as u64
        }
        AlgorithmKind::Tent | AlgorithmKind::Eta => network.bn_param_count() as u64,
        AlgorithmKind::T3a => match (t3a_bound, t3a_realized) {
            (Some(m), _) => (m * network.classifier_param_count()) as u64,
            (None, Some((supports, dim))) => (supports * dim) as u64,
            (None, None) => {
                return Err(Error::Parameter(
                    "unbounded support memory needs the realized support count".into(),
                ))
            }
        },
    })
}

/// Evaluate a predictor on a labeled target set.
pub fn evaluate(
    predictor: &Predictor,
    data: &LabeledDataset,
    bins: usize,
) -> Result<(f64, f64, f64, f64)> {
    let probs = predictor.predict_probs(&data.features)?;
    let batch = PredictionBatch::from_probabilities(probs, Some(data.labels.clone()))?;
    Ok((
        accuracy(&batch)?,
        ece(&batch, bins)?,
        batch.mean_entropy_bits()?,
        batch.mean_certainty()?,
    ))
}

fn target_seed(seed: u64, kind: CorruptionKind, intensity: u8) -> u64 {
    seed.wrapping_mul(0x0100_0000_01b3)
        .wrapping_add(1000 + 100 * intensity as u64)
        .wrapping_add(31 * match kind {
            CorruptionKind::GaussianNoise => 1,
            CorruptionKind::FeatureScale => 2,
            CorruptionKind::Rotation => 3,
            CorruptionKind::MeanShift => 4,
        })
}

/// Build the shifted target set for one cell.
pub fn make_target(
    config: &ExperimentConfig,
    kind: CorruptionKind,
    intensity: u8,
    seed: u64,
) -> Result<LabeledDataset> {
    let ds = &config.dataset;
    let tseed = target_seed(seed, kind, intensity);
    let base = generate_source(ds.classes, ds.dim, ds.target_samples, ds.separation, tseed)?;
    apply_corruption(
        &base,
        &ShiftSpec {
            kind,
            intensity,
            seed: tseed,
        },
    )
}

/// Adapt a fresh copy of the checkpoint with one algorithm and return the
/// predictor plus its memory overhead in parameters.
pub fn adapt_with(
    algorithm: AlgorithmKind,
    network: &Network,
    stats: &SourceStats,
    config: &ExperimentConfig,
    target: &LabeledDataset,
) -> Result<(Predictor, u64)> {
    match algorithm {
        AlgorithmKind::None => {
            let mut net = network.clone();
            net.bn_mode = BnMode::RunningStats;
            Ok((Predictor::Network(net), 0))
        }
        AlgorithmKind::Cd => {
            let mut student = network.clone();
            student.bn_mode = BnMode::RunningStats;
            let mut teacher = network.clone();
            teacher.bn_mode = BnMode::RunningStats;
            let cd_cfg = config.cd_config();
            let (adapted, _) = cd_adapt(&teacher, student, &target.features, stats, &cd_cfg)?;
            let mem = memory_overhead(algorithm, network, cd_cfg.beta, None, None)?;
            Ok((Predictor::Network(adapted), mem))
        }
        AlgorithmKind::Tent => {
            let (adapted, _) = tent_adapt(
                network.clone(),
                &target.features,
                config.experiment.baseline_lambda,
                config.experiment.baseline_batch_size,
            )?;
            let mem = memory_overhead(algorithm, network, 0.0, None, None)?;
            Ok((Predictor::Network(adapted), mem))
        }
        AlgorithmKind::Eta => {
            let mut state = EtaState::new(config.dataset.classes, config.eta.epsilon);
            state.ema_decay = config.eta.ema_decay;
            let (adapted, _) = eta_adapt(
                network.clone(),
                &target.features,
                &mut state,
                config.experiment.baseline_lambda,
                config.experiment.baseline_batch_size,
            )?;
            let mem = memory_overhead(algorithm, network, 0.0, None, None)?;
            Ok((Predictor::Network(adapted), mem))
        }
        AlgorithmKind::T3a => {
            let mut net = network.clone();
            net.bn_mode = BnMode::RunningStats;
            let support = t3a_collect(&net, &target.features, config.t3a.max_per_class)?;
            let mem = t3a_memory(&net, &support)?;
            let centroids = t3a_centroids(&support);
            Ok((Predictor::Prototype { network: net, centroids }, mem))
        }
    }
}

fn t3a_memory(network: &Network, support: &SupportSet) -> Result<u64> {
    let feature_dim = network
        .classifier_index()
        .map(|i| network.layers[i].input_dim())
        .unwrap_or(0);
    memory_overhead(
        AlgorithmKind::T3a,
        network,
        0.0,
        support.max_per_class,
        Some((support.total_supports(), feature_dim)),
    )
}

/// Run one (algorithm, corruption, intensity, seed) cell against an already
/// trained checkpoint.
pub fn run_cell(
    algorithm: AlgorithmKind,
    network: &Network,
    stats: &SourceStats,
    config: &ExperimentConfig,
    kind: CorruptionKind,
    intensity: u8,
    seed: u64,
) -> Result<MetricsRow> {
    let target = make_target(config, kind, intensity, seed)?;
    let started = Instant::now();
    let (predictor, memory_params) = adapt_with(algorithm, network, stats, config, &target)?;
    let wall = started.elapsed();
    let (acc, ece_val, entropy, cert) = evaluate(&predictor, &target, config.experiment.ece_bins)?;
    // Informational only; kept out of the report files so reruns are
    // byte-identical.
    eprintln!(
        "cell {} {} i{} seed{}: adapt {:?}",
        algorithm.name(),
        kind.name(),
        intensity,
        seed,
        wall
    );
    Ok(MetricsRow {
        algorithm: algorithm.name().into(),
        corruption: kind.name().into(),
        intensity,
        seed,
        accuracy: acc,
        ece: ece_val,
        mean_entropy_bits: entropy,
        mean_certainty: cert,
        memory_params,
        memory_bytes: memory_params * 8,
    })
}

/// Full grid for one algorithm: 4 corruption kinds x 5 intensities x seeds.
pub fn run_adaptation(
    algorithm: AlgorithmKind,
    network: &Network,
    stats: &SourceStats,
    config: &ExperimentConfig,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for kind in CorruptionKind::ALL {
        for intensity in 1..=5u8 {
            for &seed in &config.experiment.seeds {
                rows.push(run_cell(
                    algorithm, network, stats, config, kind, intensity, seed,
                )?);
            }
        }
    }
    Ok(rows)
}

/// Train one checkpoint per seed and run every configured algorithm over the
/// full corruption grid. Checkpoints are shared across algorithms so the
/// no-adaptation rows form a common baseline.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let mut checkpoints = Vec::new();
    for &seed in &config.experiment.seeds {
        checkpoints.push((seed, train_source(config, seed)?));
    }
    let mut rows = Vec::new();
    for &algorithm in &config.experiment.algorithms {
        for kind in CorruptionKind::ALL {
            for intensity in 1..=5u8 {
                for (seed, (net, stats)) in &checkpoints {
                    rows.push(run_cell(
                        algorithm, net, stats, config, kind, intensity, *seed,
                    )?);
                }
            }
        }
    }
    Ok(rows)
}

/// The memory/performance trade-off table: CD swept over beta, T3A swept
/// over the retention bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub algorithm: String,
    pub parameter: String,
    pub value: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub memory_params: u64,
    pub memory_bytes: u64,
}

pub const BETA_SWEEP: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 0.98, 1.0];
pub const M_SWEEP: [usize; 4] = [1, 5, 10, 50];

pub fn run_tradeoff(config: &ExperimentConfig) -> Result<Vec<TradeoffRow>> {
    let seed = *config.experiment.seeds.first().unwrap_or(&0);
    let (net, stats) = train_source(config, seed)?;
    let kind = CorruptionKind::GaussianNoise;
    let intensity = 3;
    let target = make_target(config, kind, intensity, seed)?;
    let mut rows = Vec::new();
    for beta in BETA_SWEEP {
        let mut cfg = config.clone();
        cfg.cd.beta = beta;
        let (predictor, mem) = adapt_with(AlgorithmKind::Cd, &net, &stats, &cfg, &target)?;
        let (acc, ece_val, _, _) = evaluate(&predictor, &target, cfg.experiment.ece_bins)?;
        rows.push(TradeoffRow {
            algorithm: "cd".into(),
            parameter: "beta".into(),
            value: beta,
            accuracy: acc,
            ece: ece_val,
            memory_params: mem,
            memory_bytes: mem * 8,
        });
    }
    for m in M_SWEEP {
        let mut cfg = config.clone();
        cfg.t3a.max_per_class = Some(m);
        let (predictor, mem) = adapt_with(AlgorithmKind::T3a, &net, &stats, &cfg, &target)?;
        let (acc, ece_val, _, _) = evaluate(&predictor, &target, cfg.experiment.ece_bins)?;
        rows.push(TradeoffRow {
            algorithm: "t3a".into(),
            parameter: "m".into(),
            value: m as f64,
            accuracy: acc,
            ece: ece_val,
            memory_params: mem,
            memory_bytes: mem * 8,
        });
    }
    Ok(rows)
}
