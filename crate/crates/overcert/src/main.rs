use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use overcert::data::{apply_corruption, generate_source, save_dataset, CorruptionKind, ShiftSpec};
use overcert::harness::{
    self, report, AlgorithmKind, ExperimentConfig, MetricsRow, ReportFormat,
};

#[derive(Parser)]
#[command(name = "overcert", about = "Test-time adaptation experiments with calibration reporting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file, optionally corrupted.
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One of gaussian_noise, feature_scale, rotation, mean_shift.
        #[arg(long)]
        corruption: Option<String>,
        #[arg(long)]
        intensity: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source backbone and write a checkpoint plus source stats.
    TrainSource {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint to one shifted domain and append result rows.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        algorithm: String,
        #[arg(long)]
        corruption: String,
        #[arg(long)]
        intensity: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full grid: every configured algorithm over 4 corruption kinds x
    /// 5 intensities x all seeds, plus the memory trade-off table.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also emit the beta/M memory trade-off table.
        #[arg(long, default_value_t = false)]
        tradeoff: bool,
    },
    /// Aggregate previously written row files into report tables.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        rows: Vec<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> overcert::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> overcert::Result<()> {
    match cli.command {
        Command::GenData {
            classes,
            dim,
            samples,
            separation,
            seed,
            corruption,
            intensity,
            out,
        } => {
            let mut data = generate_source(classes, dim, samples, separation, seed)?;
            if let Some(kind) = corruption {
                let spec = ShiftSpec {
                    kind: CorruptionKind::parse(&kind)?,
                    intensity: intensity.unwrap_or(1),
                    seed,
                };
                data = apply_corruption(&data, &spec)?;
            }
            save_dataset(&data, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::TrainSource { config, seed, out } => {
            let cfg = load_config(&config)?;
            let (net, stats) = harness::train_source(&cfg, seed)?;
            harness::save_checkpoint(&net, &stats, &out)?;
            println!(
                "wrote checkpoint {} (h0={:.4} bits, kappa={:.4})",
                out.display(),
                stats.h0,
                stats.kappa
            );
        }
        Command::Adapt {
            config,
            checkpoint,
            algorithm,
            corruption,
            intensity,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let (net, stats) = harness::load_checkpoint(&checkpoint)?;
            let algo = AlgorithmKind::parse(&algorithm)?;
            let kind = CorruptionKind::parse(&corruption)?;
            let row = harness::run_cell(algo, &net, &stats, &cfg, kind, intensity, seed)?;
            std::fs::write(&out, report::rows_to_csv(&[row]))?;
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            config,
            out_dir,
            tradeoff,
        } => {
            let cfg = load_config(&config)?;
            let rows = harness::run_sweep(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let written = harness::emit_report(&rows, ReportFormat::Csv, &out_dir, "sweep")?;
            for p in &written {
                println!("wrote {}", p.display());
            }
            if tradeoff {
                let t = harness::run_tradeoff(&cfg)?;
                let path = out_dir.join("tradeoff.csv");
                std::fs::write(&path, report::tradeoff_to_csv(&t))?;
                println!("wrote {}", path.display());
            }
        }
        Command::Report {
            rows,
            format,
            out_dir,
        } => {
            let fmt = ReportFormat::parse(&format)?;
            let mut all: Vec<MetricsRow> = Vec::new();
            for path in &rows {
                let text = std::fs::read_to_string(path)?;
                all.extend(report::rows_from_csv(&text)?);
            }
            let written = harness::emit_report(&all, fmt, &out_dir, "report")?;
            for p in &written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Machine-readable single-line error.
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
