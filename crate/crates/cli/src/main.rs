use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tagground::data::{LabelAccess, load_dataset, split_dataset};
use tagground::eval::{
    EvalConfig, Report, evaluate, f1_curve, load_predictions, roc_points, tracks_for, write_curves,
};
use tagground::model::{load_checkpoint, save_checkpoint};
use tagground::pipeline::{ExperimentConfig, compare_runs, predict, run_pipeline};
use tagground::pooling::{AudioPoolKind, TextPoolKind};
use tagground::sampling::{Sampler, SamplingConfig, Strategy, load_pool};
use tagground::synth::{POOL_FILE, SynthConfig, generate, write_synth};
use tagground::train::{TrainConfig, TrainMode, train_with_vocab, vocab_size};
use tagground::{Error, Result, Rng};

/// Weakly-supervised text-to-audio grounding toolkit.
#[derive(Parser)]
#[command(name = "tagground", version)]
struct Cli {
    /// Worker threads for inference and evaluation (falls back to
    /// TAGGROUND_THREADS, then to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with hidden strong labels.
    GenData {
        /// Synthetic data config (JSON); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw and print one sampled phrase batch for a clip.
    Sample {
        #[command(flatten)]
        data: DataArgs,
        /// Clip id to sample for.
        #[arg(long)]
        clip: String,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from weak labels.
    Train {
        /// Data directory (reads train.jsonl and pool.bin).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Training config (JSON); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// sentence or phrase.
        #[arg(long)]
        mode: Option<TrainMode>,
        /// mean, max, linsoft or expsoft.
        #[arg(long)]
        audio_pool: Option<AudioPoolKind>,
        /// mean or sum (sentence mode).
        #[arg(long)]
        text_pool: Option<TextPoolKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        /// Clips held out for validation.
        #[arg(long, default_value_t = 200)]
        validation_count: usize,
        /// Frozen teacher checkpoint; enables self-supervision.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Per-epoch log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write frame probabilities for every caption phrase.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Predictions JSONL to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against strong labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// CSV report path (defaults to metrics.csv beside the predictions).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write PSD-ROC and F1-threshold curves (CSV and SVG).
    Curves {
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate metrics of several pipeline runs.
    Compare {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Data directory.
    #[arg(long)]
    data: PathBuf,
    /// Dataset file stem inside the data directory.
    #[arg(long, default_value = "test")]
    split: String,
}

impl DataArgs {
    fn file(&self) -> PathBuf {
        self.data.join(format!("{}.jsonl", self.split))
    }
}

#[derive(Args)]
struct SamplingArgs {
    /// none, random, similarity or clustering.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Phrases per clip, positives included.
    #[arg(long)]
    n: Option<usize>,
    /// Similarity threshold for similarity sampling.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of k-means clusters for clustering sampling.
    #[arg(long)]
    clusters: Option<usize>,
}

impl SamplingArgs {
    fn apply(&self, mut c: SamplingConfig) -> SamplingConfig {
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        if let Some(n) = self.n {
            c.n = n;
        }
        if let Some(t) = self.tau {
            c.tau = t;
        }
        if let Some(k) = self.clusters {
            c.clusters = k;
        }
        c
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Overlap criterion for both detection and ground-truth ratios.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Maximum false-positive rate (per hour) for PSDS.
    #[arg(long, default_value_t = 800.0)]
    emax: f64,
    /// Median filter window in frames (odd; 1 disables).
    #[arg(long, default_value_t = 1)]
    median: usize,
}

impl EvalArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            rho: self.rho,
            e_max: self.emax,
            median_window: self.median,
            ..EvalConfig::default()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            write_synth(&out, &cfg, &generate(&cfg)?)
        }
        Command::Sample {
            data,
            clip,
            sampling,
            seed,
        } => {
            let clips = load_dataset(data.file(), LabelAccess::Weak)?;
            let record = clips
                .iter()
                .find(|c| c.clip_id() == clip)
                .ok_or_else(|| Error::Invalid(format!("no clip {clip:?} in {}", data.file().display())))?;
            let pool = load_pool(data.data.join(POOL_FILE))?;
            let sampler = Sampler::new(sampling.apply(SamplingConfig::default()), pool, seed)?;
            let batch = sampler.sample(record, &mut Rng::new(seed))?;
            let doc = serde_json::json!({
                "clip_id": batch.clip_id,
                "phrases": batch.phrases.iter().map(|p| &p.text).collect::<Vec<_>>(),
                "y": batch.y,
                "n_pos": batch.n_pos,
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("json value"));
            Ok(())
        }
        Command::Train {
            data,
            out,
            config,
            mode,
            audio_pool,
            text_pool,
            epochs,
            embed_dim,
            validation_count,
            teacher,
            log,
            sampling,
            seed,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = mode {
                cfg.mode = v;
            }
            if let Some(v) = audio_pool {
                cfg.audio_pool = v;
            }
            if let Some(v) = text_pool {
                cfg.text_pool = v;
            }
            if let Some(v) = epochs {
                cfg.max_epochs = v;
            }
            if let Some(v) = embed_dim {
                cfg.embed_dim = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            cfg.validate()?;
            let clips = load_dataset(data.join("train.jsonl"), LabelAccess::Weak)?;
            let pool = load_pool(data.join(POOL_FILE))?;
            let (tr, va) = split_dataset(&clips, validation_count, &mut Rng::new(cfg.seed).fork(7))?;
            let min_vocab = pool
                .phrases()
                .iter()
                .flat_map(|p| p.tokens.iter().copied())
                .max()
                .map_or(1, |m| m + 1);
            let sampler = match cfg.mode {
                TrainMode::Phrase => Some(Sampler::new(
                    sampling.apply(SamplingConfig::default()),
                    pool,
                    cfg.seed,
                )?),
                TrainMode::Sentence => None,
            };
            let teacher = teacher.map(|p| load_checkpoint(p).map(|c| c.0)).transpose()?;
            let vocab = vocab_size(&[&tr, &va], sampler.as_ref()).max(min_vocab);
            let (params, tlog) =
                train_with_vocab(&tr, &va, &cfg, sampler.as_ref(), teacher.as_ref(), vocab)?;
            let echo = serde_json::json!({
                "train": cfg,
                "sampling": sampler.as_ref().map(|s| &s.config),
            });
            save_checkpoint(&out, &params, &echo)?;
            if let Some(p) = log {
                let lines: String = tlog
                    .epochs
                    .iter()
                    .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
                    .collect();
                write(&p, lines)?;
            }
            eprintln!(
                "trained {} epochs, best epoch {} (valid loss {:.6})",
                tlog.epochs.len(),
                tlog.best_epoch,
                tlog.best_valid_loss
            );
            Ok(())
        }
        Command::Infer { model, data, out } => {
            let (params, _) = load_checkpoint(&model)?;
            let clips = load_dataset(data.file(), LabelAccess::Weak)?;
            tagground::eval::save_predictions(&out, &predict(&params, &clips)?)
        }
        Command::Eval {
            pred,
            data,
            eval,
            csv,
        } => {
            let preds = load_predictions(&pred)?;
            let clips = load_dataset(data.file(), LabelAccess::Strong)?;
            let report = evaluate(&preds, &clips, &eval.config())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("plain struct")
            );
            let csv = csv.unwrap_or_else(|| pred.with_file_name("metrics.csv"));
            write(&csv, format!("{}\n{}\n", Report::CSV_HEADER, report.csv_row()))
        }
        Command::Curves {
            pred,
            data,
            eval,
            out,
        } => {
            let cfg = eval.config();
            cfg.validate()?;
            let preds = load_predictions(&pred)?;
            let clips = load_dataset(data.file(), LabelAccess::Strong)?;
            let tracks = tracks_for(&preds, &clips)?;
            write_curves(
                &out,
                &roc_points(&tracks, &cfg)?,
                &f1_curve(&tracks, &cfg)?,
                cfg.e_max,
            )
        }
        Command::Pipeline { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let report = run_pipeline(&cfg, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("plain struct")
            );
            Ok(())
        }
        Command::Compare { runs, csv } => {
            let table = compare_runs(&runs)?;
            print!("{}", table.to_pretty());
            match csv {
                Some(p) => write(&p, table.to_csv()),
                None => Ok(()),
            }
        }
    }
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TAGGROUND_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("TAGGROUND_THREADS must be a positive integer, got {v:?}")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match thread_count(cli.threads) {
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
        Ok(Some(0)) => {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(3);
            }
        }
        Ok(None) => {}
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
