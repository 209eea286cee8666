//! Command-line front end. `run` maps outcomes to exit codes:
//! 0 success, 1 validation error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{EvalConfig, Manifest, RunConfig, SEED_ENV};
use crate::data::{compute_label_stats, generate_synthetic, read_feature_file, write_feature_file, Dataset, LabelStats};
use crate::error::{MedcError, Result};
use crate::evaluation::{ablate, ablation_csv, evaluate, lambda_sweep, sweep_csv, Variant};
use crate::gradcheck::{check_full_objective, GradCheckShape, GRADCHECK_TOLERANCE};
use crate::training::{history_csv, run_training, Trainer};

#[derive(Debug, Parser)]
#[command(name = "medc", version, about = "Multi-expert distribution calibration for long-tailed multi-label features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tailed train file at --out and a balanced
    /// test file beside it (NAME.test.EXT).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides MEDC_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train all active experts and write checkpoints and the loss history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a feature file with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate expert subsets under several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Training feature file.
        #[arg(long)]
        data: PathBuf,
        /// Test feature file [default: NAME.test.EXT beside --data].
        #[arg(long)]
        test: Option<PathBuf>,
        /// Variants such as E1,E2+E3,MEDC [default: all single experts, pairs and MEDC].
        #[arg(long, value_delimiter = ',')]
        experts: Vec<String>,
        /// Add the full model without temporal attention as an extra row.
        #[arg(long)]
        no_temporal_attention: bool,
        /// Training seeds [default: the resolved run seed].
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Overall mAP over a (lambda1, lambda3) grid with lambda2 = 1.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda1: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda3: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of the full objective on a random batch.
    Gradcheck {
        /// [default: MEDC_SEED, else 0]
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses arguments and runs one command, printing errors to stderr.
pub fn run<I, T>(args: I, env_seed: Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// `train.medc` → `train.test.medc`.
pub fn test_path_for(train: &Path) -> PathBuf {
    let stem = train.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match train.extension() {
        Some(ext) => format!("{stem}.test.{}", ext.to_string_lossy()),
        None => format!("{stem}.test"),
    };
    train.with_file_name(name)
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| MedcError::Config("no output directory: pass --out or set \"output_dir\"".into()))?;
    fs::create_dir_all(&dir).map_err(|e| MedcError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| MedcError::io(&path, e))?;
    outputs.push(path);
    Ok(())
}

fn train_stats(data: &Dataset, eval: &EvalConfig) -> Result<LabelStats> {
    compute_label_stats(&data.records, data.num_classes, eval.head_threshold, eval.medium_threshold)
}

fn execute(cmd: Command, env: Option<&str>) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let seed = cfg.resolve_seed(seed, env)?;
            let mut syn_cfg = cfg.data.clone();
            syn_cfg.seed = seed;
            let syn = generate_synthetic(&syn_cfg)?;
            let test = test_path_for(&out);
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            fs::create_dir_all(dir).map_err(|e| MedcError::io(dir, e))?;
            write_feature_file(&out, &syn.train)?;
            write_feature_file(&test, &syn.test)?;
            Manifest::build(dir, &cfg.digest(), seed, &[out.clone(), test.clone()])?.write(dir)?;
            println!(
                "wrote {} ({} records) and {} ({} records)",
                out.display(),
                syn.train.len(),
                test.display(),
                syn.test.len()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            let cfg = RunConfig::load(&config)?;
            let seed = cfg.resolve_seed(seed, env)?;
            let dir = output_dir(out, &cfg)?;
            let train_data = read_feature_file(&data)?;
            let trainer = match resume {
                Some(path) => {
                    let mut t = Trainer::resume(Checkpoint::load(&path)?, &train_data)?;
                    t.cfg.epochs = cfg.train.epochs;
                    t
                }
                None => Trainer::new(cfg.train.clone(), &train_data, train_stats(&train_data, &cfg.eval)?, seed)?,
            };
            let outcome = run_training(trainer, &train_data, Some(&dir))?;
            let mut outputs = Vec::new();
            for c in &outcome.checkpoints {
                outputs.push(c.clone());
                outputs.push(c.with_extension("bin"));
            }
            write_text(dir.join("loss_history.csv"), &history_csv(&outcome.trainer.history), &mut outputs)?;
            write_text(dir.join("config.json"), &serde_json::to_string_pretty(&cfg)?, &mut outputs)?;
            Manifest::build(&dir, &cfg.digest(), seed, &outputs)?.write(&dir)?;
            println!(
                "trained {} epochs; checkpoint {}",
                outcome.trainer.epoch,
                outcome.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default()
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let test = read_feature_file(&data)?;
            let model = ckpt.model()?;
            let meta = ckpt.meta;
            let digest = crate::checkpoint::sha256_hex(&serde_json::to_vec(&meta.train)?);
            let report = evaluate(&model, &test, &meta.label_stats, None)?.with_provenance(&digest, meta.seed);
            fs::create_dir_all(&out).map_err(|e| MedcError::io(&out, e))?;
            let mut outputs = Vec::new();
            write_text(out.join("metrics.json"), &serde_json::to_string_pretty(&report)?, &mut outputs)?;
            write_text(out.join("metrics.csv"), &report.metrics_csv(), &mut outputs)?;
            write_text(out.join("per_class_ap.csv"), &report.per_class_csv(), &mut outputs)?;
            Manifest::build(&out, &digest, meta.seed, &outputs)?.write(&out)?;
            print!("{}", report.metrics_csv());
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            test,
            experts,
            no_temporal_attention,
            seeds,
            out,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let seed = cfg.resolve_seed(seed, env)?;
            let dir = output_dir(out, &cfg)?;
            let train_data = read_feature_file(&data)?;
            let test_data = read_feature_file(test.unwrap_or_else(|| test_path_for(&data)))?;
            let mut variants: Vec<Variant> = if experts.is_empty() {
                crate::evaluation::table3_variants().into_iter().filter(|v| v.temporal_attention).collect()
            } else {
                experts.iter().map(|s| Variant::parse(s)).collect::<Result<_>>()?
            };
            if no_temporal_attention {
                variants.push(Variant::no_temporal_attention());
            }
            let seeds = if seeds.is_empty() { vec![seed] } else { seeds };
            let stats = train_stats(&train_data, &cfg.eval)?;
            let rows = ablate(&cfg.train, &variants, &train_data, &test_data, &stats, &seeds)?;
            let mut outputs = Vec::new();
            write_text(dir.join("ablation.csv"), &ablation_csv(&rows), &mut outputs)?;
            write_text(dir.join("ablation.json"), &serde_json::to_string_pretty(&rows)?, &mut outputs)?;
            Manifest::build(&dir, &cfg.digest(), seed, &outputs)?.write(&dir)?;
            print!("{}", ablation_csv(&rows));
            Ok(())
        }
        Command::Sweep {
            config,
            data,
            test,
            lambda1,
            lambda3,
            out,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let seed = cfg.resolve_seed(seed, env)?;
            let dir = output_dir(out, &cfg)?;
            let train_data = read_feature_file(&data)?;
            let test_data = read_feature_file(test.unwrap_or_else(|| test_path_for(&data)))?;
            let stats = train_stats(&train_data, &cfg.eval)?;
            let cells = lambda_sweep(&cfg.train, &lambda1, &lambda3, &train_data, &test_data, &stats, seed)?;
            let mut outputs = Vec::new();
            write_text(dir.join("sweep.csv"), &sweep_csv(&cells), &mut outputs)?;
            Manifest::build(&dir, &cfg.digest(), seed, &outputs)?.write(&dir)?;
            print!("{}", sweep_csv(&cells));
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let seed = match (seed, env) {
                (Some(s), _) => s,
                (None, Some(v)) => v
                    .trim()
                    .parse()
                    .map_err(|_| MedcError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                (None, None) => 0,
            };
            let r = check_full_objective(seed, GradCheckShape::default())?;
            let verdict = if r.max_rel_err < GRADCHECK_TOLERANCE { "PASS" } else { "FAIL" };
            println!(
                "{verdict} max_rel_err={:e} entries={} kink_skipped={}",
                r.max_rel_err, r.entries_checked, r.entries_straddling_kinks
            );
            if verdict == "FAIL" {
                let (name, k) = r.worst.unwrap_or_default();
                return Err(MedcError::GradCheck(format!(
                    "mismatch {:e} at {name}[{k}] exceeds {GRADCHECK_TOLERANCE:e}",
                    r.max_rel_err
                )));
            }
            Ok(())
        }
    }
}
