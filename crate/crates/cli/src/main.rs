//! `cgtrack` — command-line front end.
//!
//! Subcommands cover the whole desk-scale loop: `init` a checkpoint, `synth`
//! a sequence, `smoke-train` on it, `track` it, `eval` the results, plus the
//! `profile` cost report and the `gradcheck` finite-difference suite. All
//! commands exit 0 on success and nonzero with a one-line diagnostic on
//! failure; the `CGTRACK_SEED` environment variable overrides the config
//! seed.

use cgtrack_core::config::RunConfig;
use cgtrack_core::error::Result;
use cgtrack_core::gradcheck;
use cgtrack_core::metrics;
use cgtrack_core::metrics::SequenceRecord;
use cgtrack_core::model::{Model, Variant};
use cgtrack_core::profiler;
use cgtrack_core::synth;
use cgtrack_core::track::track_sequence;
use cgtrack_core::train::{build_batch, history_csv, smoke_train};
use clap::{Parser, Subcommand};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cgtrack", version, about = "CGTrack tracker: training, tracking, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a freshly initialized checkpoint.
    Init {
        /// Model size: T, S, or B.
        #[arg(long)]
        variant: String,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Initialization seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic sequence directory.
    Synth {
        /// Run configuration file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output sequence directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit a checkpoint on one fixed batch from a sequence.
    SmokeTrain {
        /// Checkpoint to train; updated in place.
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Number of optimizer steps (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Track a sequence with a trained checkpoint.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence directory with frames and groundtruth.txt.
        #[arg(long)]
        seq: PathBuf,
        /// Result box file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score tracking results against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Attribute file (`name: tag,tag` lines).
        #[arg(long)]
        attrs: Option<PathBuf>,
        /// Report CSV to write.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the parameter/MAC cost report for a variant.
    Profile {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        /// ndcore|backbone|hfc|lgch|objective|all
        #[arg(long, default_value = "all")]
        scope: String,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var("CGTRACK_SEED").ok();
    cfg.apply_seed_override(env.as_deref())?;
    Ok(cfg)
}

/// Sequence name for attribute lookup: the ground-truth file's directory.
fn sequence_name(gt_path: &Path) -> String {
    gt_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "sequence".to_string())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Init { variant, out, seed } => {
            let v: Variant = variant.parse()?;
            let mut cfg = RunConfig::default();
            cfg.variant = v;
            let model = Model::<f32>::new(&cfg.model_config(), seed)?;
            model.save(&out)?;
            println!(
                "initialized CGTrack-{} ({} trainable params) at {}",
                v,
                model.store.trainable_params(),
                out.display()
            );
        }
        Cmd::Synth { config, out } => {
            let cfg = load_config(&config)?;
            let seq = synth::generate(&cfg.synth_config(), cfg.frames)?;
            synth::save_sequence(&out, &seq)?;
            println!("wrote {} frames to {}", seq.frames.len(), out.display());
        }
        Cmd::SmokeTrain { ckpt, data, steps, config, history } => {
            let cfg = load_config(&config)?;
            let mut model = Model::<f32>::load(&ckpt)?;
            let seq = synth::load_sequence(&data)?;
            let mcfg = model.cfg.clone();
            let batch = build_batch(&mcfg, &seq, cfg.batch, cfg.jitter, cfg.seed)?;
            let mut tc = cfg.train_config();
            if let Some(s) = steps {
                tc.steps = s;
            }
            let hist = smoke_train(&mut model, &batch, &tc)?;
            // Calibrate BatchNorm buffers at the final weights so the saved
            // checkpoint tracks in eval mode under the statistics it was
            // trained with.
            model.refresh_bn(&batch.z, &batch.x)?;
            model.save(&ckpt)?;
            if let Some(h) = &history {
                std::fs::write(h, history_csv(&hist))?;
            }
            let first = hist.first().map(|r| r.total).unwrap_or(f64::NAN);
            let last = hist.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "trained {} steps: loss {:.6} -> {:.6}, checkpoint {}",
                hist.len(),
                first,
                last,
                ckpt.display()
            );
        }
        Cmd::Track { ckpt, seq, out, config } => {
            let cfg = load_config(&config)?;
            let mut model = Model::<f32>::load(&ckpt)?;
            let sequence = synth::load_sequence(&seq)?;
            let init = sequence.record.frames[0];
            let boxes =
                track_sequence(&mut model, &sequence.frames, &init, &cfg.track_config())?;
            metrics::write_boxes_file(&out, &boxes)?;
            println!("tracked {} frames into {}", boxes.len(), out.display());
        }
        Cmd::Eval { results, gt, attrs, report } => {
            let res = metrics::read_boxes_file(&results)?;
            let gt_boxes = metrics::read_boxes_file(&gt)?;
            let name = sequence_name(&gt);
            let attributes = match &attrs {
                Some(p) => {
                    let map = metrics::parse_attributes(&std::fs::read_to_string(p)?)?;
                    map.get(&name).cloned().unwrap_or_default()
                }
                None => BTreeSet::new(),
            };
            let record = SequenceRecord { name, frames: gt_boxes, attributes };
            let pairs = [(res.as_slice(), &record)];
            let bench = metrics::evaluate_benchmark(&pairs)?;
            if let Some(r) = &report {
                std::fs::write(r, metrics::report_csv(&bench))?;
            }
            println!(
                "frames = {}, precision_at_20 = {:.4}, success_auc = {:.4}",
                bench.overall.frames_scored,
                bench.overall.precision_at_20,
                bench.overall.success_auc
            );
        }
        Cmd::Profile { variant, report } => {
            let v: Variant = variant.parse()?;
            let mut cfg = RunConfig::default();
            cfg.variant = v;
            let cost = profiler::profile(&cfg.model_config())?;
            let summary = format!(
                "CGTrack-{}: {} params, {} MACs",
                v,
                cost.total_params(),
                cost.total_macs()
            );
            if let Some(r) = &report {
                std::fs::write(r, cost.csv())?;
                println!("{}", summary);
            } else {
                // The row listing is long; tolerate a downstream reader
                // (`head`, a pager) closing stdout early instead of
                // panicking mid-write.
                use std::io::Write as _;
                let mut out = std::io::stdout().lock();
                let done = out
                    .write_all(cost.csv().as_bytes())
                    .and_then(|()| writeln!(out, "{}", summary));
                if let Err(e) = done {
                    if e.kind() != std::io::ErrorKind::BrokenPipe {
                        return Err(e.into());
                    }
                }
            }
        }
        Cmd::Gradcheck { scope } => {
            let scopes = gradcheck::parse_scopes(&scope)?;
            let mut failures = 0usize;
            for s in scopes {
                let outcomes = gradcheck::run_scope(s)?;
                let worst = outcomes.iter().map(|o| o.max_rel).fold(0.0f64, f64::max);
                let failed: Vec<&str> = outcomes
                    .iter()
                    .filter(|o| !o.passed())
                    .map(|o| o.group.as_str())
                    .collect();
                failures += failed.len();
                println!(
                    "{}: {} groups, worst rel err {:.3e} -> {}",
                    s.name(),
                    outcomes.len(),
                    worst,
                    if failed.is_empty() { "pass" } else { "FAIL" }
                );
                for g in failed {
                    println!("  failed group: {}", g);
                }
            }
            if failures > 0 {
                return Err(cgtrack_core::Error::Usage(format!(
                    "{} gradient group(s) exceeded tolerance {}",
                    failures,
                    gradcheck::FD_TOLERANCE
                )));
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
