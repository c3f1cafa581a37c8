//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or runtime error, 3 failed
//! gradient check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::Serialize;

use crate::dataio::{load_dataset, save_dataset, split_dataset, synth_generate, MultiViewFrame, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{per_joint_report, JointCell};
use crate::gradcheck::{gradcheck, TOLERANCE};
use crate::model::Model;
use crate::skeleton::joint_name;
use crate::trainer::{train, Mode, TrainConfig, TrainHooks};
use crate::triangulate::triangulate_pose;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Train/validation/test proportions used by `train` and `eval --split`.
pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Parser, Debug)]
#[command(name = "mvlift", version, about = "Multi-view weakly-supervised 2D-to-3D pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-camera dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        cams: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_px: f64,
        #[arg(long, default_value_t = 0.0)]
        drop_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per sequence; sequences are the unit of splitting.
        #[arg(long, default_value_t = 50)]
        frames_per_sequence: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill `gt3d` by triangulating the detections.
    Triangulate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-joint RMS re-projection residual report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a lifting model.
    Train {
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        #[arg(long)]
        data: PathBuf,
        /// JSON object with `TrainConfig` fields; omitted fields keep defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Per-joint MPJPE of a model against the dataset's `gt3d`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate only one part of the split used by `train`.
        #[arg(long, value_enum, default_value_t = SplitPart::All)]
        split: SplitPart,
        /// Also print an aligned text table.
        #[arg(long)]
        table: bool,
    },
    /// Finite-difference check of the network and loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliMode {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitPart {
    All,
    Train,
    Val,
    Test,
}

/// Runs the command line `argv` (including the program name) and returns the
/// process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            frames,
            cams,
            noise_px,
            drop_prob,
            seed,
            frames_per_sequence,
            out,
        } => {
            let cfg = SynthConfig {
                frames,
                cameras: cams,
                noise_px,
                drop_prob,
                seed,
                frames_per_sequence,
                ..SynthConfig::default()
            };
            let data = synth_generate(&cfg)?;
            save_dataset(&out, &data)?;
            println!("wrote {} frames to {}", data.len(), out.display());
        }
        Command::Triangulate { data, out, report } => {
            let mut frames = load_dataset(&data)?;
            let summary = triangulate_frames(&mut frames);
            save_dataset(&out, &frames)?;
            println!(
                "triangulated {}/{} frames into {}",
                frames.len() - summary.failed_frames,
                frames.len(),
                out.display()
            );
            if let Some(path) = report {
                write_json(&path, &summary)?;
            }
        }
        Command::Train {
            mode,
            data,
            config,
            out,
            history,
        } => {
            let mut cfg: TrainConfig = match &config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = match m {
                    CliMode::Weak => Mode::Weak,
                    CliMode::Strong => Mode::Strong,
                };
            }
            let frames = load_dataset(&data)?;
            let (tr, va, _) = split_dataset(&frames, SPLIT_RATIOS)?.select(&frames);
            let outcome = train::<f64>(&tr, &va, &cfg, &mut TrainHooks::default())?;
            outcome.model.save(&out)?;
            if let Some(path) = history {
                outcome.history.save_csv(path)?;
            }
            println!(
                "trained {} epochs; best epoch {} with validation metric {}",
                outcome.history.records.len(),
                outcome.model.best_epoch.map_or("-".into(), |e| e.to_string()),
                outcome.model.val_metric.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        Command::Eval {
            model,
            data,
            report,
            split,
            table,
        } => {
            let m = Model::<f64>::load(&model)?;
            let frames = load_dataset(&data)?;
            let frames = select_part(frames, split)?;
            let mut rep = per_joint_report(&m, &frames)?;
            rep.meta.model = Some(model.display().to_string());
            rep.meta.data = Some(data.display().to_string());
            rep.save(&report)?;
            if table {
                print!("{}", rep.table());
            } else {
                println!("MPJPE {:.3} mm over {} samples", rep.avg_mm, rep.n_samples);
            }
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck(seed)?;
            for c in &report.cases {
                println!("{:<26} max rel. err {:.3e} over {} parameters", c.name, c.max_rel_error, c.checked);
            }
            println!("max rel. err {:.3e} (tolerance {TOLERANCE:e})", report.max_rel_error());
            if !report.passed() {
                return Ok(EXIT_GRADCHECK);
            }
        }
    }
    Ok(EXIT_OK)
}

fn select_part(frames: Vec<MultiViewFrame<f64>>, part: SplitPart) -> Result<Vec<MultiViewFrame<f64>>> {
    if part == SplitPart::All {
        return Ok(frames);
    }
    let (tr, va, te) = split_dataset(&frames, SPLIT_RATIOS)?.select(&frames);
    Ok(match part {
        SplitPart::Train => tr,
        SplitPart::Val => va,
        _ => te,
    })
}

/// Per-joint RMS re-projection residuals of a triangulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub frames: usize,
    pub failed_frames: usize,
    /// Mean over frames of each joint's RMS pixel residual, `"-"` when the
    /// joint was never reconstructed.
    pub per_joint_rms_px: IndexMap<String, JointCell>,
    pub reconstructed: IndexMap<String, usize>,
}

/// Replaces every frame's `gt3d` with its triangulation; frames that cannot
/// be reconstructed lose their `gt3d`.
pub fn triangulate_frames(frames: &mut [MultiViewFrame<f64>]) -> ResidualReport {
    let nj = frames.first().map_or(0, MultiViewFrame::num_joints);
    let mut sums = vec![0.0; nj];
    let mut counts = vec![0usize; nj];
    let mut failed = 0;
    for f in frames.iter_mut() {
        match triangulate_pose(f) {
            Ok(rec) => {
                for (j, r) in rec.rms_residuals().into_iter().enumerate() {
                    if let Some(r) = r {
                        sums[j] += r;
                        counts[j] += 1;
                    }
                }
                f.gt3d = Some(rec.pose);
            }
            Err(_) => {
                failed += 1;
                f.gt3d = None;
            }
        }
    }
    ResidualReport {
        frames: frames.len(),
        failed_frames: failed,
        per_joint_rms_px: (0..nj)
            .map(|j| {
                let cell = if counts[j] == 0 {
                    JointCell::DASH
                } else {
                    JointCell::Value(sums[j] / counts[j] as f64)
                };
                (joint_name(j, nj), cell)
            })
            .collect(),
        reconstructed: (0..nj).map(|j| (joint_name(j, nj), counts[j])).collect(),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
