//! Command-line front end: `generate`, `train`, `eval`, `gradcheck` and
//! `ablate`.
//!
//! Every subcommand writes the resolved configuration to `<out>/config.json`
//! and tags its JSON reports with the configuration hash. Exit codes: 0 on
//! success, 1 for usage and validation errors (and a failing gradient
//! check), 2 for runtime or numerical failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfiguration;
use crate::error::{Error, Result};
use crate::geometry::{read_lane_file, AnchorSet};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, DEFAULT_SAMPLES};
use crate::metrics::write_metrics_csv;
use crate::model::{evaluate_model, scene_id, score_scene, EvalSummary};
use crate::synth::{
    generate_split, lane_file_name, read_scenes, scene_dir_name, write_scene, SceneSequence, Split,
};
use crate::train::{ablation_ladder, run_ablation, train, write_history_csv, ABLATION_NESTING};

#[derive(Debug, Parser)]
#[command(name = "lanefuse", version, about = "Anchor-based 3D lane detection with temporal fusion on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides layered over the configuration file (flag > file > default).
#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Matching distance threshold in meters.
    #[arg(long)]
    threshold: Option<f64>,
    /// Fraction of visible ground-truth stations that must be close.
    #[arg(long)]
    coverage: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train and eval scene splits as lane files plus feature sidecars.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint and per-epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of scene_XXXX folders; generated from the config when absent.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Score a checkpoint, or a directory of predicted lane files, against scenes.
    #[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "predictions"])))]
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of scene_XXXX folders with frame_NN.lanes.json predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Directory of scene_XXXX folders; the eval split is generated when absent.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Finite-difference check of every loss, the LSTM and the heads.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train and evaluate the five nested ablation configurations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn resolve(&self) -> Result<(RunConfiguration, AnchorSet)> {
        let mut c = match &self.config {
            Some(p) => RunConfiguration::load(p)?,
            None => RunConfiguration::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(t) = self.threshold {
            c.eval.threshold = t;
        }
        if let Some(v) = self.coverage {
            c.eval.coverage = v;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
            // Keep the ramp inside a shortened budget.
            c.train.escop.ramp_end = c.train.escop.ramp_end.min(e);
            c.train.escop.ramp_start = c.train.escop.ramp_start.min(c.train.escop.ramp_end);
        }
        let anchors = c.validate()?;
        std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
        c.save(&c.out.join("config.json"))?;
        Ok((c, anchors))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn split_scenes(c: &RunConfiguration, anchors: &AnchorSet, split: Split) -> Result<Vec<SceneSequence>> {
    let n = match split {
        Split::Train => c.dataset.train_scenes,
        Split::Eval => c.dataset.eval_scenes,
    };
    generate_split(c.seed, split, n, &c.scene, anchors)
}

fn load_or_generate(
    dir: &Option<PathBuf>,
    c: &RunConfiguration,
    anchors: &AnchorSet,
    split: Split,
) -> Result<Vec<SceneSequence>> {
    match dir {
        Some(d) => read_scenes(d),
        None => split_scenes(c, anchors, split),
    }
}

fn cmd_generate(common: &Common) -> Result<i32> {
    let (c, anchors) = common.resolve()?;
    let mut counts = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Eval, "eval")] {
        let scenes = split_scenes(&c, &anchors, split)?;
        let root = c.out.join(name);
        for (i, s) in scenes.iter().enumerate() {
            write_scene(&root.join(scene_dir_name(i)), s)?;
        }
        counts.push(scenes.len());
    }
    println!(
        "generated {} train + {} eval scenes in {} (config {})",
        counts[0],
        counts[1],
        c.out.display(),
        c.hash()
    );
    Ok(0)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    config_hash: String,
    epochs: usize,
    flags: crate::train::AblationFlags,
    final_epoch: Option<&'a crate::train::EpochMetrics>,
}

fn cmd_train(common: &Common, scenes: &Option<PathBuf>) -> Result<i32> {
    let (c, anchors) = common.resolve()?;
    let data = load_or_generate(scenes, &c, &anchors, Split::Train)?;
    let outcome = train(&c.train_setup(&anchors), &data)?;
    let last = outcome.history.last().cloned();
    Checkpoint::new(outcome.model, c.hash(), c.train.epochs, last.clone())
        .save(&c.out.join("checkpoint.bin"))?;
    write_history_csv(&c.out.join("train_log.csv"), &outcome.history)?;
    write_json(
        &c.out.join("train_report.json"),
        &TrainReport {
            config_hash: c.hash(),
            epochs: c.train.epochs,
            flags: c.train.ablation,
            final_epoch: last.as_ref(),
        },
    )?;
    match &last {
        Some(m) => println!(
            "trained {} epochs on {} scenes: total {:.6}, regression {:.6} (config {})",
            c.train.epochs,
            data.len(),
            m.total,
            m.regression,
            c.hash()
        ),
        None => println!("trained 0 epochs (config {})", c.hash()),
    }
    Ok(0)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config_hash: String,
    source: String,
    threshold: f64,
    coverage: f64,
    #[serde(flatten)]
    summary: &'a EvalSummary,
}

fn predictions_summary(
    dir: &Path,
    scenes: &[SceneSequence],
    c: &RunConfiguration,
) -> Result<EvalSummary> {
    let first = c.scene.clip_len.saturating_sub(1);
    let rows = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sd = dir.join(scene_dir_name(i));
            let preds = (first..s.len())
                .map(|t| read_lane_file(&sd.join(lane_file_name(t))))
                .collect::<Result<Vec<_>>>()?;
            score_scene(scene_id(i), s, &preds, c.scene.clip_len, &c.eval)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_rows(rows))
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    predictions: &Option<PathBuf>,
    scenes: &Option<PathBuf>,
) -> Result<i32> {
    let (c, anchors) = common.resolve()?;
    let data = load_or_generate(scenes, &c, &anchors, Split::Eval)?;
    let (summary, source) = match (checkpoint, predictions) {
        (Some(p), _) => {
            let ck = Checkpoint::load(p)?;
            let s = evaluate_model(&ck.model, &anchors, &data, c.scene.clip_len, &c.eval)?;
            (s, format!("checkpoint {}", p.display()))
        }
        (None, Some(d)) => (predictions_summary(d, &data, &c)?, format!("predictions {}", d.display())),
        (None, None) => unreachable!("clap requires one source"),
    };
    write_metrics_csv(&c.out.join("eval_metrics.csv"), &summary.scenes, &summary.overall)?;
    write_json(
        &c.out.join("eval_report.json"),
        &EvalReport {
            config_hash: c.hash(),
            source,
            threshold: c.eval.threshold,
            coverage: c.eval.coverage,
            summary: &summary,
        },
    )?;
    let o = &summary.overall;
    println!(
        "{} scenes: precision {:.4} recall {:.4} F1 {:.4} Acc {:.4} jitter {}",
        summary.scenes.len(),
        o.report.precision,
        o.report.recall,
        o.report.f1,
        o.report.accuracy,
        o.jitter.map_or("n/a".to_string(), |j| format!("{j:.4}"))
    );
    Ok(0)
}

fn cmd_gradcheck(common: &Common, samples: usize, corrupt: &Option<String>) -> Result<i32> {
    let (c, _) = common.resolve()?;
    let suite = run_gradcheck(&GradcheckOptions {
        seed: c.seed,
        samples,
        corrupt: corrupt.clone(),
        ..GradcheckOptions::default()
    })?;
    for op in &suite.operations {
        println!(
            "{:<12} {:>4} samples  max rel. error {:.3e}  {}",
            op.operation,
            op.samples,
            op.max_relative_error,
            if op.passed { "ok" } else { "FAILED" }
        );
    }
    println!(
        "worst: {} ({:.3e}, threshold {:.0e})",
        suite.worst_operation, suite.worst_relative_error, suite.threshold
    );
    write_json(&c.out.join("gradcheck.json"), &suite)?;
    if suite.passed {
        Ok(0)
    } else {
        eprintln!("gradient check failed for {}", suite.worst_operation);
        Ok(1)
    }
}

#[derive(Serialize)]
struct AblationReport<'a> {
    config_hash: String,
    nesting: &'static str,
    rows: Vec<&'a crate::train::AblationRow>,
}

fn cmd_ablate(common: &Common) -> Result<i32> {
    let (c, anchors) = common.resolve()?;
    let train_scenes = split_scenes(&c, &anchors, Split::Train)?;
    let eval_scenes = split_scenes(&c, &anchors, Split::Eval)?;
    let results = run_ablation(
        &c.train_setup(&anchors),
        &ablation_ladder(),
        &train_scenes,
        &eval_scenes,
        &c.eval,
    )?;
    let rows: Vec<_> = results.iter().map(|(r, _)| r).collect();
    let path = c.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["configuration", "balanced_l1", "chamfer", "uncertainty", "lstm_fusion", "F1", "Acc", "jitter"])?;
    for r in &rows {
        let f = r.flags;
        w.write_record([
            r.configuration.clone(),
            f.use_balanced_l1.to_string(),
            f.use_chamfer.to_string(),
            f.use_uncertainty.to_string(),
            f.use_lstm_fusion.to_string(),
            r.f1.to_string(),
            r.accuracy.to_string(),
            r.jitter.map_or_else(String::new, |j| j.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(
        &c.out.join("ablation.json"),
        &AblationReport {
            config_hash: c.hash(),
            nesting: ABLATION_NESTING,
            rows: rows.clone(),
        },
    )?;
    println!("# {ABLATION_NESTING} (config {})", c.hash());
    println!("{:<14} {:>8} {:>8} {:>8}", "configuration", "F1", "Acc", "jitter");
    for r in &rows {
        println!(
            "{:<14} {:>8.4} {:>8.4} {:>8}",
            r.configuration,
            r.f1,
            r.accuracy,
            r.jitter.map_or("n/a".to_string(), |j| format!("{j:.4}"))
        );
    }
    Ok(0)
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started = Instant::now();
    let (name, result) = match &cli.command {
        Command::Generate { common } => ("generate", cmd_generate(common)),
        Command::Train { common, scenes } => ("train", cmd_train(common, scenes)),
        Command::Eval {
            common,
            checkpoint,
            predictions,
            scenes,
        } => ("eval", cmd_eval(common, checkpoint, predictions, scenes)),
        Command::Gradcheck {
            common,
            samples,
            corrupt,
        } => ("gradcheck", cmd_gradcheck(common, *samples, corrupt)),
        Command::Ablate { common } => ("ablate", cmd_ablate(common)),
    };
    match result {
        Ok(code) => {
            eprintln!("lanefuse {name}: done in {:.1}s", started.elapsed().as_secs_f64());
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
