//! `hvq`: train, segment, evaluate and ablate hierarchical vector
//! quantization models for unsupervised temporal action segmentation.

mod output;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use hvq_core::data::{
    list_activities, load_checkpoint, load_label_tokens, save_checkpoint, synth_generate, write_atomic, write_labels,
    write_synthetic, Checkpoint, LabelMap, SyntheticSpec,
};
use hvq_core::decode::DecoderKind;
use hvq_core::metrics::{evaluate, histogram_csv, ActivityPredictions, EvalOptions, DEFAULT_BIN_WIDTH};
use hvq_core::pipeline::{ablation_csv, load_activities, run_ablation, segment_activity, AblationAxis, RunConfig};
use hvq_core::training::{train_activity, ProgressToStderr};
use hvq_core::{HvqError, Result};
use serde::{Deserialize, Serialize};

use output::Staging;

/// Environment variable holding the seed used when neither a flag nor the
/// configuration file sets one.
const SEED_ENV: &str = "HVQ_SEED";

#[derive(Parser, Debug)]
#[command(name = "hvq", version, about = "Hierarchical vector quantization for temporal action segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset with action and subaction ground truth.
    Synth {
        /// JSON synthetic specification; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Dataset root to write into.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per activity.
    Train {
        /// Dataset root containing `<activity>/features/`.
        #[arg(long)]
        data: PathBuf,
        /// Activity name, or `all`.
        #[arg(long, default_value = "all")]
        activity: String,
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file for one activity; a directory of `<activity>.hvqc`
        /// files for `all`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of activities trained concurrently in separate processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Segment the videos of a checkpoint's activity.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root containing the checkpoint's activity.
        #[arg(long)]
        data: PathBuf,
        /// Overrides the decoder stored in the checkpoint.
        #[arg(long, value_enum)]
        decoder: Option<DecoderArg>,
        /// Directory receiving `<video>.txt` files and `decoding.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label files against ground truth.
    Eval {
        /// Directory of `<video>.txt` predictions, or of one such directory
        /// per activity.
        #[arg(long)]
        pred: PathBuf,
        /// Matching ground-truth directory (per activity, `<gt>/<activity>/labels`
        /// or `<gt>/<activity>`).
        #[arg(long)]
        gt: PathBuf,
        /// Ground-truth token treated as background.
        #[arg(long)]
        background_label: Option<String>,
        /// Metrics document to write.
        #[arg(long)]
        out: PathBuf,
        /// Directory receiving one segment-length histogram CSV per video.
        #[arg(long)]
        hist_out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
        bin_width: usize,
    },
    /// Sweep one hyperparameter axis and write a CSV of metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        activity: String,
        /// loss_terms, lambda_rec, alpha, levels, ema_decay or decoder_kind.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoderArg {
    Fifa,
    Dp,
    Argmax,
}

impl From<DecoderArg> for DecoderKind {
    fn from(d: DecoderArg) -> Self {
        match d {
            DecoderArg::Fifa => DecoderKind::Fifa,
            DecoderArg::Dp => DecoderKind::Dp,
            DecoderArg::Argmax => DecoderKind::Argmax,
        }
    }
}

/// Settings stored in a checkpoint next to the training configuration.
#[derive(Serialize, Deserialize)]
struct StoredRun {
    run: RunConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { spec, out, seed } => cmd_synth(spec.as_deref(), &out, seed),
        Cmd::Train {
            data,
            activity,
            config,
            out,
            seed,
            jobs,
        } => cmd_train(&data, &activity, config.as_deref(), &out, seed, jobs),
        Cmd::Segment {
            checkpoint,
            data,
            decoder,
            out,
        } => cmd_segment(&checkpoint, &data, decoder.map(Into::into), &out),
        Cmd::Eval {
            pred,
            gt,
            background_label,
            out,
            hist_out,
            bin_width,
        } => cmd_eval(&pred, &gt, background_label, &out, hist_out.as_deref(), bin_width),
        Cmd::Ablate {
            data,
            activity,
            axis,
            config,
            out,
            seed,
        } => cmd_ablate(&data, &activity, &axis, config.as_deref(), &out, seed),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HvqError::io(path, e))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HvqError::Usage(format!("{SEED_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: flag, then a value set in the file, then the environment,
/// then the built-in default.
fn resolve_seed(flag: Option<u64>, in_file: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag.or(in_file) {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(default))
}

fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => read_text(p)?,
        None => "{}".to_string(),
    };
    let mut cfg = RunConfig::from_json(&text).map_err(|e| match (e, path) {
        (HvqError::Config(msg), Some(p)) => HvqError::Config(format!("{}: {msg}", p.display())),
        (other, _) => other,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).expect("already parsed");
    let in_file = value.pointer("/train/seed").map(|_| cfg.train.seed);
    cfg.train.seed = resolve_seed(seed, in_file, cfg.train.seed)?;
    Ok(cfg)
}

fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = match spec_path {
        Some(p) => read_text(p)?,
        None => "{}".to_string(),
    };
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| HvqError::Config(format!("invalid synthetic spec: {e}")))?;
    let value: serde_json::Value = serde_json::from_str(&text).expect("already parsed");
    let in_file = value.get("seed").map(|_| spec.seed);
    spec.seed = resolve_seed(seed, in_file, spec.seed)?;
    let ds = synth_generate(&spec)?;
    let staging = Staging::new(out)?;
    write_synthetic(&ds, staging.path())?;
    staging.commit()?;
    println!(
        "activity={} videos={} frames={} actions={} subactions={} out={}",
        ds.activity.name,
        ds.activity.videos.len(),
        ds.activity.total_frames(),
        ds.spec.actions,
        ds.num_subactions(),
        out.display()
    );
    Ok(())
}

fn train_one(split_train: &hvq_core::data::ActivityDataset, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (state, train_config, report) = train_activity(split_train, &cfg.train, &mut ProgressToStderr)?;
    let ckpt = Checkpoint {
        activity: split_train.name.clone(),
        config: train_config,
        state,
        epochs_completed: report.epochs.len(),
        extra: serde_json::to_value(StoredRun { run: cfg.clone() }).expect("run config serializes"),
    };
    save_checkpoint(&ckpt, out)?;
    let first = report.epochs.first().map_or(f64::NAN, |e| e.mean_loss);
    let last = report.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    println!(
        "activity={} videos={} epochs={} initial_loss={first:.6} final_loss={last:.6} checkpoint={}",
        split_train.name,
        split_train.videos.len(),
        report.epochs.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    activity: &str,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    jobs: usize,
) -> Result<()> {
    if jobs == 0 {
        return Err(HvqError::Usage("--jobs must be at least 1".into()));
    }
    let cfg = load_run_config(config, seed)?;
    if activity != "all" {
        let splits = load_activities(data, activity, &cfg)?;
        return train_one(&splits[0].train, &cfg, out);
    }
    let staging = Staging::new(out)?;
    if jobs == 1 {
        for split in load_activities(data, activity, &cfg)? {
            let path = staging.path().join(format!("{}.hvqc", split.train.name));
            train_one(&split.train, &cfg, &path)?;
        }
    } else {
        let names = list_activities(data)?;
        if names.is_empty() {
            return Err(HvqError::Data(format!("no activities under {}", data.display())));
        }
        train_in_processes(data, &names, config, cfg.train.seed, staging.path(), jobs)?;
    }
    staging.commit()
}

/// Trains each activity in a child `hvq train` process, at most `jobs` at a time.
fn train_in_processes(
    data: &Path,
    names: &[String],
    config: Option<&Path>,
    seed: u64,
    dir: &Path,
    jobs: usize,
) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| HvqError::io("current executable", e))?;
    let mut failures = Vec::new();
    for chunk in names.chunks(jobs) {
        let mut children = Vec::new();
        for name in chunk {
            let mut cmd = Command::new(&exe);
            cmd.arg("train")
                .arg("--data")
                .arg(data)
                .arg("--activity")
                .arg(name)
                .arg("--out")
                .arg(dir.join(format!("{name}.hvqc")))
                .arg("--seed")
                .arg(seed.to_string());
            if let Some(c) = config {
                cmd.arg("--config").arg(c);
            }
            let child = cmd.spawn().map_err(|e| HvqError::io(&exe, e))?;
            children.push((name, child));
        }
        for (name, mut child) in children {
            let status = child.wait().map_err(|e| HvqError::io(&exe, e))?;
            if !status.success() {
                failures.push(format!("{name} (exit {})", status.code().unwrap_or(-1)));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(HvqError::Data(format!("training failed for {}", failures.join(", "))))
    }
}

fn cmd_segment(checkpoint: &Path, data: &Path, decoder: Option<DecoderKind>, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = match serde_json::from_value::<StoredRun>(ckpt.extra.clone()) {
        Ok(stored) => stored.run,
        Err(_) => RunConfig::default(),
    };
    if let Some(d) = decoder {
        cfg.decode.decoder = d;
    }
    cfg.train.hvq.k = ckpt.config.hvq.k;
    let splits = load_activities(data, &ckpt.activity, &cfg)?;
    let split = &splits[0];
    let expected = ckpt.config.tcn.input_dim;
    if split.train.feature_dim() != expected {
        return Err(HvqError::Data(format!(
            "checkpoint {} expects {expected}-dim features but activity {} has {}",
            checkpoint.display(),
            ckpt.activity,
            split.train.feature_dim()
        )));
    }
    let (decoding, segs) = segment_activity(&ckpt.state, &split.train, split.eval_set(), &cfg.decode)?;
    let staging = Staging::new(out)?;
    for (video, labels) in split.eval_set().videos.iter().zip(&segs) {
        write_labels(&staging.path().join(format!("{}.txt", video.id)), labels)?;
    }
    let sidecar = serde_json::json!({
        "activity": ckpt.activity,
        "decoder": cfg.decode.decoder,
        "order": decoding.order.clusters,
        "prior": decoding.prior.fractions,
    });
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&staging.path().join("decoding.json"), text.as_bytes())?;
    staging.commit()?;
    println!(
        "activity={} videos={} decoder={} out={}",
        ckpt.activity,
        segs.len(),
        serde_json::to_value(cfg.decode.decoder).expect("decoder serializes").as_str().unwrap_or("?"),
        out.display()
    );
    Ok(())
}

fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| HvqError::io(dir, e))? {
        let path = entry.map_err(|e| HvqError::io(dir, e))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some("txt") {
            let id = path.file_stem().expect("file has a stem").to_string_lossy().into_owned();
            files.insert(id, path);
        }
    }
    Ok(files)
}

/// `(activity, prediction dir, ground-truth dir)` for every activity under `pred`.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !pred.is_dir() {
        return Err(HvqError::Data(format!("prediction directory {} not found", pred.display())));
    }
    if !label_files(pred)?.is_empty() {
        let name = pred
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "activity".into());
        return Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut pairs = Vec::new();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(pred)
        .map_err(|e| HvqError::io(pred, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for dir in subdirs {
        let name = dir.file_name().expect("directory has a name").to_string_lossy().into_owned();
        let nested = gt.join(&name).join("labels");
        let gt_dir = if nested.is_dir() { nested } else { gt.join(&name) };
        pairs.push((name, dir, gt_dir));
    }
    if pairs.is_empty() {
        return Err(HvqError::Data(format!("no prediction files under {}", pred.display())));
    }
    Ok(pairs)
}

fn load_predictions(
    name: &str,
    pred_dir: &Path,
    gt_dir: &Path,
    background: Option<&str>,
) -> Result<ActivityPredictions> {
    if !gt_dir.is_dir() {
        return Err(HvqError::Data(format!(
            "activity {name}: ground-truth directory {} not found",
            gt_dir.display()
        )));
    }
    let preds = label_files(pred_dir)?;
    let gts = label_files(gt_dir)?;
    let pred_ids: BTreeSet<&String> = preds.keys().collect();
    let gt_ids: BTreeSet<&String> = gts.keys().collect();
    if let Some(id) = pred_ids.symmetric_difference(&gt_ids).next() {
        let side = if preds.contains_key(*id) { "ground truth" } else { "prediction" };
        return Err(HvqError::Data(format!("activity {name}: video {id} has no {side} file")));
    }
    let mut pred_tokens = Vec::new();
    let mut gt_tokens = Vec::new();
    for (id, path) in &preds {
        let p = load_label_tokens(path)?;
        let g = load_label_tokens(&gts[id])?;
        if p.len() != g.len() {
            return Err(HvqError::Data(format!(
                "activity {name}: video {id} has {} predicted and {} ground-truth frames",
                p.len(),
                g.len()
            )));
        }
        pred_tokens.push(p);
        gt_tokens.push(g);
    }
    let pred_map = LabelMap::from_tokens(pred_tokens.iter().flatten().map(String::as_str), None);
    let gt_map = LabelMap::from_tokens(gt_tokens.iter().flatten().map(String::as_str), background);
    let index = |map: &LabelMap, tracks: &[Vec<String>]| -> Vec<Vec<usize>> {
        tracks
            .iter()
            .map(|t| t.iter().map(|tok| map.get(tok).expect("token seen")).collect())
            .collect()
    };
    Ok(ActivityPredictions {
        name: name.to_string(),
        video_ids: preds.keys().cloned().collect(),
        pred: index(&pred_map, &pred_tokens),
        gt: index(&gt_map, &gt_tokens),
        background: gt_map.background(),
    })
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    background: Option<String>,
    out: &Path,
    hist_out: Option<&Path>,
    bin_width: usize,
) -> Result<()> {
    if bin_width == 0 {
        return Err(HvqError::Usage("--bin-width must be at least 1".into()));
    }
    let activities = eval_pairs(pred, gt)?
        .iter()
        .map(|(name, p, g)| load_predictions(name, p, g, background.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let options = EvalOptions {
        bin_width,
        report_jsd: background.is_none(),
    };
    let report = evaluate(&activities, &options)?;
    if let Some(dir) = hist_out {
        let staging = Staging::new(dir)?;
        for act in &activities {
            for ((id, p), g) in act.video_ids.iter().zip(&act.pred).zip(&act.gt) {
                let csv = histogram_csv(p, g, bin_width)?;
                write_atomic(&staging.path().join(&act.name).join(format!("{id}.csv")), csv.as_bytes())?;
            }
        }
        staging.commit()?;
    }
    let doc = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    write_atomic(out, doc.as_bytes())?;
    let a = &report.macro_avg;
    let jsd = a.jsd.map(|j| format!(" jsd={:.2}", j * 100.0)).unwrap_or_default();
    println!(
        "activities={} mof={:.2} precision={:.2} recall={:.2} f1={:.2}{jsd}",
        activities.len(),
        a.mof * 100.0,
        a.precision * 100.0,
        a.recall * 100.0,
        a.f1 * 100.0
    );
    Ok(())
}

fn cmd_ablate(
    data: &Path,
    activity: &str,
    axis: &str,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let axis = AblationAxis::parse(axis)?;
    let cfg = load_run_config(config, seed)?;
    let splits = load_activities(data, activity, &cfg)?;
    let rows = run_ablation(axis, &splits, &cfg, &mut ProgressToStderr)?;
    write_atomic(out, ablation_csv(&rows).as_bytes())?;
    println!("axis={} settings={} out={}", axis.name(), rows.len(), out.display());
    Ok(())
}
