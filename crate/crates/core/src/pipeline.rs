//! End-to-end runs: one JSON run configuration, training followed by
//! decoding and evaluation, and the ablation grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{group_dataset, list_activities, ActivityDataset, GroupOptions, Protocol, SplitDataset};
use crate::decode::{fit_decoding, segment_video, ActivityDecoding, DecodeConfig, DecoderKind};
use crate::error::{HvqError, Result};
use crate::metrics::{evaluate, ActivityPredictions, EvalOptions, MetricsReport};
use crate::numerics::SeqTensor;
use crate::tcn::DecoderKind as NetworkDecoder;
use crate::training::{train_activity, HvqModel, LossTerms, TrainConfig, TrainObserver, TrainReport};

/// Every tunable setting of a run. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalOptions,
    pub protocol: ProtocolConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub split: Protocol,
    /// Seed of the 80/20 partition.
    pub split_seed: u64,
    /// Ground-truth token excluded from evaluation.
    pub background: Option<String>,
    pub label_dir: String,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            split: Protocol::Full,
            split_seed: 0,
            background: None,
            label_dir: "labels".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        // k = 0 and input_dim = 0 mean "take it from the dataset"
        let mut train = self.train.clone();
        train.hvq.k = train.hvq.k.max(1);
        train.tcn.input_dim = train.tcn.input_dim.max(1);
        train.validate()?;
        self.decode.validate()?;
        if self.eval.bin_width == 0 {
            return Err(HvqError::Config("eval.bin_width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| HvqError::Config(format!("invalid run configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HvqError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            HvqError::Config(msg) => HvqError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Trained state plus the segmentations of the evaluated videos.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: HvqModel,
    /// Training configuration with dataset-derived fields filled in.
    pub train_config: TrainConfig,
    pub report: TrainReport,
    pub decoding: ActivityDecoding,
    pub segmentations: Vec<Vec<usize>>,
}

/// Order and prior from `fit_on`, then one segmentation per video of `videos`.
pub fn segment_activity(
    state: &HvqModel,
    fit_on: &ActivityDataset,
    videos: &ActivityDataset,
    decode: &DecodeConfig,
) -> Result<(ActivityDecoding, Vec<Vec<usize>>)> {
    let frames: Vec<&SeqTensor> = fit_on.videos.iter().map(|v| &v.frames).collect();
    let decoding = fit_decoding(state, &frames)?;
    let segs = videos
        .videos
        .iter()
        .map(|v| segment_video(state, v, &decoding, decode))
        .collect::<Result<Vec<_>>>()?;
    Ok((decoding, segs))
}

/// Trains on `train_set` and segments `eval_set`.
pub fn train_and_segment<O: TrainObserver>(
    train_set: &ActivityDataset,
    eval_set: &ActivityDataset,
    config: &RunConfig,
    observer: &mut O,
) -> Result<RunOutput> {
    config.validate()?;
    let (state, train_config, report) = train_activity(train_set, &config.train, observer)?;
    let (decoding, segmentations) = segment_activity(&state, train_set, eval_set, &config.decode)?;
    Ok(RunOutput {
        state,
        train_config,
        report,
        decoding,
        segmentations,
    })
}

/// Pairs segmentations with the dataset's ground truth.
pub fn predictions_for(dataset: &ActivityDataset, segmentations: Vec<Vec<usize>>) -> Result<ActivityPredictions> {
    let gt = dataset
        .labels
        .clone()
        .ok_or_else(|| HvqError::Data(format!("activity {} has no ground-truth labels", dataset.name)))?;
    Ok(ActivityPredictions {
        name: dataset.name.clone(),
        video_ids: dataset.videos.iter().map(|v| v.id.clone()).collect(),
        pred: segmentations,
        gt,
        background: dataset.background,
    })
}

/// Trains, segments and evaluates one activity.
pub fn run_experiment<O: TrainObserver>(
    train_set: &ActivityDataset,
    eval_set: &ActivityDataset,
    config: &RunConfig,
    observer: &mut O,
) -> Result<(RunOutput, MetricsReport)> {
    let out = train_and_segment(train_set, eval_set, config, observer)?;
    let preds = predictions_for(eval_set, out.segmentations.clone())?;
    let report = evaluate(&[preds], &config.eval)?;
    Ok((out, report))
}

/// Hyperparameter axes with their sweep grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    LossTerms,
    LambdaRec,
    Alpha,
    Levels,
    EmaDecay,
    DecoderKind,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::LossTerms,
        AblationAxis::LambdaRec,
        AblationAxis::Alpha,
        AblationAxis::Levels,
        AblationAxis::EmaDecay,
        AblationAxis::DecoderKind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::LossTerms => "loss_terms",
            AblationAxis::LambdaRec => "lambda_rec",
            AblationAxis::Alpha => "alpha",
            AblationAxis::Levels => "levels",
            AblationAxis::EmaDecay => "ema_decay",
            AblationAxis::DecoderKind => "decoder_kind",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            HvqError::Usage(format!("unknown ablation axis {name:?}; expected one of {}", known.join(", ")))
        })
    }

    /// `(row label, configuration)` for every grid point, derived from `base`.
    pub fn grid(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::LossTerms => {
                let rows = [
                    ("rec", true, false, false),
                    ("rec+commit_z", true, true, false),
                    ("rec+commit_q", true, false, true),
                    ("commit_z+commit_q", false, true, true),
                    ("rec+commit_z+commit_q", true, true, true),
                ];
                rows.iter()
                    .map(|&(label, rec, commit_z, commit_q)| {
                        let cfg = with(&|c| {
                            c.train.loss_terms = LossTerms { rec, commit_z, commit_q };
                        });
                        (label.to_string(), cfg)
                    })
                    .collect()
            }
            AblationAxis::LambdaRec => [0.0005, 0.001, 0.002, 0.005, 0.01]
                .iter()
                .map(|&v| (v.to_string(), with(&|c| c.train.lambda_rec = v)))
                .collect(),
            AblationAxis::Alpha => (1..=4)
                .map(|a| {
                    let cfg = with(&|c| {
                        c.train.hvq.alpha = a;
                        c.train.hvq.level_alphas = None;
                    });
                    (a.to_string(), cfg)
                })
                .collect(),
            AblationAxis::Levels => [(1, "Single"), (2, "Double"), (3, "Triple")]
                .iter()
                .map(|&(l, label)| {
                    let cfg = with(&|c| {
                        c.train.hvq.levels = l;
                        c.train.hvq.level_alphas = None;
                    });
                    (label.to_string(), cfg)
                })
                .collect(),
            AblationAxis::EmaDecay => [0.7, 0.75, 0.8, 0.85, 0.9]
                .iter()
                .map(|&b| (b.to_string(), with(&|c| c.train.hvq.ema_decay = b)))
                .collect(),
            AblationAxis::DecoderKind => [(NetworkDecoder::Mlp, "mlp"), (NetworkDecoder::Tcn, "tcn")]
                .iter()
                .map(|&(kind, label)| (label.to_string(), with(&|c| c.train.tcn.decoder_kind = kind)))
                .collect(),
        }
    }
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub setting: String,
    pub report: MetricsReport,
}

/// CSV with one row per setting; scores ×100.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,setting,mof,precision,recall,f1,jsd\n");
    for r in rows {
        let a = &r.report.macro_avg;
        let jsd = a.jsd.map(|j| format!("{:.4}", j * 100.0)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
            r.axis.name(),
            r.setting,
            a.mof * 100.0,
            a.precision * 100.0,
            a.recall * 100.0,
            a.f1 * 100.0,
            jsd
        ));
    }
    out
}

/// Runs every grid point of `axis`, training and evaluating each activity
/// separately and aggregating the metrics over all of them.
pub fn run_ablation<O: TrainObserver>(
    axis: AblationAxis,
    activities: &[SplitDataset],
    base: &RunConfig,
    observer: &mut O,
) -> Result<Vec<AblationRow>> {
    axis.grid(base)
        .into_iter()
        .map(|(setting, cfg)| {
            let report = evaluate_activities(activities, &cfg, observer)?;
            Ok(AblationRow { axis, setting, report })
        })
        .collect()
}

/// Trains and segments every activity with `config`, then evaluates them together.
pub fn evaluate_activities<O: TrainObserver>(
    activities: &[SplitDataset],
    config: &RunConfig,
    observer: &mut O,
) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(activities.len());
    for split in activities {
        let out = train_and_segment(&split.train, split.eval_set(), config, observer)?;
        preds.push(predictions_for(split.eval_set(), out.segmentations)?);
    }
    evaluate(&preds, &config.eval)
}

/// Loads `activity` (or every activity when it is `all`) from a dataset root
/// under the configured protocol.
pub fn load_activities(root: &Path, activity: &str, config: &RunConfig) -> Result<Vec<SplitDataset>> {
    let names = if activity == "all" {
        let names = list_activities(root)?;
        if names.is_empty() {
            return Err(HvqError::Data(format!("no activities under {}", root.display())));
        }
        names
    } else {
        if !root.join(activity).join("features").is_dir() {
            return Err(HvqError::Data(format!("activity {activity} not found under {}", root.display())));
        }
        vec![activity.to_string()]
    };
    let options = GroupOptions {
        protocol: config.protocol.split,
        seed: config.protocol.split_seed,
        background: config.protocol.background.clone(),
        label_dir: config.protocol.label_dir.clone(),
        k_override: (config.train.hvq.k > 0).then_some(config.train.hvq.k),
    };
    names.iter().map(|name| group_dataset(root, name, &options)).collect()
}

/// Returns `config` with the decoder replaced.
pub fn with_decoder(config: &RunConfig, decoder: DecoderKind) -> RunConfig {
    let mut c = config.clone();
    c.decode.decoder = decoder;
    c
}
