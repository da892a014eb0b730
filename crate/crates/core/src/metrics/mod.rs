//! Evaluation protocol: activity-level Hungarian matching of predicted
//! clusters to ground-truth classes, mean over frames, segment-level
//! precision/recall/F1 and the segment-length Jensen-Shannon distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{HvqError, Result};

/// Default histogram bin width in frames.
pub const DEFAULT_BIN_WIDTH: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub len: usize,
}

/// Maximal constant runs, in order.
pub fn extract_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.len += 1,
            _ => out.push(Segment { label: l, start: t, len: 1 }),
        }
    }
    out
}

/// Maximum-weight assignment of rows to columns on the zero-padded square
/// matrix. `result[r]` is the column matched to row `r`, or `None` when the
/// row landed on padding.
pub fn hungarian_max(weights: &Array2<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = weights.dim();
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let top = weights.iter().copied().fold(0.0f64, f64::max);
    // minimize top − w; padded cells cost `top` (weight 0)
    let cost = |i: usize, j: usize| {
        if i < rows && j < cols {
            top - weights[[i, j]]
        } else {
            top
        }
    };
    // potentials formulation, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            result[i - 1] = Some(j - 1);
        }
    }
    result
}

/// Predictions and ground truth for every video of one activity.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityPredictions {
    pub name: String,
    pub video_ids: Vec<String>,
    pub pred: Vec<Vec<usize>>,
    pub gt: Vec<Vec<usize>>,
    /// Ground-truth class excluded from matching, MoF and F1.
    pub background: Option<usize>,
}

impl ActivityPredictions {
    fn validate(&self) -> Result<()> {
        if self.pred.len() != self.gt.len() || self.video_ids.len() != self.gt.len() {
            return Err(HvqError::Data(format!(
                "activity {}: {} predictions, {} ground truths, {} ids",
                self.name,
                self.pred.len(),
                self.gt.len(),
                self.video_ids.len()
            )));
        }
        if self.gt.is_empty() {
            return Err(HvqError::Data(format!("activity {} has no videos", self.name)));
        }
        for ((id, p), g) in self.video_ids.iter().zip(&self.pred).zip(&self.gt) {
            if p.len() != g.len() {
                return Err(HvqError::Data(format!(
                    "activity {}, video {id}: {} predicted frames vs {} ground-truth frames",
                    self.name,
                    p.len(),
                    g.len()
                )));
            }
            if g.is_empty() {
                return Err(HvqError::Data(format!("activity {}, video {id} is empty", self.name)));
            }
        }
        Ok(())
    }

    fn kept(&self, gt_label: usize) -> bool {
        Some(gt_label) != self.background
    }

    fn total_frames(&self) -> usize {
        self.gt.iter().map(Vec::len).sum()
    }
}

/// Cluster-to-class mapping for one activity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `mapping[k]` is the class matched to predicted cluster `k`.
    pub mapping: Vec<Option<usize>>,
    /// Matched frame overlap.
    pub total_overlap: u64,
}

impl Matching {
    pub fn class_of(&self, cluster: usize) -> Option<usize> {
        self.mapping.get(cluster).copied().flatten()
    }
}

/// Frame overlap counts `O[k][c]` over unmasked frames.
pub fn overlap_matrix(act: &ActivityPredictions) -> Result<Array2<u64>> {
    act.validate()?;
    let kp = act.pred.iter().flatten().max().map_or(0, |m| m + 1);
    let kg = act.gt.iter().flatten().max().map_or(0, |m| m + 1);
    let mut o = Array2::<u64>::zeros((kp, kg));
    for (p, g) in act.pred.iter().zip(&act.gt) {
        for (&pk, &gc) in p.iter().zip(g) {
            if act.kept(gc) {
                o[[pk, gc]] += 1;
            }
        }
    }
    Ok(o)
}

/// Activity-level one-to-one matching maximizing total frame overlap.
pub fn hungarian_match(act: &ActivityPredictions) -> Result<Matching> {
    let o = overlap_matrix(act)?;
    let mapping = hungarian_max(&o.mapv(|v| v as f64));
    let total_overlap = mapping
        .iter()
        .enumerate()
        .filter_map(|(k, c)| c.map(|c| o[[k, c]]))
        .sum();
    Ok(Matching { mapping, total_overlap })
}

fn unmasked_frames(act: &ActivityPredictions) -> usize {
    act.gt.iter().flatten().filter(|&&g| act.kept(g)).count()
}

/// Fraction of unmasked frames whose mapped cluster equals the class.
pub fn mof(act: &ActivityPredictions, matching: &Matching) -> Result<f64> {
    act.validate()?;
    let total = unmasked_frames(act);
    if total == 0 {
        return Err(HvqError::Data(format!("activity {} has no unmasked frames", act.name)));
    }
    let correct = act
        .pred
        .iter()
        .zip(&act.gt)
        .flat_map(|(p, g)| p.iter().zip(g))
        .filter(|(&pk, &gc)| act.kept(gc) && matching.class_of(pk) == Some(gc))
        .count();
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn harmonic(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Segment-level scores pooled over the activity's videos. A segment counts
/// when more than half of its unmasked frames agree; segments made only of
/// masked frames are left out of both numerator and denominator.
pub fn precision_recall_f1(act: &ActivityPredictions, matching: &Matching) -> Result<SegmentScores> {
    act.validate()?;
    let (mut recalled, mut gt_total, mut precise, mut pred_total) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in act.pred.iter().zip(&act.gt) {
        for seg in extract_segments(g) {
            if !act.kept(seg.label) {
                continue;
            }
            gt_total += 1;
            let hits = p[seg.start..seg.start + seg.len]
                .iter()
                .filter(|&&k| matching.class_of(k) == Some(seg.label))
                .count();
            if 2 * hits > seg.len {
                recalled += 1;
            }
        }
        for seg in extract_segments(p) {
            let frames = &g[seg.start..seg.start + seg.len];
            let kept = frames.iter().filter(|&&c| act.kept(c)).count();
            if kept == 0 {
                continue;
            }
            pred_total += 1;
            let class = matching.class_of(seg.label);
            let hits = frames.iter().filter(|&&c| act.kept(c) && Some(c) == class).count();
            if 2 * hits > kept {
                precise += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(precise, pred_total);
    let recall = ratio(recalled, gt_total);
    Ok(SegmentScores {
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

/// Number of right-open bins of `bin_width` needed to hold `max_len`.
pub fn bin_count(max_len: usize, bin_width: usize) -> usize {
    max_len / bin_width + 1
}

/// Normalized histogram of segment lengths over `bins` right-open bins.
pub fn length_histogram(lengths: &[usize], bin_width: usize, bins: usize) -> Result<Vec<f64>> {
    if bin_width == 0 {
        return Err(HvqError::Config("histogram bin width must be at least 1".into()));
    }
    if lengths.is_empty() {
        return Err(HvqError::Data("length histogram of an empty segment list".into()));
    }
    let mut h = vec![0.0; bins];
    for &l in lengths {
        let b = l / bin_width;
        if b >= bins {
            return Err(HvqError::Data(format!("segment length {l} exceeds {bins} bins of width {bin_width}")));
        }
        h[b] += 1.0;
    }
    let n = lengths.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// Histograms of two length lists over their shared support.
pub fn paired_histograms(a: &[usize], b: &[usize], bin_width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if bin_width == 0 {
        return Err(HvqError::Config("histogram bin width must be at least 1".into()));
    }
    let max = a.iter().chain(b).copied().max().unwrap_or(0);
    let bins = bin_count(max, bin_width);
    Ok((length_histogram(a, bin_width, bins)?, length_histogram(b, bin_width, bins)?))
}

fn kl_base2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).log2())
        .sum()
}

/// Jensen-Shannon distance with base-2 logarithms, in `[0, 1]`.
pub fn jsdist(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(HvqError::Data(format!(
            "histogram supports differ: {} vs {} bins",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let div = 0.5 * (kl_base2(p, &m) + kl_base2(q, &m));
    Ok(div.max(0.0).sqrt().min(1.0))
}

fn segment_lengths(labels: &[usize]) -> Vec<usize> {
    extract_segments(labels).iter().map(|s| s.len).collect()
}

/// Distance between predicted and ground-truth segment-length histograms.
pub fn video_jsd(pred: &[usize], gt: &[usize], bin_width: usize) -> Result<f64> {
    let (hp, hg) = paired_histograms(&segment_lengths(pred), &segment_lengths(gt), bin_width)?;
    jsdist(&hp, &hg)
}

/// Mean over the activity's videos of the per-video distance.
pub fn activity_jsd(act: &ActivityPredictions, bin_width: usize) -> Result<f64> {
    act.validate()?;
    let mut sum = 0.0;
    for (p, g) in act.pred.iter().zip(&act.gt) {
        sum += video_jsd(p, g, bin_width)?;
    }
    Ok(sum / act.gt.len() as f64)
}

/// Frame-weighted mean of per-activity distances.
pub fn jsd_dataset(activities: &[ActivityPredictions], bin_width: usize) -> Result<f64> {
    if activities.is_empty() {
        return Err(HvqError::Data("no activities to evaluate".into()));
    }
    let values = activities
        .iter()
        .map(|a| Ok((activity_jsd(a, bin_width)?, a.total_frames() as f64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(frame_weighted(&values))
}

fn frame_weighted(values: &[(f64, f64)]) -> f64 {
    let w: f64 = values.iter().map(|(_, f)| f).sum();
    values.iter().map(|(v, f)| v * f).sum::<f64>() / w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub bin_width: usize,
    /// Report the length-bias distance; forced off for masked activities.
    pub report_jsd: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bin_width: DEFAULT_BIN_WIDTH,
            report_jsd: true,
        }
    }
}

/// Scores for one activity, as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityMetrics {
    pub mof: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub jsd: Option<f64>,
    pub frames: usize,
    pub matching: Matching,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mof: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub jsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub activities: BTreeMap<String, ActivityMetrics>,
    /// Unweighted mean over activities (JSD is always frame-weighted).
    pub macro_avg: Aggregate,
    /// Frame-weighted mean over activities.
    pub frame_weighted: Aggregate,
}

pub fn evaluate_activity(act: &ActivityPredictions, options: &EvalOptions) -> Result<ActivityMetrics> {
    let matching = hungarian_match(act)?;
    let scores = precision_recall_f1(act, &matching)?;
    let jsd = if options.report_jsd && act.background.is_none() {
        Some(activity_jsd(act, options.bin_width)?)
    } else {
        None
    };
    Ok(ActivityMetrics {
        mof: mof(act, &matching)?,
        precision: scores.precision,
        recall: scores.recall,
        f1: scores.f1,
        jsd,
        frames: act.total_frames(),
        matching,
    })
}

/// Matching and every metric for each activity, plus aggregates. JSD is left
/// out of the aggregate as soon as one activity is background-masked.
pub fn evaluate(activities: &[ActivityPredictions], options: &EvalOptions) -> Result<MetricsReport> {
    if activities.is_empty() {
        return Err(HvqError::Data("no activities to evaluate".into()));
    }
    let mut per = BTreeMap::new();
    for act in activities {
        if per.contains_key(&act.name) {
            return Err(HvqError::Data(format!("activity {} listed twice", act.name)));
        }
        per.insert(act.name.clone(), evaluate_activity(act, options)?);
    }
    let n = per.len() as f64;
    let jsd_all: Option<Vec<(f64, f64)>> = per.values().map(|m| m.jsd.map(|j| (j, m.frames as f64))).collect();
    let jsd = jsd_all.as_deref().map(frame_weighted);
    let weighted = |f: fn(&ActivityMetrics) -> f64| {
        frame_weighted(&per.values().map(|m| (f(m), m.frames as f64)).collect::<Vec<_>>())
    };
    let macro_avg = Aggregate {
        mof: per.values().map(|m| m.mof).sum::<f64>() / n,
        precision: per.values().map(|m| m.precision).sum::<f64>() / n,
        recall: per.values().map(|m| m.recall).sum::<f64>() / n,
        f1: per.values().map(|m| m.f1).sum::<f64>() / n,
        jsd,
    };
    let frame_weighted_avg = Aggregate {
        mof: weighted(|m| m.mof),
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        jsd,
    };
    Ok(MetricsReport {
        activities: per,
        macro_avg,
        frame_weighted: frame_weighted_avg,
    })
}

fn percent(v: f64) -> serde_json::Value {
    serde_json::json!(v * 100.0)
}

fn aggregate_json(a: &Aggregate) -> serde_json::Value {
    let mut obj = serde_json::json!({
        "mof": percent(a.mof),
        "precision": percent(a.precision),
        "recall": percent(a.recall),
        "f1": percent(a.f1),
    });
    if let Some(j) = a.jsd {
        obj["jsd"] = percent(j);
    }
    obj
}

impl MetricsReport {
    /// JSON document with every score multiplied by 100.
    pub fn to_json(&self) -> serde_json::Value {
        let activities: serde_json::Map<String, serde_json::Value> = self
            .activities
            .iter()
            .map(|(name, m)| {
                let mut obj = aggregate_json(&Aggregate {
                    mof: m.mof,
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                    jsd: m.jsd,
                });
                obj["frames"] = serde_json::json!(m.frames);
                obj["mapping"] = serde_json::json!(m.matching.mapping);
                (name.clone(), obj)
            })
            .collect();
        serde_json::json!({
            "activities": activities,
            "aggregate": aggregate_json(&self.macro_avg),
            "aggregate_frame_weighted": aggregate_json(&self.frame_weighted),
        })
    }
}

/// Comma-separated predicted and ground-truth length histograms of one video
/// over their shared support.
pub fn histogram_csv(pred: &[usize], gt: &[usize], bin_width: usize) -> Result<String> {
    let (hp, hg) = paired_histograms(&segment_lengths(pred), &segment_lengths(gt), bin_width)?;
    let mut out = String::from("bin_start,bin_end,predicted,ground_truth\n");
    for (b, (p, g)) in hp.iter().zip(&hg).enumerate() {
        writeln!(out, "{},{},{p},{g}", b * bin_width, (b + 1) * bin_width).expect("write to string");
    }
    Ok(out)
}
