//! Inference: soft cluster assignments, the activity-level cluster order and
//! length prior, and ordered segmentation decoders (exact dynamic programming
//! and a FIFA-style gradient relaxation).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{HvqError, Result};
use crate::hvq::{cosine_matrix, Codebook};
use crate::numerics::SeqTensor;
use crate::training::HvqModel;

/// How fine-level evidence is combined into a coarse-cluster similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Sum over paths of the product of cosine similarities along the path.
    #[default]
    Product,
    /// Sum over paths of the sum of cosine similarities along the path.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    Fifa,
    Dp,
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FifaConfig {
    pub learning_rate: f64,
    pub sharpness: f64,
    pub epochs: usize,
    /// Reject steps that raise the energy and retry with half the step.
    pub step_rejection: bool,
}

impl Default for FifaConfig {
    fn default() -> Self {
        FifaConfig {
            learning_rate: 0.01,
            sharpness: 0.005,
            epochs: 100,
            step_rejection: true,
        }
    }
}

impl FifaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HvqError::Config(format!("fifa learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(HvqError::Config(format!("fifa sharpness must be positive, got {}", self.sharpness)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub decoder: DecoderKind,
    pub sim_mode: SimMode,
    /// Weight of the Poisson length-prior term.
    pub gamma: f64,
    pub fifa: FifaConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            decoder: DecoderKind::Fifa,
            sim_mode: SimMode::Product,
            gamma: 0.05,
            fifa: FifaConfig::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(HvqError::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        self.fifa.validate()
    }
}

/// Row-stochastic `T × K` matrix of cluster probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment {
    probs: Array2<f64>,
}

impl SoftAssignment {
    /// Softmax over each row of `scores`.
    pub fn from_scores(scores: ArrayView2<'_, f64>) -> Result<Self> {
        if scores.ncols() == 0 {
            return Err(HvqError::Config("soft assignment over zero clusters".into()));
        }
        let mut probs = scores.to_owned();
        for mut row in probs.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(HvqError::NonFinite("similarity row is not finite".into()));
            }
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        Ok(SoftAssignment { probs })
    }

    /// Wraps an existing row-stochastic matrix.
    pub fn from_probs(probs: Array2<f64>) -> Result<Self> {
        for (t, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(HvqError::Data(format!("row {t} is not a probability distribution")));
            }
        }
        if probs.ncols() == 0 {
            return Err(HvqError::Config("soft assignment over zero clusters".into()));
        }
        Ok(SoftAssignment { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.probs.ncols()
    }

    /// Natural log of every probability, floored so that it stays finite.
    pub fn log_probs(&self) -> Array2<f64> {
        self.probs.mapv(|p| p.max(f64::MIN_POSITIVE).ln())
    }
}

/// Per-frame coarse-cluster similarities; `books` is finest first.
pub fn similarity(embeddings: &SeqTensor, books: &[Codebook], mode: SimMode) -> Result<Array2<f64>> {
    if books.is_empty() || books.iter().any(|b| b.is_empty()) {
        return Err(HvqError::Config("soft assignment needs non-empty codebooks".into()));
    }
    let e = embeddings.view();
    let first = cosine_matrix(e, books[0].prototypes.view());
    let steps: Vec<Array2<f64>> = books
        .windows(2)
        .map(|pair| cosine_matrix(pair[0].prototypes.view(), pair[1].prototypes.view()))
        .collect();
    Ok(match mode {
        SimMode::Product => steps.iter().fold(first, |acc, c| acc.dot(c)),
        SimMode::Literal => {
            // paths reaching each node, and the summed score over those paths
            let mut counts = Array1::<f64>::ones(books[0].len());
            let mut scores = first;
            for c in &steps {
                let next_counts = Array1::from_elem(c.ncols(), counts.sum());
                let carried = scores.sum_axis(Axis(1)).insert_axis(Axis(1));
                let added = counts.dot(c).insert_axis(Axis(0));
                scores = &carried + &added;
                counts = next_counts;
            }
            scores
        }
    })
}

pub fn soft_assign(embeddings: &SeqTensor, books: &[Codebook], mode: SimMode) -> Result<SoftAssignment> {
    SoftAssignment::from_scores(similarity(embeddings, books, mode)?.view())
}

/// Non-empty clusters sorted by mean normalized timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterOrder {
    pub clusters: Vec<usize>,
}

impl ClusterOrder {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Mean of `t / T` per cluster over all frames of all videos, ascending,
/// ties broken by cluster index.
pub fn cluster_order(assignments: &[Vec<usize>], k: usize) -> Result<ClusterOrder> {
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for video in assignments {
        let t_len = video.len() as f64;
        for (t, &c) in video.iter().enumerate() {
            if c >= k {
                return Err(HvqError::Usage(format!("cluster {c} out of range for {k} clusters")));
            }
            sums[c] += t as f64 / t_len;
            counts[c] += 1;
        }
    }
    let mut clusters: Vec<(f64, usize)> =
        (0..k).filter(|&c| counts[c] > 0).map(|c| (sums[c] / counts[c] as f64, c)).collect();
    if clusters.is_empty() {
        return Err(HvqError::Data("no assigned frames to order clusters by".into()));
    }
    clusters.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ClusterOrder {
        clusters: clusters.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Expected frame fraction per cluster; zero for clusters never assigned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthPrior {
    pub fractions: Vec<f64>,
}

/// Averages each video's per-cluster frame fractions over videos.
pub fn length_prior(assignments: &[Vec<usize>], k: usize) -> Result<LengthPrior> {
    let mut fractions = vec![0.0; k];
    let mut videos = 0usize;
    for video in assignments.iter().filter(|v| !v.is_empty()) {
        let share = 1.0 / video.len() as f64;
        for &c in video {
            if c >= k {
                return Err(HvqError::Usage(format!("cluster {c} out of range for {k} clusters")));
            }
            fractions[c] += share;
        }
        videos += 1;
    }
    if videos == 0 {
        return Err(HvqError::Data("length prior needs at least one non-empty video".into()));
    }
    let total: f64 = fractions.iter().sum();
    fractions.iter_mut().for_each(|f| *f /= total);
    Ok(LengthPrior { fractions })
}

/// `log Poisson(len; mean)`, continuous in `len`.
pub fn log_poisson(len: f64, mean: f64) -> f64 {
    len * mean.ln() - mean - ln_gamma(len + 1.0)
}

fn check_feasible(frames: usize, order: &ClusterOrder, prior: &LengthPrior, k: usize) -> Result<()> {
    if order.is_empty() {
        return Err(HvqError::Usage("empty cluster order".into()));
    }
    if prior.fractions.len() != k {
        return Err(HvqError::Usage(format!(
            "length prior has {} clusters, probabilities have {k}",
            prior.fractions.len()
        )));
    }
    for &c in &order.clusters {
        if c >= k || !(prior.fractions[c] > 0.0) {
            return Err(HvqError::Usage(format!("ordered cluster {c} has no length prior")));
        }
    }
    if frames < order.len() {
        return Err(HvqError::Infeasible(format!(
            "{frames} frames cannot hold {} ordered segments",
            order.len()
        )));
    }
    Ok(())
}

/// Objective maximized by the ordered decoders: frame log-likelihood plus
/// `gamma` times the Poisson log-prior of each segment length. Errors if
/// `labels` is not a traversal of `order` with every segment non-empty.
pub fn segmentation_objective(
    probs: &SoftAssignment,
    order: &ClusterOrder,
    prior: &LengthPrior,
    gamma: f64,
    labels: &[usize],
) -> Result<f64> {
    check_feasible(probs.frames(), order, prior, probs.clusters())?;
    if labels.len() != probs.frames() {
        return Err(HvqError::Usage(format!(
            "{} labels for {} frames",
            labels.len(),
            probs.frames()
        )));
    }
    let runs = run_lengths(labels);
    if runs.len() != order.len() || runs.iter().zip(&order.clusters).any(|((c, _), o)| c != o) {
        return Err(HvqError::Usage("labels do not traverse the cluster order".into()));
    }
    let logp = probs.log_probs();
    let t_len = probs.frames() as f64;
    let frame_term: f64 = labels.iter().enumerate().map(|(t, &c)| logp[[t, c]]).sum();
    let length_term: f64 = runs
        .iter()
        .map(|&(c, len)| log_poisson(len as f64, prior.fractions[c] * t_len))
        .sum();
    Ok(frame_term + gamma * length_term)
}

fn run_lengths(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((c, n)) if *c == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    runs
}

fn labels_from_lengths(order: &ClusterOrder, lengths: &[usize]) -> Vec<usize> {
    order
        .clusters
        .iter()
        .zip(lengths)
        .flat_map(|(&c, &n)| std::iter::repeat_n(c, n))
        .collect()
}

/// Exact maximizer of [`segmentation_objective`]; returns labels and objective.
pub fn dp_decode(
    probs: &SoftAssignment,
    order: &ClusterOrder,
    prior: &LengthPrior,
    gamma: f64,
) -> Result<(Vec<usize>, f64)> {
    let t_len = probs.frames();
    check_feasible(t_len, order, prior, probs.clusters())?;
    let n = order.len();
    let logp = probs.log_probs();
    // cum[k][t] = sum of log p(c_k | s) for s < t
    let cum: Vec<Vec<f64>> = order
        .clusters
        .iter()
        .map(|&c| {
            let mut acc = Vec::with_capacity(t_len + 1);
            acc.push(0.0);
            for t in 0..t_len {
                acc.push(acc[t] + logp[[t, c]]);
            }
            acc
        })
        .collect();
    let length_score: Vec<Vec<f64>> = order
        .clusters
        .iter()
        .map(|&c| {
            let mean = prior.fractions[c] * t_len as f64;
            (0..=t_len).map(|len| gamma * log_poisson(len as f64, mean)).collect()
        })
        .collect();

    // best[k][t]: first k segments cover frames [0, t)
    let mut best = vec![vec![f64::NEG_INFINITY; t_len + 1]; n + 1];
    let mut back = vec![vec![0usize; t_len + 1]; n + 1];
    best[0][0] = 0.0;
    for k in 1..=n {
        let last = t_len - (n - k);
        for t in k..=last {
            let mut top = f64::NEG_INFINITY;
            let mut arg = k - 1;
            for s in (k - 1)..t {
                let prev = best[k - 1][s];
                if prev == f64::NEG_INFINITY {
                    continue;
                }
                let v = prev + cum[k - 1][t] - cum[k - 1][s] + length_score[k - 1][t - s];
                if v > top {
                    top = v;
                    arg = s;
                }
            }
            best[k][t] = top;
            back[k][t] = arg;
        }
    }
    let mut lengths = vec![0usize; n];
    let mut t = t_len;
    for k in (1..=n).rev() {
        let s = back[k][t];
        lengths[k - 1] = t - s;
        t = s;
    }
    Ok((labels_from_lengths(order, &lengths), best[n][t_len]))
}

/// Outcome of [`fifa_decode`].
#[derive(Clone, Debug)]
pub struct FifaResult {
    pub labels: Vec<usize>,
    /// Continuous segment lengths after optimization.
    pub lengths: Vec<f64>,
    /// Energy at initialization followed by the energy after every epoch.
    pub energies: Vec<f64>,
}

/// Step halvings tried before an epoch is skipped when step rejection is on.
const MAX_HALVINGS: usize = 40;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relaxed energy over segment logits and its gradient.
struct Relaxation {
    /// log p for the ordered clusters, `T × n`.
    logp: Array2<f64>,
    means: Vec<f64>,
    gamma: f64,
    width: f64,
    frames: usize,
}

impl Relaxation {
    fn new(probs: &SoftAssignment, order: &ClusterOrder, prior: &LengthPrior, gamma: f64, sharpness: f64) -> Self {
        let t_len = probs.frames();
        let logp = probs.log_probs();
        Relaxation {
            logp: Array2::from_shape_fn((t_len, order.len()), |(t, k)| logp[[t, order.clusters[k]]]),
            means: order.clusters.iter().map(|&c| prior.fractions[c] * t_len as f64).collect(),
            gamma,
            width: sharpness * t_len as f64,
            frames: t_len,
        }
    }

    fn lengths(&self, lambda: &[f64]) -> Vec<f64> {
        let max = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lambda.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        w.iter().map(|v| self.frames as f64 * v / sum).collect()
    }

    fn boundaries(lengths: &[f64]) -> Vec<f64> {
        let mut b = Vec::with_capacity(lengths.len() + 1);
        b.push(0.0);
        for l in lengths {
            b.push(b.last().unwrap() + l);
        }
        b
    }

    fn energy(&self, lambda: &[f64]) -> f64 {
        let lengths = self.lengths(lambda);
        let b = Self::boundaries(&lengths);
        let n = lengths.len();
        let mut e = 0.0;
        for t in 0..self.frames {
            let x = t as f64 + 0.5;
            for k in 0..n {
                let m = sigmoid((x - b[k]) / self.width) - sigmoid((x - b[k + 1]) / self.width);
                e -= m * self.logp[[t, k]];
            }
        }
        let prior: f64 = lengths.iter().zip(&self.means).map(|(&l, &mu)| log_poisson(l, mu)).sum();
        e - self.gamma * prior
    }

    fn gradient(&self, lambda: &[f64]) -> Vec<f64> {
        let lengths = self.lengths(lambda);
        let b = Self::boundaries(&lengths);
        let n = lengths.len();
        // dE/db_k for k = 1..=n; b_0 is pinned at 0
        let mut grad_b = vec![0.0; n + 1];
        for t in 0..self.frames {
            let x = t as f64 + 0.5;
            for k in 1..=n {
                let s = sigmoid((x - b[k]) / self.width);
                let ds = s * (1.0 - s) / self.width;
                let next = if k < n { self.logp[[t, k]] } else { 0.0 };
                grad_b[k] -= ds * (self.logp[[t, k - 1]] - next);
            }
        }
        // dE/dℓ_j = Σ_{k ≥ j} dE/db_k − γ d/dℓ log Poisson(ℓ_j)
        let mut grad_len = vec![0.0; n];
        let mut tail = 0.0;
        for j in (0..n).rev() {
            tail += grad_b[j + 1];
            grad_len[j] = tail - self.gamma * (self.means[j].ln() - digamma(lengths[j] + 1.0));
        }
        // ℓ = T softmax(λ): dE/dλ_i = ℓ_i g_i − p_i Σ_j ℓ_j g_j
        let weighted: f64 = lengths.iter().zip(&grad_len).map(|(l, g)| l * g).sum();
        let t_len = self.frames as f64;
        (0..n)
            .map(|i| lengths[i] * grad_len[i] - lengths[i] / t_len * weighted)
            .collect()
    }
}

/// Rounds continuous lengths to integer segment lengths that are each at
/// least one frame and sum to `frames`.
fn round_lengths(lengths: &[f64], frames: usize) -> Vec<usize> {
    let n = lengths.len();
    let mut cuts = Vec::with_capacity(n + 1);
    cuts.push(0usize);
    let mut acc = 0.0;
    for (k, l) in lengths.iter().enumerate().take(n - 1) {
        acc += l;
        let lo = cuts[k] + 1;
        let hi = frames - (n - 1 - k);
        cuts.push((acc.round().max(0.0) as usize).clamp(lo, hi));
    }
    cuts.push(frames);
    cuts.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Gradient relaxation of the ordered objective: segment lengths follow a
/// softmax of logits initialized at the log length prior, frames belong to
/// segments through sigmoid plateau masks of width `sharpness · T`, and
/// plain gradient descent runs for `epochs` steps. Labels come from the
/// rounded segment boundaries.
pub fn fifa_decode(
    probs: &SoftAssignment,
    order: &ClusterOrder,
    prior: &LengthPrior,
    gamma: f64,
    config: &FifaConfig,
) -> Result<FifaResult> {
    config.validate()?;
    let t_len = probs.frames();
    check_feasible(t_len, order, prior, probs.clusters())?;
    let relax = Relaxation::new(probs, order, prior, gamma, config.sharpness);
    let mut lambda: Vec<f64> = order.clusters.iter().map(|&c| prior.fractions[c].ln()).collect();
    let mut energy = relax.energy(&lambda);
    let mut energies = vec![energy];
    for _ in 0..config.epochs {
        let g = relax.gradient(&lambda);
        let mut step = config.learning_rate;
        for _ in 0..if config.step_rejection { MAX_HALVINGS } else { 1 } {
            let candidate: Vec<f64> = lambda.iter().zip(&g).map(|(l, gi)| l - step * gi).collect();
            let e = relax.energy(&candidate);
            if !config.step_rejection || e <= energy {
                lambda = candidate;
                energy = e;
                break;
            }
            step *= 0.5;
        }
        if !energy.is_finite() {
            return Err(HvqError::NonFinite("fifa energy diverged".into()));
        }
        energies.push(energy);
    }
    let lengths = relax.lengths(&lambda);
    let labels = labels_from_lengths(order, &round_lengths(&lengths, t_len));
    Ok(FifaResult {
        labels,
        lengths,
        energies,
    })
}

/// Gradient of the relaxed energy, exposed for finite-difference checks.
pub fn fifa_energy_and_gradient(
    probs: &SoftAssignment,
    order: &ClusterOrder,
    prior: &LengthPrior,
    gamma: f64,
    sharpness: f64,
    lambda: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let t_len = probs.frames();
    check_feasible(t_len, order, prior, probs.clusters())?;
    if lambda.len() != order.len() {
        return Err(HvqError::Usage("one logit per ordered cluster".into()));
    }
    let relax = Relaxation::new(probs, order, prior, gamma, sharpness);
    Ok((relax.energy(lambda), relax.gradient(lambda)))
}

/// Per-frame argmax over the clusters in `order`, lowest index on ties.
pub fn argmax_decode(probs: &SoftAssignment, order: &ClusterOrder) -> Vec<usize> {
    let mut allowed = order.clusters.clone();
    allowed.sort_unstable();
    probs
        .probs()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = allowed[0];
            for &c in &allowed[1..] {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Activity-level decoding state shared by all videos of an activity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityDecoding {
    pub order: ClusterOrder,
    pub prior: LengthPrior,
}

/// Order and length prior from the coarse hard assignments of `videos`.
pub fn fit_decoding(state: &HvqModel, videos: &[&SeqTensor]) -> Result<ActivityDecoding> {
    let k = state
        .books
        .last()
        .ok_or_else(|| HvqError::Config("model has no codebooks".into()))?
        .len();
    let mut hard = Vec::with_capacity(videos.len());
    for v in videos {
        hard.push(state.quantize(v)?.coarse().to_vec());
    }
    Ok(ActivityDecoding {
        order: cluster_order(&hard, k)?,
        prior: length_prior(&hard, k)?,
    })
}

/// Encodes one video and decodes it with the configured decoder.
pub fn segment_video(
    state: &HvqModel,
    video: &crate::data::VideoFeatures,
    decoding: &ActivityDecoding,
    config: &DecodeConfig,
) -> Result<Vec<usize>> {
    let probs = soft_assign(&state.embed(&video.frames)?, &state.books, config.sim_mode)?;
    let named = |err: HvqError| match err {
        HvqError::Infeasible(msg) => HvqError::Infeasible(format!("video {}: {msg}", video.id)),
        other => other,
    };
    Ok(match config.decoder {
        DecoderKind::Argmax => argmax_decode(&probs, &decoding.order),
        DecoderKind::Dp => dp_decode(&probs, &decoding.order, &decoding.prior, config.gamma).map_err(named)?.0,
        DecoderKind::Fifa => {
            fifa_decode(&probs, &decoding.order, &decoding.prior, config.gamma, &config.fifa)
                .map_err(named)?
                .labels
        }
    })
}
