//! Loss assembly and the per-activity training loop.
//!
//! One training step processes one video: encode and l2-normalize, quantize
//! through the hierarchy, decode the coarse prototypes, back-propagate the
//! weighted loss (straight-through at every quantization level), take an
//! AdamW step, then update the codebooks by EMA and reset dead prototypes.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActivityDataset, VideoFeatures};
use crate::error::{HvqError, Result};
use crate::hvq::{
    commitment_losses, ema_update, init_codebooks, l2_normalize_rows, quantize_hierarchy, reset_dead,
    Codebook, HvqConfig, QuantizeResult,
};
use crate::numerics::{adamw_step, OptimConfig, SeqTensor};
use crate::tcn::{TcnConfig, TcnModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub rec: bool,
    pub commit_z: bool,
    pub commit_q: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            rec: true,
            commit_z: true,
            commit_q: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_rec: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimConfig,
    pub hvq: HvqConfig,
    pub tcn: TcnConfig,
    pub loss_terms: LossTerms,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_rec: 0.002,
            epochs: 30,
            seed: 0,
            optimizer: OptimConfig::default(),
            hvq: HvqConfig::default(),
            tcn: TcnConfig::default(),
            loss_terms: LossTerms::default(),
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec >= 0.0) || !self.lambda_rec.is_finite() {
            return Err(HvqError::Config(format!("lambda_rec must be >= 0, got {}", self.lambda_rec)));
        }
        if self.epochs == 0 {
            return Err(HvqError::Config("epochs must be >= 1".into()));
        }
        let t = self.loss_terms;
        if !(t.rec || t.commit_z || t.commit_q) {
            return Err(HvqError::Config("at least one loss term must be enabled".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(HvqError::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.optimizer.validate()?;
        self.hvq.validate()?;
        self.tcn.validate()
    }

    /// Copy with `k` and the feature width filled in from the dataset where
    /// the config leaves them unset (zero).
    pub fn resolved_for(&self, dataset: &ActivityDataset) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        if cfg.hvq.k == 0 {
            cfg.hvq.k = dataset.k;
        }
        let f = dataset.feature_dim();
        if cfg.tcn.input_dim == 0 {
            cfg.tcn.input_dim = f;
        } else if cfg.tcn.input_dim != f {
            return Err(HvqError::Data(format!(
                "activity {} has {f}-dim features but the config expects {}",
                dataset.name, cfg.tcn.input_dim
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-term loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub rec: f64,
    pub commit_z: f64,
    pub commit_q: f64,
}

/// `Σ ‖x_t − x̂_t‖²` and its gradient with respect to `x_hat`.
pub fn reconstruction_loss(x: &SeqTensor, x_hat: &SeqTensor) -> Result<(f64, Array2<f64>)> {
    if x.frames() != x_hat.frames() || x.channels() != x_hat.channels() {
        return Err(HvqError::Data(format!(
            "reconstruction is {}x{} but the input is {}x{}",
            x_hat.frames(),
            x_hat.channels(),
            x.frames(),
            x.channels()
        )));
    }
    let diff = x_hat.as_array() - x.as_array();
    let loss = diff.iter().map(|d| d * d).sum();
    Ok((loss, diff * 2.0))
}

/// `L_commit_z + L_commit_q + λ_rec · L_rec` over the enabled terms.
pub fn total_loss(terms: &StepLosses, config: &TrainConfig) -> f64 {
    let on = config.loss_terms;
    let mut total = 0.0;
    if on.commit_z {
        total += terms.commit_z;
    }
    if on.commit_q {
        total += terms.commit_q;
    }
    if on.rec {
        total += config.lambda_rec * terms.rec;
    }
    total
}

/// Trained state of one activity: the autoencoder and its codebooks.
#[derive(Clone, Debug, PartialEq)]
pub struct HvqModel {
    pub model: TcnModel,
    /// Finest level first.
    pub books: Vec<Codebook>,
}

impl HvqModel {
    /// l2-normalized embeddings in evaluation mode.
    pub fn embed(&self, video: &SeqTensor) -> Result<SeqTensor> {
        let e = self.model.encode(video)?;
        SeqTensor::new(l2_normalize_rows(e.as_array()))
    }

    pub fn quantize(&self, video: &SeqTensor) -> Result<QuantizeResult> {
        quantize_hierarchy(&self.embed(video)?, &self.books)
    }
}

/// Everything a step produced, for reporting and invariant checks.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: StepLosses,
    pub total: f64,
    /// Quantization used in this step, against the pre-update codebooks.
    pub quantization: QuantizeResult,
    /// Violations of hierarchy consistency in `quantization`.
    pub consistency_violations: usize,
    /// Prototypes reset per level, finest first.
    pub resets: Vec<usize>,
}

fn step_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (position as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Forward pass and loss gradients without touching any state. Returns the
/// losses and the gradients accumulated in the parameter stores of `model`
/// (which are zeroed first).
pub(crate) fn forward_backward<R: rand::Rng>(
    model: &mut TcnModel,
    books: &[Codebook],
    video: &SeqTensor,
    config: &TrainConfig,
    mut rng: Option<&mut R>,
) -> Result<(StepLosses, QuantizeResult, Array2<f64>)> {
    model.zero_grad();
    let (raw, enc_cache) = model.encoder.forward_cached(video.view(), rng.as_deref_mut())?;
    let norms: Vec<f64> = raw.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let e = l2_normalize_rows(&raw);
    let e_t = SeqTensor::new(e.clone())?;
    let quant = quantize_hierarchy(&e_t, books)?;
    let commit = commitment_losses(&e_t, &quant, books)?;

    let decoder_in = quant.levels.last().expect("at least one level").rows.view();
    let (x_hat, dec_cache) = model.decoder.forward_cached(decoder_in, rng)?;
    let (rec, rec_grad) = reconstruction_loss(video, &SeqTensor::new(x_hat)?)?;

    let on = config.loss_terms;
    let mut grad_e = Array2::<f64>::zeros(e.dim());
    if on.rec && config.lambda_rec > 0.0 {
        let g = rec_grad * config.lambda_rec;
        // straight-through: the decoder input gradient lands on e unchanged
        grad_e += &model.decoder.backward(&dec_cache, g.view())?;
    }
    if on.commit_z {
        grad_e += &commit.grad_z;
    }
    if on.commit_q {
        grad_e += &commit.grad_q;
    }
    // back through e = u / ‖u‖: (g − e (e·g)) / ‖u‖
    let dots = (&grad_e * &e).sum_axis(Axis(1));
    let mut grad_u = grad_e - &(&e * &dots.insert_axis(Axis(1)));
    for (mut row, n) in grad_u.rows_mut().into_iter().zip(&norms) {
        if *n > 0.0 {
            row /= *n;
        } else {
            row.fill(0.0);
        }
    }
    model.encoder.backward(&enc_cache, grad_u.view())?;
    let losses = StepLosses {
        rec,
        commit_z: commit.commit_z,
        commit_q: commit.commit_q,
    };
    Ok((losses, quant, e))
}

/// Checks the analytic training gradient against central differences.
///
/// The discrete assignments are frozen at the current parameters and the
/// quantizer is replaced by its straight-through surrogate
/// (`r_t = e_t + const`), so the finite differences see exactly the function
/// whose gradient the training step uses. Dropout is off. Returns the largest
/// relative error over all encoder and decoder parameters.
pub fn training_gradient_check(state: &HvqModel, video: &SeqTensor, config: &TrainConfig, eps: f64) -> Result<f64> {
    let base = state.embed(video)?;
    let quant = quantize_hierarchy(&base, &state.books)?;
    let e0 = base.as_array();
    let offsets: Vec<Array2<f64>> = quant.levels.iter().map(|l| &l.rows - e0).collect();
    let targets: Vec<Array2<f64>> = quant.levels.iter().map(|l| l.rows.clone()).collect();
    let on = config.loss_terms;

    let mut analytic = state.model.clone();
    forward_backward::<ChaCha8Rng>(&mut analytic, &state.books, video, config, None)?;
    let mut merged = analytic.encoder.params.clone();
    merged.params.extend(analytic.decoder.params.params.iter().cloned());
    let analytic_grads: Vec<Vec<f64>> = merged.params.iter().map(|p| p.grad.clone()).collect();

    let mut probe = state.model.clone();
    crate::numerics::finite_diff_check(&mut merged, eps, |store| {
        for (dst, src) in probe
            .encoder
            .params
            .params
            .iter_mut()
            .chain(probe.decoder.params.params.iter_mut())
            .zip(&store.params)
        {
            dst.value.clone_from(&src.value);
        }
        let e = l2_normalize_rows(&probe.encoder.forward(video.view())?);
        let mut loss = 0.0;
        if on.rec {
            let dec_in = &e + offsets.last().expect("at least one level");
            let x_hat = SeqTensor::new(probe.decoder.forward(dec_in.view())?)?;
            loss += config.lambda_rec * reconstruction_loss(video, &x_hat)?.0;
        }
        if on.commit_z {
            loss += (&e - &targets[0]).iter().map(|v| v * v).sum::<f64>();
        }
        if on.commit_q {
            for l in 0..targets.len() - 1 {
                let st = &e + &offsets[l];
                loss += (&st - &targets[l + 1]).iter().map(|v| v * v).sum::<f64>();
            }
        }
        for (p, g) in store.params.iter_mut().zip(&analytic_grads) {
            p.grad.clone_from(g);
        }
        Ok(loss)
    })
}

/// One training step on one video. `step_seed` drives dropout and resets.
pub fn train_step(
    state: &mut HvqModel,
    video: &VideoFeatures,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<StepOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let (losses, quant, e) = forward_backward(&mut state.model, &state.books, &video.frames, config, Some(&mut rng))?;
    let total = total_loss(&losses, config);
    if !total.is_finite() || !losses.rec.is_finite() {
        return Err(HvqError::NonFinite(format!(
            "loss {total} (rec {}, commit_z {}, commit_q {}) on video {}",
            losses.rec, losses.commit_z, losses.commit_q, video.id
        )));
    }
    let violations = quant.consistency_violations(&state.books);

    for net in [&mut state.model.encoder, &mut state.model.decoder] {
        if let Some(c) = config.clip_norm {
            net.params.clip_grad_norm(c);
        }
        adamw_step(&mut net.params, &config.optimizer)?;
    }

    let beta = config.hvq.ema_decay;
    let variant = config.hvq.ema_variant;
    ema_update(&mut state.books[0], e.view(), quant.fine(), beta, variant)?;
    for l in 1..state.books.len() {
        let inputs = &quant.levels[l - 1].rows;
        ema_update(&mut state.books[l], inputs.view(), &quant.levels[l].index, beta, variant)?;
    }
    let mut resets = Vec::with_capacity(state.books.len());
    resets.push(reset_dead(&mut state.books[0], e.view(), &mut rng)?);
    for l in 1..state.books.len() {
        let inputs = &quant.levels[l - 1].rows;
        resets.push(reset_dead(&mut state.books[l], inputs.view(), &mut rng)?);
    }
    Ok(StepOutcome {
        losses,
        total,
        quantization: quant,
        consistency_violations: violations,
        resets,
    })
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_terms: StepLosses,
    pub resets_z: usize,
    pub resets_q: usize,
}

impl EpochSummary {
    /// Progress line written to standard error by the command-line tool.
    pub fn progress_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} resets_z={} resets_q={}",
            self.epoch, self.mean_loss, self.resets_z, self.resets_q
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub steps: usize,
    pub duration_secs: f64,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _video: &VideoFeatures, _outcome: &StepOutcome, _state: &HvqModel) {}
    fn on_epoch(&mut self, _summary: &EpochSummary) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Observer that prints one progress line per epoch to standard error.
pub struct ProgressToStderr;

impl TrainObserver for ProgressToStderr {
    fn on_epoch(&mut self, summary: &EpochSummary) {
        eprintln!("{}", summary.progress_line());
    }
}

/// Initial model and codebooks: network from the seed, codebooks by k-means
/// (or random) initialization on the first video's normalized embeddings.
pub fn initialize(dataset: &ActivityDataset, config: &TrainConfig) -> Result<HvqModel> {
    let model = TcnModel::build(&config.tcn, config.seed)?;
    let first = &dataset.videos[0];
    let e = SeqTensor::new(l2_normalize_rows(model.encode(&first.frames)?.as_array()))?;
    let books = init_codebooks(&e, &config.hvq, config.seed)?;
    Ok(HvqModel { model, books })
}

/// Video order of `epoch`: dataset order first, seeded shuffles afterwards.
pub fn epoch_order(videos: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..videos).collect();
    if epoch > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, epoch, usize::MAX));
        order.shuffle(&mut rng);
    }
    order
}

/// Continues training `state` for epochs `start_epoch..config.epochs`.
pub fn train_epochs(
    state: &mut HvqModel,
    dataset: &ActivityDataset,
    config: &TrainConfig,
    start_epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    let started = Instant::now();
    let mut epochs = Vec::new();
    let mut steps = 0;
    for epoch in start_epoch..config.epochs {
        let mut sum = StepLosses::default();
        let mut total = 0.0;
        let (mut resets_z, mut resets_q) = (0, 0);
        let order = epoch_order(dataset.videos.len(), epoch, config.seed);
        for (pos, &vi) in order.iter().enumerate() {
            let video = &dataset.videos[vi];
            let out = train_step(state, video, config, step_seed(config.seed, epoch, pos))?;
            total += out.total;
            sum.rec += out.losses.rec;
            sum.commit_z += out.losses.commit_z;
            sum.commit_q += out.losses.commit_q;
            resets_z += out.resets[0];
            resets_q += out.resets[1..].iter().sum::<usize>();
            steps += 1;
            observer.on_step(epoch, video, &out, state);
        }
        let n = order.len() as f64;
        let summary = EpochSummary {
            epoch,
            mean_loss: total / n,
            mean_terms: StepLosses {
                rec: sum.rec / n,
                commit_z: sum.commit_z / n,
                commit_q: sum.commit_q / n,
            },
            resets_z,
            resets_q,
        };
        observer.on_epoch(&summary);
        epochs.push(summary);
    }
    Ok(TrainReport {
        epochs,
        steps,
        duration_secs: started.elapsed().as_secs_f64(),
    })
}

/// Trains one activity from scratch. Returns the trained state, the resolved
/// configuration and the report.
pub fn train_activity(
    dataset: &ActivityDataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(HvqModel, TrainConfig, TrainReport)> {
    dataset.validate()?;
    let config = config.resolved_for(dataset)?;
    let mut state = initialize(dataset, &config)?;
    let report = train_epochs(&mut state, dataset, &config, 0, observer)?;
    Ok((state, config, report))
}

#[cfg(test)]
mod tests;
