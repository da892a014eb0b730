//! Hierarchical vector quantizer.
//!
//! Level 1 (the fine codebook `Z`, `αK` prototypes) quantizes the
//! l2-normalized encoder output; each higher level quantizes the prototypes
//! of the level below, ending with the coarse codebook `Q` of `K` clusters.
//! Codebooks learn only through exponential-moving-average updates and
//! dead-prototype resets; no gradient ever reaches a prototype.

pub mod kmeans;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HvqError, Result};
use crate::numerics::SeqTensor;

/// Mass threshold below which a level-1 prototype counts as dead.
pub const FINE_RESET_THRESHOLD: f64 = 3.0;
/// Mass threshold for every coarser level.
pub const COARSE_RESET_THRESHOLD: f64 = 1.0;

const KMEANS_MAX_ITER: usize = 100;

static ZERO_VECTOR_ASSIGNMENTS: AtomicU64 = AtomicU64::new(0);

/// Number of zero vectors passed to [`assign`] so far in this process.
pub fn zero_vector_assignments() -> u64 {
    ZERO_VECTOR_ASSIGNMENTS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaVariant {
    /// `ẑ = (β z + (1 − β) Σ e) / N̂`, applied literally.
    PrototypeBlend,
    /// Standard running-sum EMA: `m ← β m + (1 − β) Σ e`, `ẑ = m / N̂`.
    RunningSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    Kmeans,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HvqConfig {
    /// Number of action clusters (size of the coarsest codebook).
    pub k: usize,
    /// Fine-to-coarse multiplicity between consecutive levels.
    pub alpha: usize,
    /// Hierarchy depth, 1 to 3.
    pub levels: usize,
    pub ema_decay: f64,
    /// Optional per-level multiplicities, finest pair first (length `levels − 1`).
    pub level_alphas: Option<Vec<usize>>,
    pub ema_variant: EmaVariant,
    pub init: CodebookInit,
}

impl Default for HvqConfig {
    fn default() -> Self {
        HvqConfig {
            k: 0,
            alpha: 2,
            levels: 2,
            ema_decay: 0.8,
            level_alphas: None,
            ema_variant: EmaVariant::RunningSum,
            init: CodebookInit::Kmeans,
        }
    }
}

impl HvqConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HvqError::Config(format!("hvq: {m}")));
        if self.k == 0 {
            return err("k must be >= 1".into());
        }
        if self.alpha == 0 {
            return err("alpha must be >= 1".into());
        }
        if !(1..=3).contains(&self.levels) {
            return err(format!("levels must be 1, 2 or 3, got {}", self.levels));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return err(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if let Some(a) = &self.level_alphas {
            if a.len() != self.levels - 1 || a.contains(&0) {
                return err(format!(
                    "level_alphas needs {} entries >= 1, got {a:?}",
                    self.levels - 1
                ));
            }
        }
        Ok(())
    }

    /// Codebook sizes, finest level first. The last entry is always `k`.
    pub fn level_sizes(&self) -> Vec<usize> {
        let alphas = self
            .level_alphas
            .clone()
            .unwrap_or_else(|| vec![self.alpha; self.levels.saturating_sub(1)]);
        let mut sizes = vec![self.k];
        for a in alphas.iter().rev() {
            sizes.push(sizes.last().unwrap() * a);
        }
        sizes.reverse();
        sizes
    }
}

/// Prototype set of one hierarchy level.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub prototypes: Array2<f64>,
    /// Running assignment mass `N̂` per prototype.
    pub mass: Vec<f64>,
    /// 1 = finest.
    pub level: usize,
    pub reset_threshold: f64,
    /// Running sums for [`EmaVariant::RunningSum`].
    pub ema_sum: Array2<f64>,
    /// Bumped on every mutation; used to detect stale quantization results.
    pub version: u64,
}

impl Codebook {
    /// Builds a codebook for `level` (1-based) with unit masses. Level-1
    /// prototypes are normalized.
    pub fn new(prototypes: Array2<f64>, level: usize) -> Result<Self> {
        let (p, d) = prototypes.dim();
        if p == 0 || d == 0 {
            return Err(HvqError::Config("codebook must have at least one prototype".into()));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(HvqError::NonFinite("codebook prototype".into()));
        }
        let mut book = Codebook {
            ema_sum: prototypes.clone(),
            prototypes,
            mass: vec![1.0; p],
            level,
            reset_threshold: if level == 1 {
                FINE_RESET_THRESHOLD
            } else {
                COARSE_RESET_THRESHOLD
            },
            version: 0,
        };
        if book.normalized() {
            for mut row in book.prototypes.rows_mut() {
                normalize_in_place(row.view_mut());
            }
            book.ema_sum.assign(&book.prototypes);
        }
        Ok(book)
    }

    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Only level-1 prototypes live on the unit sphere.
    pub fn normalized(&self) -> bool {
        self.level == 1
    }

    fn touch(&mut self) {
        self.version += 1;
    }
}

fn normalize_in_place(mut v: ndarray::ArrayViewMut1<'_, f64>) {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
}

/// Row-wise l2 normalization; zero rows stay zero.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for row in out.rows_mut() {
        normalize_in_place(row);
    }
    out
}

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let denom = a.dot(&a).sqrt() * b.dot(&b).sqrt();
    if denom > 0.0 {
        a.dot(&b) / denom
    } else {
        0.0
    }
}

/// Cosine-similarity matrix between the rows of `a` and the rows of `b`.
pub fn cosine_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let an = l2_normalize_rows(&a.to_owned());
    let bn = l2_normalize_rows(&b.to_owned());
    an.dot(&bn.t())
}

/// Index of the prototype with the highest cosine similarity to `vector`,
/// lowest index on ties. A zero vector maps to 0 and bumps
/// [`zero_vector_assignments`].
pub fn assign(vector: ArrayView1<'_, f64>, codebook: &Codebook) -> usize {
    if vector.iter().all(|v| *v == 0.0) {
        ZERO_VECTOR_ASSIGNMENTS.fetch_add(1, Ordering::Relaxed);
        return 0;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (j, p) in codebook.prototypes.rows().into_iter().enumerate() {
        let c = cosine(vector, p);
        if c > best.1 {
            best = (j, c);
        }
    }
    best.0
}

fn assign_all(rows: ArrayView2<'_, f64>, codebook: &Codebook) -> Vec<usize> {
    rows.rows().into_iter().map(|r| assign(r, codebook)).collect()
}

/// Assignments of one level: the chosen prototype index per frame and the
/// chosen prototype rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    pub index: Vec<usize>,
    pub rows: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    /// Finest level first.
    pub levels: Vec<LevelAssignment>,
    /// `links[l][j]` is the level-`l+1` prototype that level-`l` prototype `j` maps to.
    pub links: Vec<Vec<usize>>,
    versions: Vec<u64>,
}

impl QuantizeResult {
    /// Fine index `j(t)`.
    pub fn fine(&self) -> &[usize] {
        &self.levels[0].index
    }

    /// Coarse (cluster) index `i(t)`.
    pub fn coarse(&self) -> &[usize] {
        &self.levels.last().expect("at least one level").index
    }

    pub fn frames(&self) -> usize {
        self.levels[0].index.len()
    }

    /// True if the result was computed against exactly these codebooks.
    pub fn is_current(&self, books: &[Codebook]) -> bool {
        self.versions.len() == books.len()
            && self.versions.iter().zip(books).all(|(v, b)| *v == b.version)
    }

    /// Number of frames whose coarse index differs from the nearest coarse
    /// prototype of their fine prototype under `books`.
    pub fn consistency_violations(&self, books: &[Codebook]) -> usize {
        (0..self.frames())
            .filter(|&t| {
                let mut idx = self.levels[0].index[t];
                for (l, book) in books.iter().enumerate().skip(1) {
                    idx = assign(books[l - 1].prototypes.row(idx), book);
                    if idx != self.levels[l].index[t] {
                        return true;
                    }
                }
                false
            })
            .count()
    }
}

/// Quantizes every frame to the finest codebook, then maps prototypes (not
/// frames) up the hierarchy.
pub fn quantize_hierarchy(embeddings: &SeqTensor, books: &[Codebook]) -> Result<QuantizeResult> {
    if books.is_empty() {
        return Err(HvqError::Config("no codebooks".into()));
    }
    for b in books {
        if b.dim() != embeddings.channels() {
            return Err(HvqError::Config(format!(
                "codebook level {} has dimension {} but embeddings have {}",
                b.level,
                b.dim(),
                embeddings.channels()
            )));
        }
    }
    let fine = assign_all(embeddings.view(), &books[0]);
    let mut levels = vec![LevelAssignment {
        rows: books[0].prototypes.select(Axis(0), &fine),
        index: fine,
    }];
    let mut links = Vec::new();
    for l in 1..books.len() {
        let link = assign_all(books[l - 1].prototypes.view(), &books[l]);
        let index: Vec<usize> = levels[l - 1].index.iter().map(|&j| link[j]).collect();
        levels.push(LevelAssignment {
            rows: books[l].prototypes.select(Axis(0), &index),
            index,
        });
        links.push(link);
    }
    Ok(QuantizeResult {
        levels,
        links,
        versions: books.iter().map(|b| b.version).collect(),
    })
}

/// EMA update of one codebook from the rows assigned to each prototype.
///
/// `inputs` holds one row per frame and `assignment[t]` names the prototype
/// frame `t` went to. Returns the per-prototype assignment counts.
pub fn ema_update(
    codebook: &mut Codebook,
    inputs: ArrayView2<'_, f64>,
    assignment: &[usize],
    beta: f64,
    variant: EmaVariant,
) -> Result<Vec<usize>> {
    if inputs.nrows() != assignment.len() || inputs.ncols() != codebook.dim() {
        return Err(HvqError::Usage(format!(
            "ema update got {}x{} inputs for {} assignments and {}-dim prototypes",
            inputs.nrows(),
            inputs.ncols(),
            assignment.len(),
            codebook.dim()
        )));
    }
    let p = codebook.len();
    let mut counts = vec![0usize; p];
    let mut sums = Array2::<f64>::zeros((p, codebook.dim()));
    for (row, &j) in inputs.rows().into_iter().zip(assignment) {
        if j >= p {
            return Err(HvqError::Usage(format!("assignment {j} out of range for {p} prototypes")));
        }
        counts[j] += 1;
        let mut s = sums.row_mut(j);
        s += &row;
    }
    for j in 0..p {
        let n = counts[j] as f64;
        let new_mass = beta * codebook.mass[j] + (1.0 - beta) * n;
        match variant {
            EmaVariant::PrototypeBlend => {
                if counts[j] > 0 && new_mass > 0.0 {
                    let updated = (&codebook.prototypes.row(j) * beta + &sums.row(j) * (1.0 - beta)) / new_mass;
                    codebook.prototypes.row_mut(j).assign(&updated);
                }
            }
            EmaVariant::RunningSum => {
                let running = &codebook.ema_sum.row(j) * beta + &sums.row(j) * (1.0 - beta);
                codebook.ema_sum.row_mut(j).assign(&running);
                if counts[j] > 0 && new_mass > 0.0 {
                    codebook.prototypes.row_mut(j).assign(&(running / new_mass));
                }
            }
        }
        codebook.mass[j] = new_mass;
    }
    if codebook.normalized() {
        for row in codebook.prototypes.rows_mut() {
            normalize_in_place(row);
        }
    }
    codebook.touch();
    Ok(counts)
}

/// Replaces every prototype whose mass is below the codebook's threshold by a
/// uniformly drawn row of `batch_inputs` and resets its mass to 1. Returns the
/// number of replaced prototypes.
pub fn reset_dead<R: Rng>(codebook: &mut Codebook, batch_inputs: ArrayView2<'_, f64>, rng: &mut R) -> Result<usize> {
    if batch_inputs.nrows() == 0 {
        return Err(HvqError::Usage("reset needs a non-empty batch".into()));
    }
    let mut replaced = 0;
    for j in 0..codebook.len() {
        if codebook.mass[j] < codebook.reset_threshold {
            let pick = rng.random_range(0..batch_inputs.nrows());
            let mut row = batch_inputs.row(pick).to_owned();
            if codebook.normalized() {
                normalize_in_place(row.view_mut());
            }
            codebook.prototypes.row_mut(j).assign(&row);
            codebook.ema_sum.row_mut(j).assign(&row);
            codebook.mass[j] = 1.0;
            replaced += 1;
        }
    }
    if replaced > 0 {
        codebook.touch();
    }
    Ok(replaced)
}

/// Distinct rows drawn without replacement (with repeats only once every
/// row has been used).
fn sample_rows<R: Rng>(points: ArrayView2<'_, f64>, count: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut picks = Vec::with_capacity(count);
    while picks.len() < count {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        picks.extend(order.iter().take(count - picks.len()));
    }
    points.select(Axis(0), &picks)
}

/// Initial codebooks for every level, finest first.
///
/// With k-means initialization, level 1 holds the `αK` k-means centroids of
/// the given (normalized) embeddings and each higher level the k-means
/// centroids of the prototypes below it. Random initialization draws
/// Gaussian directions instead.
pub fn init_codebooks(embeddings: &SeqTensor, config: &HvqConfig, seed: u64) -> Result<Vec<Codebook>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = config.level_sizes();
    let dim = embeddings.channels();
    let mut books: Vec<Codebook> = Vec::with_capacity(sizes.len());
    for (l, &size) in sizes.iter().enumerate() {
        let protos = match config.init {
            CodebookInit::Random => {
                Array2::from_shape_simple_fn((size, dim), || StandardNormal.sample(&mut rng))
            }
            CodebookInit::Kmeans => {
                let points = if l == 0 {
                    l2_normalize_rows(embeddings.as_array())
                } else {
                    books[l - 1].prototypes.clone()
                };
                if points.nrows() < size {
                    log::warn!(
                        "level {}: {} points for {size} centroids, sampling points instead of k-means",
                        l + 1,
                        points.nrows()
                    );
                    sample_rows(points.view(), size, &mut rng)
                } else {
                    kmeans::kmeans(points.view(), size, KMEANS_MAX_ITER, &mut rng)
                }
            }
        };
        books.push(Codebook::new(protos, l + 1)?);
    }
    Ok(books)
}

/// Commitment losses and their gradient with respect to the embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CommitLosses {
    /// `Σ_t ‖e_t − sg[z_t]‖²`
    pub commit_z: f64,
    /// `Σ_t ‖z_t − sg[q_t]‖²`, summed over every adjacent level pair.
    pub commit_q: f64,
    pub grad_z: Array2<f64>,
    pub grad_q: Array2<f64>,
}

/// Commitment terms for embeddings `embeddings` quantized as `result`.
///
/// Prototypes receive no gradient. The gradient of the coarser terms reaches
/// the embeddings through the straight-through identity (`z_t` treated as
/// `e_t + sg[z_t − e_t]`).
pub fn commitment_losses(embeddings: &SeqTensor, result: &QuantizeResult, books: &[Codebook]) -> Result<CommitLosses> {
    if !result.is_current(books) {
        return Err(HvqError::Usage(
            "quantization result is stale: codebooks changed since it was computed".into(),
        ));
    }
    if result.frames() != embeddings.frames() {
        return Err(HvqError::Usage("quantization result has a different frame count".into()));
    }
    let e = embeddings.as_array();
    let dz = e - &result.levels[0].rows;
    let commit_z = dz.iter().map(|v| v * v).sum();
    let grad_z = dz * 2.0;
    let mut commit_q = 0.0;
    let mut grad_q = Array2::zeros(e.dim());
    for pair in result.levels.windows(2) {
        let d = &pair[0].rows - &pair[1].rows;
        commit_q += d.iter().map(|v| v * v).sum::<f64>();
        grad_q += &(d * 2.0);
    }
    Ok(CommitLosses {
        commit_z,
        commit_q,
        grad_z,
        grad_q,
    })
}
