//! Deterministic synthetic activities with two ground-truth tracks.
//!
//! Every action owns a direction on the unit sphere; its subactions are
//! directions tilted away from it by a fixed spread angle. Subaction means of
//! different actions are at least `separation_deg` apart. Each video visits
//! the actions in a fixed order and, inside an action, its subactions in
//! order; every subaction segment draws its length from a short/long
//! mixture. A frame is its subaction mean plus Gaussian noise, rescaled to
//! norm `feature_scale`.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::hvqf::save_features;
use super::labels::write_labels;
use super::{write_atomic, ActivityDataset, VideoFeatures};
use crate::error::{HvqError, Result};
use crate::numerics::SeqTensor;

const MAX_DRAWS: usize = 2_000;
const MAX_GROUP_DRAWS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub activity: String,
    pub actions: usize,
    pub min_subactions: usize,
    pub max_subactions: usize,
    pub feature_dim: usize,
    pub videos: usize,
    /// Inclusive length range of short subaction segments.
    pub short_len: [usize; 2],
    /// Inclusive length range of long subaction segments.
    pub long_len: [usize; 2],
    /// Probability that a segment is drawn from the long range.
    pub long_fraction: f64,
    /// Per-dimension noise standard deviation.
    pub noise: f64,
    /// Minimum angle between subaction means of different actions, degrees.
    pub separation_deg: f64,
    /// Angle between a subaction mean and its action direction, degrees.
    pub spread_deg: f64,
    /// Norm of every frame (frames are unit directions times this).
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            activity: "synthetic".into(),
            actions: 4,
            min_subactions: 2,
            max_subactions: 3,
            feature_dim: 16,
            videos: 20,
            short_len: [4, 10],
            long_len: [14, 30],
            long_fraction: 0.6,
            noise: 0.05,
            separation_deg: 60.0,
            spread_deg: 25.0,
            feature_scale: 30.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HvqError::Config(format!("synthetic spec: {m}")));
        if self.actions == 0 || self.videos == 0 || self.feature_dim < 2 {
            return bad("actions, videos must be >= 1 and feature_dim >= 2");
        }
        if self.min_subactions == 0 || self.min_subactions > self.max_subactions {
            return bad("need 1 <= min_subactions <= max_subactions");
        }
        let [sl, sh] = self.short_len;
        let [ll, lh] = self.long_len;
        if sl == 0 || ll == 0 || sl > sh || ll > lh {
            return bad("segment length ranges must be non-empty with lengths >= 1");
        }
        if !(0.0..=1.0).contains(&self.long_fraction) {
            return bad("long_fraction must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be >= 0");
        }
        if !(self.separation_deg > 0.0 && self.separation_deg <= 90.0) {
            return bad("separation_deg must lie in (0, 90]");
        }
        if !(self.spread_deg >= 0.0 && self.spread_deg < 90.0) {
            return bad("spread_deg must lie in [0, 90)");
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad("feature_scale must be positive");
        }
        Ok(())
    }
}

/// Generated activity plus the generator's ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// Labels are the action track.
    pub activity: ActivityDataset,
    /// Per-frame subaction indices (global numbering).
    pub sub_labels: Vec<Vec<usize>>,
    /// Subaction index → owning action.
    pub sub_to_action: Vec<usize>,
    /// Unit subaction means, one row per subaction.
    pub sub_means: Array2<f64>,
}

impl SyntheticDataset {
    pub fn num_subactions(&self) -> usize {
        self.sub_to_action.len()
    }

    /// Same videos with the subaction track as ground truth.
    pub fn subaction_activity(&self) -> ActivityDataset {
        ActivityDataset {
            labels: Some(self.sub_labels.clone()),
            label_names: sub_names(&self.sub_to_action),
            k: self.num_subactions(),
            ..self.activity.clone()
        }
    }
}

fn unit_gaussian<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

fn angle_deg(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let cos = a.dot(b) / (a.dot(a) * b.dot(b)).sqrt();
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

fn action_names(k: usize) -> Vec<String> {
    (0..k).map(|a| format!("action{a}")).collect()
}

fn sub_names(sub_to_action: &[usize]) -> Vec<String> {
    let mut seen = vec![0usize; sub_to_action.iter().max().map_or(0, |m| m + 1)];
    sub_to_action
        .iter()
        .map(|&a| {
            let name = format!("action{a}_sub{}", seen[a]);
            seen[a] += 1;
            name
        })
        .collect()
}

fn infeasible(spec: &SyntheticSpec) -> HvqError {
    HvqError::Infeasible(format!(
        "cannot place {} actions with {}° separation in {} dimensions; use fewer actions, a smaller separation or a larger feature_dim",
        spec.actions, spec.separation_deg, spec.feature_dim
    ))
}

/// Draws the means: returns (subaction means, subaction → action).
fn draw_means<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<(Vec<Array1<f64>>, Vec<usize>)> {
    let spread = spec.spread_deg.to_radians();
    let mut subs: Vec<Array1<f64>> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut axes: Vec<Array1<f64>> = Vec::new();
    for a in 0..spec.actions {
        let count = rng.random_range(spec.min_subactions..=spec.max_subactions);
        let mut placed = false;
        for _ in 0..MAX_DRAWS {
            let axis = unit_gaussian(spec.feature_dim, rng);
            if axes.iter().any(|b| angle_deg(&axis, b) < spec.separation_deg) {
                continue;
            }
            let mut group: Vec<Array1<f64>> = Vec::with_capacity(count);
            for _ in 0..MAX_GROUP_DRAWS {
                if group.len() == count {
                    break;
                }
                // tilt the axis towards a random orthogonal direction
                let mut u = unit_gaussian(spec.feature_dim, rng);
                u = &u - &(&axis * axis.dot(&u));
                let n = u.dot(&u).sqrt();
                if n < 1e-6 {
                    continue;
                }
                let m = &axis * spread.cos() + &(u / n) * spread.sin();
                let m = &m / m.dot(&m).sqrt();
                let close_to_own = group.iter().any(|g| angle_deg(&m, g) < spec.spread_deg);
                let close_to_other = subs.iter().any(|s| angle_deg(&m, s) < spec.separation_deg);
                if !close_to_own && !close_to_other {
                    group.push(m);
                }
            }
            if group.len() == count {
                axes.push(axis);
                subs.extend(group);
                owner.extend(std::iter::repeat_n(a, count));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(infeasible(spec));
        }
    }
    Ok((subs, owner))
}

/// Generates the dataset described by `spec`; fully determined by its seed.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (means, sub_to_action) = draw_means(spec, &mut rng)?;
    // features are stored as 32-bit floats, so generate them at that precision
    let scale = spec.feature_scale;
    let scaled: Vec<Array1<f64>> = means.iter().map(|m| m.mapv(|v| to_f32_precision(v * scale))).collect();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");

    let mut videos = Vec::with_capacity(spec.videos);
    let mut labels = Vec::with_capacity(spec.videos);
    let mut sub_labels = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let mut rows: Vec<f64> = Vec::new();
        let mut act = Vec::new();
        let mut sub = Vec::new();
        for (s, &a) in sub_to_action.iter().enumerate() {
            let [lo, hi] = if rng.random::<f64>() < spec.long_fraction {
                spec.long_len
            } else {
                spec.short_len
            };
            let len = rng.random_range(lo..=hi);
            for _ in 0..len {
                if spec.noise == 0.0 {
                    rows.extend(scaled[s].iter());
                } else {
                    let x = means[s].mapv(|m| m + noise.sample(&mut rng));
                    let n = x.dot(&x).sqrt();
                    rows.extend(x.iter().map(|c| to_f32_precision(scale * c / n)));
                }
                act.push(a);
                sub.push(s);
            }
        }
        let t = act.len();
        let frames = SeqTensor::new(Array2::from_shape_vec((t, spec.feature_dim), rows).expect("row count"))?;
        videos.push(VideoFeatures::new(format!("video{v:03}"), frames));
        labels.push(act);
        sub_labels.push(sub);
    }

    let mut sub_means = Array2::zeros((scaled.len(), spec.feature_dim));
    for (i, m) in scaled.iter().enumerate() {
        sub_means.row_mut(i).assign(m);
    }
    let activity = ActivityDataset {
        name: spec.activity.clone(),
        videos,
        labels: Some(labels),
        label_names: action_names(spec.actions),
        k: spec.actions,
        background: None,
    };
    Ok(SyntheticDataset {
        spec: spec.clone(),
        activity,
        sub_labels,
        sub_to_action,
        sub_means,
    })
}

/// Writes the dataset under `<out>/<activity>/` as `features/`, `labels/`
/// (action tokens), `labels_sub/` (subaction tokens) and `meta.json`.
pub fn write_synthetic(ds: &SyntheticDataset, out: &Path) -> Result<()> {
    let dir = out.join(&ds.activity.name);
    let actions = &ds.activity.label_names;
    let subs = sub_names(&ds.sub_to_action);
    let labels = ds.activity.labels.as_ref().expect("synthetic data is labelled");
    for ((video, act), sub) in ds.activity.videos.iter().zip(labels).zip(&ds.sub_labels) {
        save_features(&dir.join("features").join(format!("{}.hvqf", video.id)), &video.frames)?;
        let a: Vec<&str> = act.iter().map(|&i| actions[i].as_str()).collect();
        write_labels(&dir.join("labels").join(format!("{}.txt", video.id)), &a)?;
        let s: Vec<&str> = sub.iter().map(|&i| subs[i].as_str()).collect();
        write_labels(&dir.join("labels_sub").join(format!("{}.txt", video.id)), &s)?;
    }
    let meta = serde_json::json!({
        "spec": ds.spec,
        "videos": ds.activity.videos.len(),
        "frames": ds.activity.total_frames(),
        "actions": ds.spec.actions,
        "subactions": ds.num_subactions(),
        "subaction_to_action": ds.sub_to_action,
    });
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join("meta.json"), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_frames_are_means() {
        let spec = SyntheticSpec {
            noise: 0.0,
            videos: 3,
            ..SyntheticSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        for (v, subs) in ds.activity.videos.iter().zip(&ds.sub_labels) {
            for (t, &s) in subs.iter().enumerate() {
                assert_eq!(v.frames.row(t), ds.sub_means.row(s));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec::default();
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(synth_generate(&spec).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn structure_and_separation() {
        let spec = SyntheticSpec::default();
        let ds = synth_generate(&spec).unwrap();
        assert_eq!(ds.activity.videos.len(), 20);
        assert_eq!(ds.activity.k, 4);
        let per_action: Vec<usize> = (0..4).map(|a| ds.sub_to_action.iter().filter(|&&x| x == a).count()).collect();
        assert!(per_action.iter().all(|&c| (2..=3).contains(&c)));
        let means: Vec<Array1<f64>> = ds.sub_means.rows().into_iter().map(|r| r.to_owned()).collect();
        for i in 0..means.len() {
            for j in 0..i {
                if ds.sub_to_action[i] != ds.sub_to_action[j] {
                    assert!(angle_deg(&means[i], &means[j]) >= 60.0);
                }
            }
        }
        // fixed action order in every video
        for labels in ds.activity.labels.as_ref().unwrap() {
            let mut runs: Vec<usize> = labels.clone();
            runs.dedup();
            assert_eq!(runs, vec![0, 1, 2, 3]);
        }
        for (v, l) in ds.activity.videos.iter().zip(&ds.sub_labels) {
            assert_eq!(v.len(), l.len());
        }
    }

    #[test]
    fn frames_have_the_requested_norm() {
        for scale in [1.0, 30.0] {
            let spec = SyntheticSpec {
                videos: 2,
                feature_scale: scale,
                ..SyntheticSpec::default()
            };
            let ds = synth_generate(&spec).unwrap();
            for v in &ds.activity.videos {
                for row in v.frames.view().rows() {
                    assert!((row.dot(&row).sqrt() - scale).abs() < 1e-5 * scale);
                }
            }
        }
        let bad = SyntheticSpec {
            feature_scale: 0.0,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn infeasible_separation_is_reported() {
        let spec = SyntheticSpec {
            actions: 12,
            feature_dim: 2,
            ..SyntheticSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(HvqError::Infeasible(_))));
    }

    #[test]
    fn writes_layout() {
        let spec = SyntheticSpec { videos: 2, ..SyntheticSpec::default() };
        let ds = synth_generate(&spec).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_synthetic(&ds, out.path()).unwrap();
        let dir = out.path().join("synthetic");
        for sub in ["features", "labels", "labels_sub"] {
            assert!(dir.join(sub).is_dir(), "{sub}");
        }
        assert!(dir.join("meta.json").is_file());
        assert!(dir.join("features/video001.hvqf").is_file());
    }
}
