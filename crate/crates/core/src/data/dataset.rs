//! Directory layout:
//!
//! ```text
//! <root>/<activity>/features/<video>.hvqf | <video>.csv
//! <root>/<activity>/labels/<video>.txt
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hvqf::load_features;
use super::labels::{load_label_tokens, LabelMap};
use super::{ActivityDataset, VideoFeatures};
use crate::error::{HvqError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train and evaluate on every video.
    Full,
    /// Seeded 80% / 20% train/test partition per activity.
    #[serde(rename = "split_80_20")]
    Split8020,
}

/// Options for [`group_dataset`].
#[derive(Clone, Debug)]
pub struct GroupOptions {
    pub protocol: Protocol,
    pub seed: u64,
    /// Ground-truth token treated as background.
    pub background: Option<String>,
    /// Label sub-directory name (`labels` unless evaluating another track).
    pub label_dir: String,
    /// Cluster count used when the activity has no labels, or to override the
    /// count derived from them.
    pub k_override: Option<usize>,
}

impl Default for GroupOptions {
    fn default() -> Self {
        GroupOptions {
            protocol: Protocol::Full,
            seed: 0,
            background: None,
            label_dir: "labels".into(),
            k_override: None,
        }
    }
}

/// Datasets of one activity under the chosen protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: ActivityDataset,
    /// Held-out videos; `None` under [`Protocol::Full`].
    pub test: Option<ActivityDataset>,
}

impl SplitDataset {
    /// The videos to segment and evaluate.
    pub fn eval_set(&self) -> &ActivityDataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HvqError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Names of the activity directories under `root` (those with a `features/`
/// sub-directory), sorted.
pub fn list_activities(root: &Path) -> Result<Vec<String>> {
    Ok(sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join("features").is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

fn is_feature_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("hvqf") | Some("csv"))
}

/// Loads one activity and partitions it according to `options.protocol`.
pub fn group_dataset(root: &Path, activity: &str, options: &GroupOptions) -> Result<SplitDataset> {
    let dir = root.join(activity);
    let feat_dir = dir.join("features");
    if !feat_dir.is_dir() {
        return Err(HvqError::Data(format!("activity {activity}: missing {}", feat_dir.display())));
    }
    let files: Vec<PathBuf> = sorted_entries(&feat_dir)?.into_iter().filter(|p| is_feature_file(p)).collect();
    if files.is_empty() {
        return Err(HvqError::Data(format!("activity {activity}: no feature files in {}", feat_dir.display())));
    }
    let label_dir = dir.join(&options.label_dir);
    let supervised = label_dir.is_dir();

    let mut videos = Vec::new();
    let mut token_tracks = Vec::new();
    for path in &files {
        let video: VideoFeatures = load_features(path)?;
        if supervised {
            let lp = label_dir.join(format!("{}.txt", video.id));
            if !lp.is_file() {
                log::warn!("activity {activity}: no labels for video {}, excluding it", video.id);
                continue;
            }
            let tokens = load_label_tokens(&lp)?;
            if tokens.len() != video.len() {
                return Err(HvqError::Data(format!(
                    "video {} of {activity}: {} labels for {} frames",
                    video.id,
                    tokens.len(),
                    video.len()
                )));
            }
            token_tracks.push(tokens);
        }
        videos.push(video);
    }
    if videos.is_empty() {
        return Err(HvqError::Data(format!("activity {activity}: no usable videos")));
    }

    let (labels, label_names, background, derived_k) = if supervised {
        let map = LabelMap::from_tokens(
            token_tracks.iter().flatten().map(String::as_str),
            options.background.as_deref(),
        );
        let labels: Vec<Vec<usize>> = token_tracks
            .iter()
            .map(|track| track.iter().map(|t| map.get(t).expect("token seen")).collect())
            .collect();
        (Some(labels), map.tokens().to_vec(), map.background(), map.num_actions())
    } else {
        (None, Vec::new(), None, 0)
    };
    let k = options.k_override.unwrap_or(derived_k);
    let full = ActivityDataset {
        name: activity.to_string(),
        videos,
        labels,
        label_names,
        k,
        background,
    };
    if k == 0 {
        return Err(HvqError::Config(format!(
            "activity {activity}: no labels to derive k from; set k explicitly"
        )));
    }
    full.validate()?;

    match options.protocol {
        Protocol::Full => Ok(SplitDataset { train: full, test: None }),
        Protocol::Split8020 => {
            let n = full.videos.len();
            let n_test = ((n as f64) * 0.2).round() as usize;
            if n_test == 0 || n_test == n {
                return Err(HvqError::Config(format!(
                    "activity {activity}: {n} videos cannot be split 80/20"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
            let mut test_idx = order[..n_test].to_vec();
            let mut train_idx = order[n_test..].to_vec();
            test_idx.sort_unstable();
            train_idx.sort_unstable();
            Ok(SplitDataset {
                train: subset(&full, &train_idx),
                test: Some(subset(&full, &test_idx)),
            })
        }
    }
}

fn subset(ds: &ActivityDataset, idx: &[usize]) -> ActivityDataset {
    ActivityDataset {
        name: ds.name.clone(),
        videos: idx.iter().map(|&i| ds.videos[i].clone()).collect(),
        labels: ds.labels.as_ref().map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
        label_names: ds.label_names.clone(),
        k: ds.k,
        background: ds.background,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_features, write_labels};
    use crate::numerics::SeqTensor;
    use ndarray::Array2;

    fn make_activity(root: &Path, name: &str, videos: usize, tokens: &[&str]) {
        let dir = root.join(name);
        for v in 0..videos {
            let t = tokens.len();
            let frames = SeqTensor::new(Array2::from_elem((t, 2), v as f64)).unwrap();
            save_features(&dir.join("features").join(format!("vid{v:02}.hvqf")), &frames).unwrap();
            write_labels(&dir.join("labels").join(format!("vid{v:02}.txt")), tokens).unwrap();
        }
    }

    #[test]
    fn k_from_distinct_labels() {
        let root = tempfile::tempdir().unwrap();
        make_activity(root.path(), "coffee", 3, &["a", "b", "b", "c"]);
        let ds = group_dataset(root.path(), "coffee", &GroupOptions::default()).unwrap();
        assert_eq!(ds.train.k, 3);
        assert_eq!(ds.train.videos.len(), 3);
        assert!(ds.test.is_none());
        assert_eq!(ds.train.labels.as_ref().unwrap()[0], vec![0, 1, 1, 2]);
        assert_eq!(list_activities(root.path()).unwrap(), vec!["coffee".to_string()]);
    }

    #[test]
    fn split_is_80_20_and_stable() {
        let root = tempfile::tempdir().unwrap();
        make_activity(root.path(), "tea", 10, &["x", "y"]);
        let opts = GroupOptions {
            protocol: Protocol::Split8020,
            seed: 4,
            ..GroupOptions::default()
        };
        let a = group_dataset(root.path(), "tea", &opts).unwrap();
        let b = group_dataset(root.path(), "tea", &opts).unwrap();
        assert_eq!(a.train.videos.len(), 8);
        assert_eq!(a.test.as_ref().unwrap().videos.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_activity_is_error() {
        let root = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(root.path().join("empty/features")).unwrap();
        assert!(group_dataset(root.path(), "empty", &GroupOptions::default()).is_err());
        assert!(group_dataset(root.path(), "missing", &GroupOptions::default()).is_err());
    }

    #[test]
    fn unlabeled_video_is_excluded() {
        let root = tempfile::tempdir().unwrap();
        make_activity(root.path(), "juice", 3, &["a", "b"]);
        std::fs::remove_file(root.path().join("juice/labels/vid01.txt")).unwrap();
        let ds = group_dataset(root.path(), "juice", &GroupOptions::default()).unwrap();
        let ids: Vec<&str> = ds.train.videos.iter().map(|v| v.id.as_str()).collect();
        assert_eq!(ids, vec!["vid00", "vid02"]);
    }

    #[test]
    fn label_count_mismatch_names_video() {
        let root = tempfile::tempdir().unwrap();
        make_activity(root.path(), "milk", 2, &["a", "b"]);
        write_labels(&root.path().join("milk/labels/vid01.txt"), &["a", "b", "b"]).unwrap();
        let err = group_dataset(root.path(), "milk", &GroupOptions::default()).unwrap_err();
        assert!(err.to_string().contains("vid01"), "{err}");
    }

    #[test]
    fn background_excluded_from_k() {
        let root = tempfile::tempdir().unwrap();
        make_activity(root.path(), "yti", 2, &["SIL", "a", "b", "SIL"]);
        let opts = GroupOptions {
            background: Some("SIL".into()),
            ..GroupOptions::default()
        };
        let ds = group_dataset(root.path(), "yti", &opts).unwrap();
        assert_eq!(ds.train.k, 2);
        assert_eq!(ds.train.background, Some(0));
    }
}
