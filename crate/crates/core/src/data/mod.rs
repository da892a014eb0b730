//! Feature and label files, dataset grouping, checkpoints and the synthetic
//! dataset generator.

mod checkpoint;
mod dataset;
mod hvqf;
mod labels;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{group_dataset, list_activities, GroupOptions, Protocol, SplitDataset};
pub use hvqf::{
    load_features, read_tensor_block, save_features, write_tensor_block, FEATURE_MAGIC, FEATURE_VERSION_F32,
    FEATURE_VERSION_F64,
};
pub use labels::{load_labels, load_label_tokens, write_labels, LabelMap};
pub use synth::{synth_generate, write_synthetic, SyntheticDataset, SyntheticSpec};

use crate::error::{HvqError, Result};
use crate::numerics::SeqTensor;

/// Feature matrix of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub frames: SeqTensor,
}

impl VideoFeatures {
    pub fn new(id: impl Into<String>, frames: SeqTensor) -> Self {
        VideoFeatures { id: id.into(), frames }
    }

    pub fn len(&self) -> usize {
        self.frames.frames()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All videos of one activity, optionally with per-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityDataset {
    pub name: String,
    pub videos: Vec<VideoFeatures>,
    /// Dense per-frame label indices, one vector per video.
    pub labels: Option<Vec<Vec<usize>>>,
    /// Index → token for the ground-truth labels.
    pub label_names: Vec<String>,
    /// Number of action clusters.
    pub k: usize,
    /// Dense index of the background label, if the dataset has one.
    pub background: Option<usize>,
}

impl ActivityDataset {
    /// Checks the invariants shared by every loader.
    pub fn validate(&self) -> Result<()> {
        if self.videos.is_empty() {
            return Err(HvqError::Config(format!("activity {} has no videos", self.name)));
        }
        let f = self.videos[0].frames.channels();
        for v in &self.videos {
            if v.frames.channels() != f {
                return Err(HvqError::Data(format!(
                    "video {} has {} feature channels, expected {f}",
                    v.id,
                    v.frames.channels()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.videos.len() {
                return Err(HvqError::Data(format!(
                    "activity {}: {} label tracks for {} videos",
                    self.name,
                    labels.len(),
                    self.videos.len()
                )));
            }
            for (v, l) in self.videos.iter().zip(labels) {
                if l.len() != v.len() {
                    return Err(HvqError::Data(format!(
                        "video {}: {} labels for {} frames",
                        v.id,
                        l.len(),
                        v.len()
                    )));
                }
            }
        }
        if self.k == 0 {
            return Err(HvqError::Config(format!("activity {} has k = 0", self.name)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.videos.first().map_or(0, |v| v.frames.channels())
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(VideoFeatures::len).sum()
    }
}

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| HvqError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| HvqError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| HvqError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HvqError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| HvqError::io(path, e))
}
