use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{HvqError, Result};

/// Per-frame matrix: one row per frame, one column per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTensor(Array2<f64>);

impl SeqTensor {
    /// Wraps a matrix after checking that it has at least one frame, at least
    /// one channel, and only finite entries.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (t, c) = data.dim();
        if t == 0 || c == 0 {
            return Err(HvqError::Data(format!(
                "sequence tensor must be non-empty, got {t}x{c}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HvqError::NonFinite(format!(
                "entry ({}, {}) of a {t}x{c} tensor",
                pos / c,
                pos % c
            )));
        }
        Ok(SeqTensor(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(HvqError::Data("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((t, c), flat)
            .map_err(|e| HvqError::Data(e.to_string()))?;
        Self::new(data)
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        SeqTensor(Array2::zeros((frames, channels)))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn channels(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.0.row(t)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Copy of the frames given by `order`.
    pub fn select_frames(&self, order: &[usize]) -> SeqTensor {
        SeqTensor(self.0.select(ndarray::Axis(0), order))
    }
}

impl AsRef<Array2<f64>> for SeqTensor {
    fn as_ref(&self) -> &Array2<f64> {
        &self.0
    }
}
