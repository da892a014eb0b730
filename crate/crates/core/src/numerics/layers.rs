//! Forward and backward passes for the layer types used by the temporal
//! convolutional network: dilated 1-D convolution (width 3 or 1), ReLU and
//! inverted dropout.
//!
//! Convolution kernels are stored flat, tap-major: `kernel[k][ci][co]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Zip};
use rand::Rng;

use super::tensor::SeqTensor;
use crate::error::{HvqError, Result};

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub taps: usize,
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn dilated3(cin: usize, cout: usize, dilation: usize) -> Self {
        ConvShape {
            taps: 3,
            cin,
            cout,
            dilation,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvShape {
            taps: 1,
            cin,
            cout,
            dilation: 1,
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.taps * self.cin * self.cout
    }

    fn offset(&self, tap: usize) -> isize {
        (tap as isize - (self.taps / 2) as isize) * self.dilation as isize
    }

    fn validate(&self, x_cols: usize, kernel: &[f64], bias_len: usize) -> Result<()> {
        if self.taps % 2 == 0 || self.dilation == 0 {
            return Err(HvqError::Config(format!(
                "convolution needs an odd tap count and dilation >= 1, got {self:?}"
            )));
        }
        if x_cols != self.cin || kernel.len() != self.kernel_len() || bias_len != self.cout {
            return Err(HvqError::Config(format!(
                "convolution shape mismatch: input width {x_cols}, kernel len {}, bias len {bias_len} for {self:?}",
                kernel.len()
            )));
        }
        Ok(())
    }

    fn tap<'a>(&self, kernel: &'a [f64], tap: usize) -> ArrayView2<'a, f64> {
        let n = self.cin * self.cout;
        ArrayView2::from_shape((self.cin, self.cout), &kernel[tap * n..(tap + 1) * n])
            .expect("kernel slice has tap size")
    }
}

/// Output rows `[lo, hi)` that read a valid input row at `offset`.
fn valid_rows(t: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (t as isize - offset.max(0)).max(0) as usize;
    (lo.min(t), hi.max(lo.min(t)))
}

/// `out[t] = bias + Σ_k x[t + offset_k] · W_k` with zero padding.
pub fn conv1d_forward(
    x: ArrayView2<'_, f64>,
    kernel: &[f64],
    bias: &[f64],
    shape: ConvShape,
) -> Result<Array2<f64>> {
    shape.validate(x.ncols(), kernel, bias.len())?;
    let t = x.nrows();
    let mut out = Array2::zeros((t, shape.cout));
    for mut row in out.rows_mut() {
        row.iter_mut().zip(bias).for_each(|(o, b)| *o = *b);
    }
    for tap in 0..shape.taps {
        let off = shape.offset(tap);
        let (lo, hi) = valid_rows(t, off);
        if lo >= hi {
            continue;
        }
        let src = x.slice(s![(lo as isize + off)..(hi as isize + off), ..]);
        let mut dst = out.slice_mut(s![lo..hi, ..]);
        general_mat_mul(1.0, &src, &shape.tap(kernel, tap), 1.0, &mut dst);
    }
    Ok(out)
}

/// Gradients of [`conv1d_forward`].
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Array2<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv1d_backward(
    upstream: ArrayView2<'_, f64>,
    input: ArrayView2<'_, f64>,
    kernel: &[f64],
    shape: ConvShape,
) -> Result<ConvGrads> {
    shape.validate(input.ncols(), kernel, upstream.ncols())?;
    if upstream.nrows() != input.nrows() {
        return Err(HvqError::Usage(format!(
            "upstream gradient has {} frames but the cached input has {}",
            upstream.nrows(),
            input.nrows()
        )));
    }
    let t = input.nrows();
    let mut grad_in = Array2::zeros((t, shape.cin));
    let mut grad_k = vec![0.0; shape.kernel_len()];
    let n = shape.cin * shape.cout;
    for tap in 0..shape.taps {
        let off = shape.offset(tap);
        let (lo, hi) = valid_rows(t, off);
        if lo >= hi {
            continue;
        }
        let src = input.slice(s![(lo as isize + off)..(hi as isize + off), ..]);
        let g = upstream.slice(s![lo..hi, ..]);
        let mut gk = ndarray::ArrayViewMut2::from_shape(
            (shape.cin, shape.cout),
            &mut grad_k[tap * n..(tap + 1) * n],
        )
        .expect("kernel slice has tap size");
        general_mat_mul(1.0, &src.t(), &g, 1.0, &mut gk);
        let mut gi = grad_in.slice_mut(s![(lo as isize + off)..(hi as isize + off), ..]);
        general_mat_mul(1.0, &g, &shape.tap(kernel, tap).t(), 1.0, &mut gi);
    }
    let bias = upstream.sum_axis(ndarray::Axis(0)).to_vec();
    Ok(ConvGrads {
        input: grad_in,
        kernel: grad_k,
        bias,
    })
}

/// Width-3 dilated convolution on a [`SeqTensor`]; output length equals input length.
pub fn dilated_conv1d_forward(
    x: &SeqTensor,
    kernel: &[f64],
    bias: &[f64],
    dilation: usize,
) -> Result<SeqTensor> {
    let shape = ConvShape::dilated3(x.channels(), bias.len(), dilation);
    SeqTensor::new(conv1d_forward(x.view(), kernel, bias, shape)?)
}

/// Backward pass of [`dilated_conv1d_forward`].
pub fn dilated_conv1d_backward(
    upstream: &SeqTensor,
    cached_input: &SeqTensor,
    kernel: &[f64],
    dilation: usize,
) -> Result<ConvGrads> {
    let shape = ConvShape::dilated3(cached_input.channels(), upstream.channels(), dilation);
    conv1d_backward(upstream.view(), cached_input.view(), kernel, shape)
}

pub fn relu(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(upstream: ArrayView2<'_, f64>, cached_input: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = upstream.to_owned();
    Zip::from(&mut out)
        .and(&cached_input)
        .for_each(|g, &x| {
            if x <= 0.0 {
                *g = 0.0
            }
        });
    out
}

/// Inverted-dropout mask: kept entries carry `1 / (1 - rate)`, dropped ones 0.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}
