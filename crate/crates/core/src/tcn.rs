//! Light multi-stage temporal convolutional encoder and decoder.
//!
//! Each stage is `1×1 conv → L dilated residual layers → 1×1 conv`, where a
//! residual layer is `conv3(dilation 2^l) → ReLU → 1×1 conv → dropout → + input`.
//! Stages are chained; the last stage projects to the latent width (encoder)
//! or the feature width (decoder). The MLP decoder variant is a per-frame
//! two-layer perceptron without temporal context.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HvqError, Result};
use crate::numerics::{
    conv1d_backward, conv1d_forward, dropout_mask, relu, relu_backward, ConvShape, Param, ParamId,
    ParamStore, SeqTensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Tcn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub stages: usize,
    pub layers_per_stage: usize,
    pub hidden_channels: usize,
    pub latent_dim: usize,
    /// Feature width F. Zero means "take it from the data".
    pub input_dim: usize,
    pub dropout_rate: f64,
    pub decoder_kind: DecoderKind,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            stages: 2,
            layers_per_stage: 10,
            hidden_channels: 64,
            latent_dim: 32,
            input_dim: 0,
            dropout_rate: 0.0,
            decoder_kind: DecoderKind::Tcn,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        let problem = if self.stages == 0 {
            Some("stages must be >= 1")
        } else if self.layers_per_stage == 0 {
            Some("layers_per_stage must be >= 1")
        } else if self.layers_per_stage > 30 {
            Some("layers_per_stage must be <= 30")
        } else if self.hidden_channels == 0 {
            Some("hidden_channels must be >= 1")
        } else if self.latent_dim == 0 {
            Some("latent_dim must be >= 1")
        } else if self.input_dim == 0 {
            Some("input_dim must be >= 1")
        } else if !(0.0..1.0).contains(&self.dropout_rate) {
            Some("dropout_rate must lie in [0, 1)")
        } else {
            None
        };
        match problem {
            Some(p) => Err(HvqError::Config(format!("tcn: {p}"))),
            None => Ok(()),
        }
    }

    /// Dilation of residual layer `l` within a stage.
    pub fn dilation(layer: usize) -> usize {
        1 << layer
    }
}

/// Frames covered by a stack of `layers` width-3 convolutions with doubling dilation.
pub fn receptive_field(layers: usize) -> usize {
    2 * ((1usize << layers) - 1) + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    shape: ConvShape,
    kernel: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, shape: ConvShape, rng: &mut R) -> Self {
        let bound = 1.0 / ((shape.taps * shape.cin) as f64).sqrt();
        let kernel: Vec<f64> = (0..shape.kernel_len())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let kshape = if shape.taps == 1 {
            vec![shape.cin, shape.cout]
        } else {
            vec![shape.taps, shape.cin, shape.cout]
        };
        let kernel = store.push(Param::new(format!("{name}.weight"), kshape, kernel));
        let bias = store.push(Param::new(
            format!("{name}.bias"),
            vec![shape.cout],
            vec![0.0; shape.cout],
        ));
        ConvLayer {
            shape,
            kernel,
            bias,
        }
    }

    fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        conv1d_forward(x, store.value(self.kernel), store.value(self.bias), self.shape)
    }

    fn backward(
        &self,
        store: &mut ParamStore,
        upstream: ArrayView2<'_, f64>,
        input: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let g = conv1d_backward(upstream, input, store.value(self.kernel), self.shape)?;
        store.accumulate_grad(self.kernel, &g.kernel)?;
        store.accumulate_grad(self.bias, &g.bias)?;
        Ok(g.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualLayer {
    dilated: ConvLayer,
    pointwise: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    input: ConvLayer,
    layers: Vec<ResidualLayer>,
    output: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    Tcn(Vec<Stage>),
    Mlp { hidden: ConvLayer, output: ConvLayer },
}

struct LayerCache {
    input: Array2<f64>,
    pre_relu: Array2<f64>,
    activated: Array2<f64>,
    mask: Option<Array2<f64>>,
}

struct StageCache {
    input: Array2<f64>,
    layers: Vec<LayerCache>,
    last_hidden: Array2<f64>,
}

enum CacheKind {
    Tcn(Vec<StageCache>),
    Mlp {
        input: Array2<f64>,
        pre_relu: Array2<f64>,
        activated: Array2<f64>,
    },
}

/// Activations kept from a forward pass for the matching backward pass.
pub struct ForwardCache {
    frames: usize,
    kind: CacheKind,
}

/// One encoder or decoder: architecture plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Arch,
    pub params: ParamStore,
    in_dim: usize,
    out_dim: usize,
    dropout_rate: f64,
}

impl Network {
    fn tcn<R: Rng>(prefix: &str, cfg: &TcnConfig, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let h = cfg.hidden_channels;
        let stages = (0..cfg.stages)
            .map(|s| {
                let sin = if s == 0 { in_dim } else { out_dim };
                let name = format!("{prefix}.stage{s}");
                let input = ConvLayer::new(&mut params, &format!("{name}.in"), ConvShape::pointwise(sin, h), rng);
                let layers = (0..cfg.layers_per_stage)
                    .map(|l| ResidualLayer {
                        dilated: ConvLayer::new(
                            &mut params,
                            &format!("{name}.layer{l}.dilated"),
                            ConvShape::dilated3(h, h, TcnConfig::dilation(l)),
                            rng,
                        ),
                        pointwise: ConvLayer::new(
                            &mut params,
                            &format!("{name}.layer{l}.pointwise"),
                            ConvShape::pointwise(h, h),
                            rng,
                        ),
                    })
                    .collect();
                let output =
                    ConvLayer::new(&mut params, &format!("{name}.out"), ConvShape::pointwise(h, out_dim), rng);
                Stage {
                    input,
                    layers,
                    output,
                }
            })
            .collect();
        Network {
            arch: Arch::Tcn(stages),
            params,
            in_dim,
            out_dim,
            dropout_rate: cfg.dropout_rate,
        }
    }

    fn mlp<R: Rng>(prefix: &str, cfg: &TcnConfig, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let h = cfg.hidden_channels;
        let hidden = ConvLayer::new(&mut params, &format!("{prefix}.hidden"), ConvShape::pointwise(in_dim, h), rng);
        let output = ConvLayer::new(&mut params, &format!("{prefix}.out"), ConvShape::pointwise(h, out_dim), rng);
        Network {
            arch: Arch::Mlp { hidden, output },
            params,
            in_dim,
            out_dim,
            dropout_rate: cfg.dropout_rate,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Dilations of the residual layers in evaluation order.
    pub fn dilations(&self) -> Vec<usize> {
        match &self.arch {
            Arch::Tcn(stages) => stages
                .iter()
                .flat_map(|s| s.layers.iter().map(|l| l.dilated.shape.dilation))
                .collect(),
            Arch::Mlp { .. } => Vec::new(),
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(HvqError::Data(format!(
                "network expects {} input channels, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(HvqError::Data("empty sequence".into()));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass (no dropout, no cache).
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward_impl::<ChaCha8Rng>(x, None).map(|(y, _)| y)
    }

    /// Forward pass that keeps activations for [`Network::backward`]. Dropout
    /// is applied when `rng` is given and the configured rate is positive.
    pub fn forward_cached<R: Rng>(
        &self,
        x: ArrayView2<'_, f64>,
        rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.forward_impl(x, rng)
    }

    fn forward_impl<R: Rng>(
        &self,
        x: ArrayView2<'_, f64>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let p = &self.params;
        let frames = x.nrows();
        match &self.arch {
            Arch::Mlp { hidden, output } => {
                let pre = hidden.forward(p, x)?;
                let act = relu(pre.view());
                let out = output.forward(p, act.view())?;
                let kind = CacheKind::Mlp {
                    input: x.to_owned(),
                    pre_relu: pre,
                    activated: act,
                };
                Ok((out, ForwardCache { frames, kind }))
            }
            Arch::Tcn(stages) => {
                let mut caches = Vec::with_capacity(stages.len());
                let mut cur = x.to_owned();
                for stage in stages {
                    let mut h = stage.input.forward(p, cur.view())?;
                    let mut layers = Vec::with_capacity(stage.layers.len());
                    for layer in &stage.layers {
                        let pre = layer.dilated.forward(p, h.view())?;
                        let act = relu(pre.view());
                        let mut c = layer.pointwise.forward(p, act.view())?;
                        let mask = match rng.as_deref_mut() {
                            Some(r) if self.dropout_rate > 0.0 => {
                                let m = dropout_mask(c.nrows(), c.ncols(), self.dropout_rate, r);
                                c *= &m;
                                Some(m)
                            }
                            _ => None,
                        };
                        let next = &h + &c;
                        layers.push(LayerCache {
                            input: h,
                            pre_relu: pre,
                            activated: act,
                            mask,
                        });
                        h = next;
                    }
                    let out = stage.output.forward(p, h.view())?;
                    caches.push(StageCache {
                        input: cur,
                        layers,
                        last_hidden: h,
                    });
                    cur = out;
                }
                Ok((cur, ForwardCache {
                    frames,
                    kind: CacheKind::Tcn(caches),
                }))
            }
        }
    }

    /// Accumulates parameter gradients for `grad_out` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&mut self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if grad_out.nrows() != cache.frames || grad_out.ncols() != self.out_dim {
            return Err(HvqError::Usage(format!(
                "backward got a {}x{} gradient for a {}-frame, {}-channel forward pass",
                grad_out.nrows(),
                grad_out.ncols(),
                cache.frames,
                self.out_dim
            )));
        }
        let p = &mut self.params;
        match (&self.arch, &cache.kind) {
            (
                Arch::Mlp { hidden, output },
                CacheKind::Mlp {
                    input,
                    pre_relu,
                    activated,
                },
            ) => {
                let g_act = output.backward(p, grad_out, activated.view())?;
                let g_pre = relu_backward(g_act.view(), pre_relu.view());
                hidden.backward(p, g_pre.view(), input.view())
            }
            (Arch::Tcn(stages), CacheKind::Tcn(caches)) if stages.len() == caches.len() => {
                let mut g = grad_out.to_owned();
                for (stage, sc) in stages.iter().zip(caches).rev() {
                    let mut gh = stage.output.backward(p, g.view(), sc.last_hidden.view())?;
                    for (layer, lc) in stage.layers.iter().zip(&sc.layers).rev() {
                        let mut gc = gh.clone();
                        if let Some(m) = &lc.mask {
                            gc *= m;
                        }
                        let g_act = layer.pointwise.backward(p, gc.view(), lc.activated.view())?;
                        let g_pre = relu_backward(g_act.view(), lc.pre_relu.view());
                        let g_in = layer.dilated.backward(p, g_pre.view(), lc.input.view())?;
                        gh += &g_in;
                    }
                    g = stage.input.backward(p, gh.view(), sc.input.view())?;
                }
                Ok(g)
            }
            _ => Err(HvqError::Usage(
                "forward cache does not belong to this network".into(),
            )),
        }
    }
}

/// Encoder and decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnModel {
    pub config: TcnConfig,
    pub encoder: Network,
    pub decoder: Network,
}

impl TcnModel {
    /// Deterministically initializes both networks from `seed`: kernels
    /// uniform in ±1/√fan_in, biases zero.
    pub fn build(config: &TcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, d) = (config.input_dim, config.latent_dim);
        let encoder = Network::tcn("encoder", config, f, d, &mut rng);
        let decoder = match config.decoder_kind {
            DecoderKind::Tcn => Network::tcn("decoder", config, d, f, &mut rng),
            DecoderKind::Mlp => Network::mlp("decoder", config, d, f, &mut rng),
        };
        Ok(TcnModel {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    /// Per-frame embeddings in evaluation mode.
    pub fn encode(&self, video: &SeqTensor) -> Result<SeqTensor> {
        SeqTensor::new(self.encoder.forward(video.view())?)
    }

    /// Reconstruction from per-frame latents in evaluation mode.
    pub fn decode(&self, latents: &SeqTensor) -> Result<SeqTensor> {
        SeqTensor::new(self.decoder.forward(latents.view())?)
    }

    pub fn zero_grad(&mut self) {
        self.encoder.params.zero_grad();
        self.decoder.params.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, DEFAULT_FD_EPS};
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn small(decoder_kind: DecoderKind) -> TcnConfig {
        TcnConfig {
            stages: 2,
            layers_per_stage: 3,
            hidden_channels: 4,
            latent_dim: 3,
            input_dim: 5,
            dropout_rate: 0.0,
            decoder_kind,
        }
    }

    fn random(t: usize, c: usize, seed: u64) -> SeqTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqTensor::new(Array2::from_shape_simple_fn((t, c), || StandardNormal.sample(&mut rng))).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small(DecoderKind::Tcn);
        assert_eq!(TcnModel::build(&cfg, 7).unwrap(), TcnModel::build(&cfg, 7).unwrap());
        assert_ne!(TcnModel::build(&cfg, 7).unwrap(), TcnModel::build(&cfg, 8).unwrap());
    }

    #[test]
    fn widths_follow_config() {
        let cfg = TcnConfig {
            input_dim: 64,
            layers_per_stage: 2,
            hidden_channels: 8,
            ..TcnConfig::default()
        };
        let model = TcnModel::build(&cfg, 0).unwrap();
        let x = random(9, 64, 1);
        let e = model.encode(&x).unwrap();
        assert_eq!((e.frames(), e.channels()), (9, 32));
        let r = model.decode(&e).unwrap();
        assert_eq!((r.frames(), r.channels()), (9, 64));
    }

    #[test]
    fn default_dilations() {
        let cfg = TcnConfig {
            input_dim: 4,
            hidden_channels: 2,
            ..TcnConfig::default()
        };
        let model = TcnModel::build(&cfg, 0).unwrap();
        let d = model.encoder.dilations();
        assert_eq!(d.len(), 20);
        let stage: Vec<usize> = (0..10).map(|l| 1 << l).collect();
        assert_eq!(&d[..10], &stage[..]);
        assert_eq!(&d[10..], &stage[..]);
        assert_eq!(d[9], 512);
        assert_eq!(receptive_field(10), 2047);
    }

    #[test]
    fn single_frame_video() {
        let model = TcnModel::build(&small(DecoderKind::Tcn), 3).unwrap();
        let e = model.encode(&random(1, 5, 2)).unwrap();
        assert_eq!(e.frames(), 1);
    }

    #[test]
    fn wrong_width_is_data_error() {
        let model = TcnModel::build(&small(DecoderKind::Tcn), 3).unwrap();
        let err = model.encode(&random(4, 6, 2)).unwrap_err();
        assert!(matches!(err, HvqError::Data(_)));
        let err = model.decode(&random(4, 5, 2)).unwrap_err();
        assert!(matches!(err, HvqError::Data(_)));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small(DecoderKind::Tcn);
        cfg.stages = 0;
        assert!(TcnModel::build(&cfg, 0).is_err());
        let mut cfg = small(DecoderKind::Tcn);
        cfg.dropout_rate = 1.0;
        assert!(TcnModel::build(&cfg, 0).is_err());
    }

    #[test]
    fn eval_ignores_dropout_rate() {
        let mut cfg = small(DecoderKind::Tcn);
        cfg.dropout_rate = 0.5;
        let model = TcnModel::build(&cfg, 3).unwrap();
        let x = random(12, 5, 4);
        assert_eq!(model.encode(&x).unwrap(), model.encode(&x).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train_out, _) = model.encoder.forward_cached(x.view(), Some(&mut rng)).unwrap();
        assert_ne!(&train_out, model.encode(&x).unwrap().as_array());
    }

    #[test]
    fn constant_input_tcn_decoder_is_finite() {
        let model = TcnModel::build(&small(DecoderKind::Tcn), 5).unwrap();
        let z = SeqTensor::new(Array2::from_elem((30, 3), 0.7)).unwrap();
        let r = model.decode(&z).unwrap();
        assert!(r.as_array().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mlp_decoder_is_frame_local() {
        let model = TcnModel::build(&small(DecoderKind::Mlp), 5).unwrap();
        let z = random(8, 3, 9);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let a = model.decode(&z.select_frames(&perm)).unwrap();
        let b = model.decode(&z).unwrap().select_frames(&perm);
        assert!((a.as_array() - b.as_array()).iter().all(|d| d.abs() < 1e-12));
    }

    fn mean_output_check(net: &mut Network, x: &SeqTensor) -> f64 {
        let x = x.clone();
        let mut params = std::mem::take(&mut net.params);
        let probe = net.clone();
        let err = finite_diff_check(&mut params, DEFAULT_FD_EPS, |p| {
            let mut n = probe.clone();
            n.params = p.clone();
            n.params.zero_grad();
            let (y, cache) = n.forward_cached::<ChaCha8Rng>(x.view(), None)?;
            let scale = 1.0 / y.len() as f64;
            // weighted mean so that the upstream gradient is not constant
            let w = Array2::from_shape_fn(y.dim(), |(t, c)| scale * (1.0 + 0.1 * (t + 2 * c) as f64));
            let loss = (&y * &w).sum();
            n.backward(&cache, w.view())?;
            for (dst, src) in p.params.iter_mut().zip(&n.params.params) {
                dst.grad.clone_from(&src.grad);
            }
            Ok(loss)
        })
        .unwrap();
        net.params = params;
        err
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut model = TcnModel::build(&small(DecoderKind::Tcn), seed).unwrap();
            let x = random(16, 5, 100 + seed);
            let err = mean_output_check(&mut model.encoder, &x);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        for kind in [DecoderKind::Tcn, DecoderKind::Mlp] {
            let mut model = TcnModel::build(&small(kind), 11).unwrap();
            let z = random(7, 3, 12);
            let err = mean_output_check(&mut model.decoder, &z);
            assert!(err < 1e-4, "{kind:?}: relative error {err}");
        }
    }

    #[test]
    fn foreign_cache_is_usage_error() {
        let mut a = TcnModel::build(&small(DecoderKind::Tcn), 1).unwrap();
        let b = TcnModel::build(&small(DecoderKind::Mlp), 1).unwrap();
        let z = random(5, 3, 2);
        let (y, cache) = b.decoder.forward_cached::<ChaCha8Rng>(z.view(), None).unwrap();
        let err = a.decoder.backward(&cache, y.view()).unwrap_err();
        assert!(matches!(err, HvqError::Usage(_)));
    }

    #[test]
    fn impulse_reach_equals_receptive_field() {
        // all-positive weights keep every ReLU active so reach is exact
        let cfg = TcnConfig {
            stages: 1,
            layers_per_stage: 4,
            hidden_channels: 2,
            latent_dim: 1,
            input_dim: 1,
            ..TcnConfig::default()
        };
        let mut model = TcnModel::build(&cfg, 0).unwrap();
        for p in &mut model.encoder.params.params {
            p.value.iter_mut().for_each(|v| *v = v.abs() + 0.01);
        }
        let t = 64;
        let mut impulse = Array2::zeros((t, 1));
        impulse[[32, 0]] = 1.0;
        let base = model.encoder.forward(Array2::zeros((t, 1)).view()).unwrap();
        let out = model.encoder.forward(impulse.view()).unwrap();
        let touched: Vec<usize> = (0..t).filter(|&i| (out[[i, 0]] - base[[i, 0]]).abs() > 0.0).collect();
        let reach = touched.last().unwrap() - touched.first().unwrap() + 1;
        assert_eq!(reach, receptive_field(4));
    }
}
