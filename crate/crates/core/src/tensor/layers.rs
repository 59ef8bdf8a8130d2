//! Layer vocabulary, bundled architecture presets and the network forward
//! pass (deterministic and Flipout).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{kl_grad, kl_to_std_normal, softplus_inv, Gradients, Graph, Tensor, TensorError, Var};
use crate::grid::INTERIOR_FILL;
use crate::rng::{Stream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    FillRandom,
    Conv2D {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    Conv2DFlipout {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    MaxPool2D,
    UpSampling2D,
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    DenseFlipout {
        units: usize,
        activation: Activation,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::FillRandom => "FillRandom",
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::Conv2DFlipout { .. } => "Conv2DFlipout",
            LayerSpec::MaxPool2D => "MaxPool2D",
            LayerSpec::UpSampling2D => "UpSampling2D",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::DenseFlipout { .. } => "DenseFlipout",
            LayerSpec::Reshape { .. } => "Reshape",
        }
    }

    pub fn is_flipout(&self) -> bool {
        matches!(self, LayerSpec::Conv2DFlipout { .. } | LayerSpec::DenseFlipout { .. })
    }

    fn conv(filters: usize) -> Self {
        LayerSpec::Conv2D {
            filters,
            kernel: 5,
            activation: Activation::Relu,
        }
    }

    fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            activation: Activation::Relu,
        }
    }
}

/// Per-sample input shape plus the layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Shapes of the trainable tensors of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerParamShapes {
    kernel: Vec<usize>,
    bias: usize,
    flipout: bool,
}

impl Architecture {
    /// Per-sample output shape after every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, TensorError> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = self.input.clone();
        let bad = |l: usize, s: &LayerSpec, cur: &[usize]| {
            TensorError::Architecture(format!("layer {l} ({}) cannot take input {cur:?}", s.name()))
        };
        for (l, spec) in self.layers.iter().enumerate() {
            cur = match spec {
                LayerSpec::FillRandom => cur,
                LayerSpec::Conv2D { filters, kernel, .. }
                | LayerSpec::Conv2DFlipout { filters, kernel, .. } => match cur[..] {
                    [h, w, _] if kernel % 2 == 1 => vec![h, w, *filters],
                    _ => return Err(bad(l, spec, &cur)),
                },
                LayerSpec::MaxPool2D => match cur[..] {
                    [h, w, c] => vec![h.div_ceil(2), w.div_ceil(2), c],
                    _ => return Err(bad(l, spec, &cur)),
                },
                LayerSpec::UpSampling2D => match cur[..] {
                    [h, w, c] => vec![2 * h, 2 * w, c],
                    _ => return Err(bad(l, spec, &cur)),
                },
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Dense { units, .. } | LayerSpec::DenseFlipout { units, .. } => {
                    match cur[..] {
                        [_] => vec![*units],
                        _ => return Err(bad(l, spec, &cur)),
                    }
                }
                LayerSpec::Reshape { shape } => {
                    if shape.iter().product::<usize>() != cur.iter().product::<usize>() {
                        return Err(bad(l, spec, &cur));
                    }
                    shape.clone()
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, TensorError> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input.clone()))
    }

    fn param_shapes(&self) -> Result<Vec<Option<LayerParamShapes>>, TensorError> {
        let shapes = self.shapes()?;
        let mut prev = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (spec, shape) in self.layers.iter().zip(&shapes) {
            out.push(match spec {
                LayerSpec::Conv2D { filters, kernel, .. }
                | LayerSpec::Conv2DFlipout { filters, kernel, .. } => Some(LayerParamShapes {
                    kernel: vec![*kernel, *kernel, prev[2], *filters],
                    bias: *filters,
                    flipout: spec.is_flipout(),
                }),
                LayerSpec::Dense { units, .. } | LayerSpec::DenseFlipout { units, .. } => {
                    Some(LayerParamShapes {
                        kernel: vec![prev[0], *units],
                        bias: *units,
                        flipout: spec.is_flipout(),
                    })
                }
                _ => None,
            });
            prev = shape.clone();
        }
        Ok(out)
    }

    /// Trainable scalars: kernels and biases, plus one spread per kernel
    /// entry in Flipout layers.
    pub fn param_count(&self) -> Result<usize, TensorError> {
        Ok(self
            .param_shapes()?
            .into_iter()
            .flatten()
            .map(|p| {
                let k: usize = p.kernel.iter().product();
                k * if p.flipout { 2 } else { 1 } + p.bias
            })
            .sum())
    }

    pub fn is_variational(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_flipout)
    }

    /// Same stack with every Conv2D/Dense replaced by its Flipout twin.
    pub fn variational(&self) -> Architecture {
        let layers = self
            .layers
            .iter()
            .map(|l| match l.clone() {
                LayerSpec::Conv2D {
                    filters,
                    kernel,
                    activation,
                } => LayerSpec::Conv2DFlipout {
                    filters,
                    kernel,
                    activation,
                },
                LayerSpec::Dense { units, activation } => LayerSpec::DenseFlipout { units, activation },
                other => other,
            })
            .collect();
        Architecture {
            input: self.input.clone(),
            layers,
        }
    }

    /// Same stack with Flipout layers replaced by their deterministic twins.
    pub fn deterministic(&self) -> Architecture {
        let layers = self
            .layers
            .iter()
            .map(|l| match l.clone() {
                LayerSpec::Conv2DFlipout {
                    filters,
                    kernel,
                    activation,
                } => LayerSpec::Conv2D {
                    filters,
                    kernel,
                    activation,
                },
                LayerSpec::DenseFlipout { units, activation } => LayerSpec::Dense { units, activation },
                other => other,
            })
            .collect();
        Architecture {
            input: self.input.clone(),
            layers,
        }
    }

    /// Standard encoder-decoder: fill, `enc` conv+pool stages, two dense
    /// layers, reshape, `dec` conv+upsample stages, two output convs.
    fn encoder_decoder(
        input: [usize; 3],
        enc: &[usize],
        dense: [usize; 2],
        reshape: [usize; 3],
        dec: &[usize],
        tail: [usize; 2],
    ) -> Architecture {
        let mut layers = vec![LayerSpec::FillRandom];
        for &f in enc {
            layers.push(LayerSpec::conv(f));
            layers.push(LayerSpec::MaxPool2D);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::dense(dense[0]));
        layers.push(LayerSpec::dense(dense[1]));
        layers.push(LayerSpec::Reshape {
            shape: reshape.to_vec(),
        });
        for &f in dec {
            layers.push(LayerSpec::conv(f));
            layers.push(LayerSpec::UpSampling2D);
        }
        layers.push(LayerSpec::conv(tail[0]));
        layers.push(LayerSpec::conv(tail[1]));
        Architecture {
            input: input.to_vec(),
            layers,
        }
    }
}

/// Bundled architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// Rectangle diffusion suite, 16 x 16.
    #[serde(rename = "diffusion")]
    Diffusion,
    /// Rectangle elasticity suites, 16 x 16, two components.
    #[serde(rename = "elasticity")]
    Elasticity,
    /// Octagon diffusion, 32 x 32.
    #[serde(rename = "octagon")]
    Octagon,
    /// L-shape elasticity, 32 x 32.
    #[serde(rename = "lshape")]
    LShape,
    /// Octagon diffusion on a 64 x 64 grid (one more decoder stage).
    #[serde(rename = "octagon-64")]
    Octagon64,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Diffusion,
        Preset::Elasticity,
        Preset::Octagon,
        Preset::LShape,
        Preset::Octagon64,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Diffusion => "diffusion",
            Preset::Elasticity => "elasticity",
            Preset::Octagon => "octagon",
            Preset::LShape => "lshape",
            Preset::Octagon64 => "octagon-64",
        }
    }

    /// Deterministic layer stack.
    pub fn architecture(&self) -> Architecture {
        match self {
            Preset::Diffusion => Architecture::encoder_decoder(
                [16, 16, 2],
                &[8, 16, 16],
                [64, 64],
                [4, 4, 4],
                &[16, 16],
                [16, 1],
            ),
            Preset::Elasticity => Architecture::encoder_decoder(
                [16, 16, 4],
                &[8, 16, 16],
                [64, 64],
                [4, 4, 4],
                &[16, 16],
                [16, 2],
            ),
            Preset::Octagon => Architecture::encoder_decoder(
                [32, 32, 2],
                &[8, 8, 8],
                [32, 32],
                [4, 4, 2],
                &[8, 8, 8],
                [16, 1],
            ),
            Preset::LShape => Architecture::encoder_decoder(
                [32, 32, 4],
                &[8, 8, 16],
                [32, 128],
                [4, 4, 8],
                &[16, 16, 16],
                [16, 2],
            ),
            Preset::Octagon64 => Architecture::encoder_decoder(
                [64, 64, 2],
                &[8, 8, 8],
                [32, 32],
                [4, 4, 2],
                &[8, 8, 8, 8],
                [16, 1],
            ),
        }
    }

    pub fn deterministic_count(&self) -> usize {
        self.architecture().param_count().expect("preset is consistent")
    }

    /// Flipout stack plus the learnable residual variance.
    pub fn probabilistic_count(&self) -> usize {
        self.architecture()
            .variational()
            .param_count()
            .expect("preset is consistent")
            + 1
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| TensorError::Architecture(format!("unknown preset '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Kernel,
    Bias,
    /// Pre-softplus spread of a Flipout kernel.
    Rho,
}

/// One trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub layer: usize,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Base perturbation `eps ~ N(0, 1)` per Flipout kernel, shared by all
/// examples of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipoutNoise {
    eps: Vec<Option<Vec<f64>>>,
}

impl FlipoutNoise {
    pub fn sample(net: &Network, key: StreamKey) -> Self {
        let eps = net
            .arch
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                if !spec.is_flipout() {
                    return None;
                }
                let (k, _, _) = net.slots[l].expect("flipout layer has params");
                let n = net.params[k].tensor.len();
                let mut rng = key.layer(l as u64).rng(Stream::FlipoutNoise);
                Some((0..n).map(|_| rng.sample(StandardNormal)).collect())
            })
            .collect();
        Self { eps }
    }
}

/// Randomness for one forward pass over a batch whose first row is
/// example number `example` of the current batch.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub key: StreamKey,
    pub example: u64,
    /// Flipout base noise; `None` evaluates variational layers at their means.
    pub noise: Option<&'a FlipoutNoise>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(key: StreamKey) -> Self {
        Self {
            key,
            example: 0,
            noise: None,
        }
    }

    pub fn example(mut self, example: u64) -> Self {
        self.example = example;
        self
    }

    pub fn noise(mut self, noise: &'a FlipoutNoise) -> Self {
        self.noise = Some(noise);
        self
    }
}

/// Replace every interior sentinel by a fresh `U[0, 1)` draw. Row `n` of the
/// batch uses the stream of example `ctx.example + n`.
pub fn fill_random(x: &Tensor, key: StreamKey, example: u64) -> Tensor {
    let n = x.shape.first().copied().unwrap_or(1).max(1);
    let per = x.len() / n;
    let mut out = x.clone();
    for (b, row) in out.data.chunks_mut(per).enumerate() {
        let mut rng = key.call(example + b as u64).rng(Stream::Fill);
        for v in row.iter_mut() {
            if *v == INTERIOR_FILL {
                *v = rng.gen::<f64>();
            }
        }
    }
    out
}

/// Weights of an [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub params: Vec<Param>,
    /// Per layer: indices of (kernel, bias, rho) in `params`.
    slots: Vec<Option<(usize, usize, Option<usize>)>>,
}

fn glorot(shape: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let (fan_in, fan_out) = match shape {
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        [f, u] => (*f, *u),
        _ => unreachable!("kernel rank"),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Initial Flipout spread.
pub const SIGMA_INIT: f64 = 1e-3;

impl Network {
    /// Glorot-uniform kernels, zero biases, spreads at [`SIGMA_INIT`].
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, TensorError> {
        let shapes = arch.param_shapes()?;
        let mut params = Vec::new();
        for (l, ps) in shapes.iter().enumerate() {
            let Some(ps) = ps else { continue };
            let mut rng = StreamKey::new(seed).layer(l as u64).rng(Stream::Init);
            params.push(Param {
                layer: l,
                kind: ParamKind::Kernel,
                tensor: Tensor::new(ps.kernel.clone(), glorot(&ps.kernel, &mut rng)),
            });
            params.push(Param {
                layer: l,
                kind: ParamKind::Bias,
                tensor: Tensor::zeros(vec![ps.bias]),
            });
            if ps.flipout {
                params.push(Param {
                    layer: l,
                    kind: ParamKind::Rho,
                    tensor: Tensor::filled(ps.kernel.clone(), softplus_inv(SIGMA_INIT)),
                });
            }
        }
        Self::from_params(arch, params)
    }

    /// Assemble from explicit tensors, checking them against `arch`.
    pub fn from_params(arch: Architecture, params: Vec<Param>) -> Result<Self, TensorError> {
        let shapes = arch.param_shapes()?;
        let mut slots = vec![None; arch.layers.len()];
        let mut it = params.iter().enumerate().peekable();
        for (l, ps) in shapes.iter().enumerate() {
            let Some(ps) = ps else { continue };
            let mut take = |kind: ParamKind, shape: &[usize]| -> Result<usize, TensorError> {
                match it.next() {
                    Some((i, p)) if p.layer == l && p.kind == kind && p.tensor.shape == shape => Ok(i),
                    Some((_, p)) => Err(TensorError::Architecture(format!(
                        "layer {l}: expected {kind:?} {shape:?}, found {:?} {:?} of layer {}",
                        p.kind, p.tensor.shape, p.layer
                    ))),
                    None => Err(TensorError::Architecture(format!("layer {l}: missing {kind:?}"))),
                }
            };
            let k = take(ParamKind::Kernel, &ps.kernel)?;
            let b = take(ParamKind::Bias, &[ps.bias])?;
            let r = if ps.flipout {
                Some(take(ParamKind::Rho, &ps.kernel)?)
            } else {
                None
            };
            slots[l] = Some((k, b, r));
        }
        if it.peek().is_some() {
            return Err(TensorError::Architecture("surplus parameter tensors".into()));
        }
        Ok(Self { arch, params, slots })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn is_variational(&self) -> bool {
        self.arch.is_variational()
    }

    /// Flipout twin whose means are this network's weights and whose
    /// spreads all equal `sigma`.
    pub fn to_variational(&self, sigma: f64) -> Result<Network, TensorError> {
        if self.is_variational() {
            return Err(TensorError::Architecture("network is already variational".into()));
        }
        let arch = self.arch.variational();
        let mut params = Vec::new();
        for p in &self.params {
            params.push(p.clone());
            if p.kind == ParamKind::Bias {
                let (k, _, _) = self.slots[p.layer].expect("slot");
                params.push(Param {
                    layer: p.layer,
                    kind: ParamKind::Rho,
                    tensor: Tensor::filled(
                        self.params[k].tensor.shape.clone(),
                        softplus_inv(sigma),
                    ),
                });
            }
        }
        Network::from_params(arch, params)
    }

    /// Mean weights as a deterministic network.
    pub fn mean_network(&self) -> Network {
        let params = self
            .params
            .iter()
            .filter(|p| p.kind != ParamKind::Rho)
            .cloned()
            .collect();
        Network::from_params(self.arch.deterministic(), params).expect("mean weights fit")
    }

    /// Register every parameter tensor on `g`: as leaves when `trainable`,
    /// as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    /// Record the forward pass of `input` (`N x input shape`) on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &[Var],
        input: &Tensor,
        ctx: &ForwardCtx,
    ) -> Result<Var, TensorError> {
        if input.shape.len() != self.arch.input.len() + 1 || input.shape[1..] != self.arch.input[..] {
            return Err(TensorError::Shape {
                op: "forward",
                detail: format!("input {:?} for architecture input {:?}", input.shape, self.arch.input),
            });
        }
        let n = input.shape[0];
        let mut x = g.constant(input.clone());
        for (l, spec) in self.arch.layers.iter().enumerate() {
            let lkey = ctx.key.layer(l as u64);
            x = match spec {
                LayerSpec::FillRandom => {
                    let filled = fill_random(g.value(x), lkey, ctx.example);
                    g.constant(filled)
                }
                LayerSpec::Conv2D { activation, .. } | LayerSpec::Dense { activation, .. } => {
                    let (k, b, _) = self.slots[l].expect("slot");
                    let y = if matches!(spec, LayerSpec::Conv2D { .. }) {
                        g.conv2d(x, pv[k], Some(pv[b]))?
                    } else {
                        g.dense(x, pv[k], Some(pv[b]))?
                    };
                    activate(g, y, *activation)
                }
                LayerSpec::Conv2DFlipout { activation, .. }
                | LayerSpec::DenseFlipout { activation, .. } => {
                    let conv = matches!(spec, LayerSpec::Conv2DFlipout { .. });
                    let (k, b, r) = self.slots[l].expect("slot");
                    let mean = if conv {
                        g.conv2d(x, pv[k], Some(pv[b]))?
                    } else {
                        g.dense(x, pv[k], Some(pv[b]))?
                    };
                    let y = match ctx.noise.and_then(|nz| nz.eps[l].as_ref()) {
                        None => mean,
                        Some(eps) => {
                            let sigma = g.softplus(pv[r.expect("rho")]);
                            let dw = g.mul_const(sigma, eps.clone());
                            let kshape = &self.params[k].tensor.shape;
                            let (cin, cout) = (kshape[kshape.len() - 2], kshape[kshape.len() - 1]);
                            let (s, rs) = sign_masks(
                                g.shape(x),
                                g.shape(mean),
                                cin,
                                cout,
                                lkey,
                                ctx.example,
                                n,
                            );
                            let xs = g.mul_const(x, s);
                            let pert = if conv {
                                g.conv2d(xs, dw, None)?
                            } else {
                                g.dense(xs, dw, None)?
                            };
                            let pert = g.mul_const(pert, rs);
                            g.add(mean, pert)?
                        }
                    };
                    activate(g, y, *activation)
                }
                LayerSpec::MaxPool2D => g.maxpool2(x)?,
                LayerSpec::UpSampling2D => g.upsample2(x)?,
                LayerSpec::Flatten => g.flatten(x)?,
                LayerSpec::Reshape { shape } => {
                    let mut s = vec![n];
                    s.extend_from_slice(shape);
                    g.reshape(x, s)?
                }
            };
        }
        Ok(x)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, input: &Tensor, ctx: &ForwardCtx) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let y = self.forward(&mut g, &pv, input, ctx)?;
        Ok(g.value(y).clone())
    }

    /// Gradients of every parameter tensor in `params` order (zeros where
    /// the loss does not depend on a tensor).
    pub fn collect_grads(&self, grads: &mut Gradients, pv: &[Var]) -> Vec<Vec<f64>> {
        pv.iter()
            .zip(&self.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
            .collect()
    }

    /// KL divergence of all Flipout kernels from the standard normal prior.
    pub fn kl(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .filter_map(|(k, _, r)| {
                r.map(|r| kl_to_std_normal(&self.params[*k].tensor.data, &self.params[r].tensor.data))
            })
            .sum()
    }

    /// Add `scale * dKL/dparam` into `grads`.
    pub fn add_kl_grad(&self, scale: f64, grads: &mut [Vec<f64>]) {
        for (k, _, r) in self.slots.iter().flatten() {
            let Some(r) = r else { continue };
            let (gk, gr) = if k < r {
                let (a, b) = grads.split_at_mut(*r);
                (&mut a[*k], &mut b[0])
            } else {
                let (a, b) = grads.split_at_mut(*k);
                (&mut b[0], &mut a[*r])
            };
            kl_grad(
                &self.params[*k].tensor.data,
                &self.params[*r].tensor.data,
                scale,
                gk,
                gr,
            );
        }
    }
}

fn activate(g: &mut Graph, y: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => g.relu(y),
        Activation::Linear => y,
    }
}

/// Expanded sign tensors: `s` over input channels (shape of `x`) and `r`
/// over output channels (shape of `y`), one independent pair per example.
fn sign_masks(
    xshape: &[usize],
    yshape: &[usize],
    cin: usize,
    cout: usize,
    key: StreamKey,
    example: u64,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let xper: usize = xshape[1..].iter().product();
    let yper: usize = yshape[1..].iter().product();
    let mut s = Vec::with_capacity(n * xper);
    let mut r = Vec::with_capacity(n * yper);
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    for b in 0..n {
        let mut rng = key.call(example + b as u64).rng(Stream::FlipoutSigns);
        let sv: Vec<f64> = (0..cin).map(|_| sign(rng.gen())).collect();
        let rv: Vec<f64> = (0..cout).map(|_| sign(rng.gen())).collect();
        s.extend((0..xper).map(|i| sv[i % cin]));
        r.extend((0..yper).map(|i| rv[i % cout]));
    }
    (s, r)
}
