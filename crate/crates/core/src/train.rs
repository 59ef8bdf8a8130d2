//! Residual-driven training of deterministic and Flipout surrogates.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BcImage, Dataset};
use crate::par::{self, Exec};
use crate::physics::PhysicsModel;
use crate::residual::{ResidualError, ResidualProblem};
use crate::rng::{Stream, StreamKey};
use crate::tensor::{
    write_checkpoint, Architecture, FlipoutNoise, ForwardCtx, Graph, Network, ParamKind, Tensor,
    TensorError,
};

/// Bounds of the learnable `ln Sigma2`.
pub const LOG_SIGMA2_MIN: f64 = -27.631_021_115_928_547; // ln 1e-12
pub const LOG_SIGMA2_MAX: f64 = 4.605_170_185_988_092; // ln 1e2

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-7;

/// Consecutive batches above the clamp threshold before a warning.
pub const CLAMP_STREAK: usize = 10;
pub const CLAMP_FRACTION: f64 = 0.5;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {name} (entry {index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}; last good state: {checkpoint:?}")]
    Diverged {
        epoch: usize,
        batch: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("warm start does not match the architecture: {0}")]
    WarmStart(String),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Nadam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub zero_init_epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Aleatoric output variance added to predictive variances.
    pub sigma1: f64,
    pub sigma2_init: f64,
    pub seed: u64,
    /// Samples per tape; chunks of one batch are evaluated independently.
    pub chunk_size: usize,
    /// Write an epoch checkpoint every this many epochs (0: none).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validation cadence in epochs (0: never).
    pub validate_every: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::deterministic()
    }
}

impl TrainConfig {
    /// Deterministic defaults of the reference setup.
    pub fn deterministic() -> Self {
        Self {
            epochs: 20_000,
            zero_init_epochs: 100,
            optimizer: OptimizerKind::Nadam,
            learning_rate: 2.5e-4,
            batch_size: 256,
            sigma1: 1e-8,
            sigma2_init: 1e-8,
            seed: 0,
            chunk_size: 8,
            checkpoint_every: 0,
            checkpoint_dir: None,
            validate_every: 1,
            exec: Exec::default(),
        }
    }

    /// Warm-started Bayesian defaults of the reference setup.
    pub fn bayesian() -> Self {
        Self {
            epochs: 100,
            zero_init_epochs: 0,
            learning_rate: 1e-8,
            batch_size: 64,
            ..Self::deterministic()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.sigma1 > 0.0 && self.sigma2_init > 0.0) {
            return bad("sigma1 and sigma2_init must be positive");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1");
        }
        if self.zero_init_epochs > self.epochs {
            return bad("zero_init_epochs exceeds epochs");
        }
        Ok(())
    }
}

/// Adam or Nadam over a list of flat parameter slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            kind,
            learning_rate,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `names` label slots in error messages.
    pub fn update(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        names: &[String],
    ) -> Result<(), TrainError> {
        for (s, g) in grads.iter().enumerate() {
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    name: names.get(s).cloned().unwrap_or_else(|| format!("slot {s}")),
                    index,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c1_next = 1.0 - BETA1.powi(t + 1);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        for (s, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[s], &mut self.v[s]);
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let vh = v[k] / c2;
                let mh = match self.kind {
                    OptimizerKind::Adam => m[k] / c1,
                    OptimizerKind::Nadam => BETA1 * m[k] / c1_next + (1.0 - BETA1) * g[k] / c1,
                };
                p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Objective of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Mean squared deviation of the scaled output from 0.5 on domain pixels.
    ZeroInit,
    /// `(1/N) sum R^2` of the reduced residual.
    Residual,
    /// Negative ELBO with Gaussian residual likelihood.
    Bayesian {
        log_sigma2: f64,
        /// `1/M` for `M` batches per epoch.
        kl_weight: f64,
    },
}

/// One training example: network input and its residual problem.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a BcImage,
    pub problem: &'a ResidualProblem,
}

/// Loss, gradients and diagnostics of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub loss: f64,
    /// Per parameter tensor, in network order.
    pub grads: Vec<Vec<f64>>,
    /// `d loss / d ln Sigma2` (Bayesian only).
    pub d_log_sigma2: f64,
    /// `(1/N) sum R^2`, whatever the objective.
    pub residual: f64,
    pub clamped: usize,
    pub gauss_points: usize,
}

/// Stack images into an `N x nx x ny x channels` network input.
pub fn batch_input(images: &[&BcImage]) -> Tensor {
    let first = images[0];
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), first.nx, first.ny, first.channels], data)
}

struct ChunkOut {
    loss: f64,
    grads: Vec<Vec<f64>>,
    sq: f64,
    sq_per_sample: Vec<f64>,
    clamped: usize,
    gauss: usize,
}

fn eval_chunk(
    net: &Network,
    chunk: &[Sample],
    start: usize,
    n_total: usize,
    kind: LossKind,
    key: StreamKey,
    noise: Option<&FlipoutNoise>,
) -> Result<ChunkOut, TrainError> {
    let images: Vec<&BcImage> = chunk.iter().map(|s| s.image).collect();
    let problems: Vec<&ResidualProblem> = chunk.iter().map(|s| s.problem).collect();
    let problem = ResidualProblem::stack(&problems)?;
    let mut g = Graph::new();
    let pv = net.bind(&mut g, true);
    let mut ctx = ForwardCtx::new(key).example(start as u64);
    if let Some(nz) = noise {
        ctx = ctx.noise(nz);
    }
    let nn = net.forward(&mut g, &pv, &batch_input(&images), &ctx)?;
    let rec = problem.record(&mut g, nn)?;
    let r = g.value(rec.reduced).data.clone();
    let per = r.len() / chunk.len();
    let sq_per_sample: Vec<f64> = r.chunks(per).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let sq: f64 = sq_per_sample.iter().sum();
    let n = n_total as f64;
    let loss_var = match kind {
        LossKind::Residual => {
            let s = g.sum_squares(rec.reduced);
            g.scale(s, 1.0 / n)
        }
        LossKind::Bayesian { log_sigma2, .. } => {
            let s = g.sum_squares(rec.reduced);
            g.scale(s, 1.0 / (2.0 * log_sigma2.exp() * n))
        }
        LossKind::ZeroInit => {
            let dof = problem.dof();
            let mask = problem.domain_mask();
            let pixels = problem.grid.pixels();
            let mut w = vec![0.0; mask.len() * dof];
            for (b, m) in mask.chunks(pixels).enumerate() {
                let k = m.iter().filter(|v| **v != 0.0).count() * dof;
                let wk = (1.0 / (n * k as f64)).sqrt();
                for (p, mv) in m.iter().enumerate() {
                    for c in 0..dof {
                        w[(b * pixels + p) * dof + c] = mv * wk;
                    }
                }
            }
            let d = g.add_scalar(nn, -0.5);
            let d = g.mul_const(d, w);
            g.sum_squares(d)
        }
    };
    let loss = g.value(loss_var).item();
    let mut grads = g.backward(loss_var)?;
    let grads = net.collect_grads(&mut grads, &pv);
    Ok(ChunkOut {
        loss,
        grads,
        sq,
        sq_per_sample,
        clamped: rec.clamped,
        gauss: problem.gauss_points() * chunk.len(),
    })
}

/// Loss and gradients of one batch. The batch is cut into chunks of
/// `chunk_size` samples evaluated on separate tapes; chunk results are
/// reduced in order.
pub fn evaluate_batch(
    net: &Network,
    batch: &[Sample],
    kind: LossKind,
    key: StreamKey,
    noise: Option<&FlipoutNoise>,
    chunk_size: usize,
    exec: Exec,
) -> Result<BatchEval, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let n = batch.len();
    let chunk_size = chunk_size.max(1);
    let n_chunks = n.div_ceil(chunk_size);
    let outs = par::map(exec, n_chunks, |c| {
        let start = c * chunk_size;
        let end = (start + chunk_size).min(n);
        eval_chunk(net, &batch[start..end], start, n, kind, key, noise)
    });
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut sq = 0.0;
    let mut sq_all = Vec::with_capacity(n);
    let mut clamped = 0;
    let mut gauss = 0;
    for out in outs {
        let out = out?;
        loss += out.loss;
        for (acc, g) in grads.iter_mut().zip(&out.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        sq += out.sq;
        sq_all.extend(out.sq_per_sample);
        clamped += out.clamped;
        gauss += out.gauss;
    }
    let nf = n as f64;
    let mut d_log_sigma2 = 0.0;
    if let LossKind::Bayesian {
        log_sigma2,
        kl_weight,
    } = kind
    {
        let sigma2 = log_sigma2.exp();
        let mut nll = 0.0;
        for (s, sample) in sq_all.iter().zip(batch) {
            let k = sample.problem.free_count() as f64;
            nll += 0.5 * k * (2.0 * std::f64::consts::PI * sigma2).ln();
            d_log_sigma2 += 0.5 * k - s / (2.0 * sigma2);
        }
        // the tape already holds sum S / (2 Sigma2 N)
        loss += nll / nf + kl_weight * net.kl();
        d_log_sigma2 /= nf;
        net.add_kl_grad(kl_weight, &mut grads);
    }
    Ok(BatchEval {
        loss,
        grads,
        d_log_sigma2,
        residual: sq / nf,
        clamped,
        gauss_points: gauss,
    })
}

/// Deterministic residual loss `(1/N) sum R^2` of `net` evaluated at its
/// mean weights.
pub fn residual_loss(
    net: &Network,
    samples: &[Sample],
    key: StreamKey,
    chunk_size: usize,
    exec: Exec,
) -> Result<f64, TrainError> {
    let n = samples.len();
    let chunk_size = chunk_size.max(1);
    let outs = par::map(exec, n.div_ceil(chunk_size), |c| -> Result<f64, TrainError> {
        let start = c * chunk_size;
        let chunk = &samples[start..(start + chunk_size).min(n)];
        let images: Vec<&BcImage> = chunk.iter().map(|s| s.image).collect();
        let problems: Vec<&ResidualProblem> = chunk.iter().map(|s| s.problem).collect();
        let problem = ResidualProblem::stack(&problems)?;
        let ctx = ForwardCtx::new(key).example(start as u64);
        let out = net.predict(&batch_input(&images), &ctx)?;
        let st = problem.evaluate(&out.data)?;
        Ok(st.reduced.values.iter().map(|v| v * v).sum())
    });
    let mut total = 0.0;
    for o in outs {
        total += o?;
    }
    Ok(total / n as f64)
}

/// Record split of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle, then 80/10/10 by record with at least one training record.
    pub fn new(records: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..records).collect();
        idx.shuffle(&mut StreamKey::new(seed).rng(Stream::Shuffle));
        let n_val = records / 10;
        let n_test = records / 10;
        let n_train = records - n_val - n_test;
        let test = idx.split_off(n_train + n_val);
        let validation = idx.split_off(n_train);
        Self {
            train: idx,
            validation,
            test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ZeroInit,
    Residual,
    Bayesian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Running mean of the optimized batch loss.
    pub loss: f64,
    /// Running mean of `(1/N) sum R^2` over the epoch's batches.
    pub residual: f64,
    pub validation: Option<f64>,
    pub sigma2: Option<f64>,
    pub clamped_fraction: f64,
}

/// Snapshot of the network with the best validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BestState {
    pub epoch: usize,
    pub validation: f64,
    pub network: Network,
    pub log_sigma2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub log_sigma2: Option<f64>,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestState>,
    pub split: Split,
    pub checkpoints: Vec<PathBuf>,
    pub clamp_warnings: usize,
}

impl TrainState {
    pub fn sigma2(&self) -> Option<f64> {
        self.log_sigma2.map(f64::exp)
    }

    /// Best network by validation, or the final one without validation.
    pub fn best_network(&self) -> &Network {
        self.best.as_ref().map_or(&self.network, |b| &b.network)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.residual).collect()
    }
}

fn param_names(net: &Network) -> Vec<String> {
    net.params
        .iter()
        .map(|p| {
            let kind = match p.kind {
                ParamKind::Kernel => "kernel",
                ParamKind::Bias => "bias",
                ParamKind::Rho => "rho",
            };
            format!("layer {} {} ({})", p.layer, kind, net.arch.layers[p.layer].name())
        })
        .collect()
}

fn save(net: &Network, log_sigma2: Option<f64>, path: &Path) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| TrainError::io(path, e))?;
    write_checkpoint(BufWriter::new(f), net, log_sigma2)?;
    Ok(())
}

fn problems_for(data: &Dataset, physics: PhysicsModel) -> Result<Vec<ResidualProblem>, TrainError> {
    data.inputs
        .iter()
        .map(|img| ResidualProblem::new(img, physics).map_err(TrainError::from))
        .collect()
}

/// Train a deterministic surrogate from a fresh initialization: a
/// zero-initialization phase followed by the residual loss.
pub fn train_deterministic(
    data: &Dataset,
    physics: PhysicsModel,
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    if arch.is_variational() {
        return Err(TrainError::Config("deterministic training needs a deterministic architecture".into()));
    }
    let net = Network::init(arch, cfg.seed)?;
    run(data, physics, net, None, cfg)
}

/// Train a Flipout surrogate. With `warm_start` the posterior means copy the
/// given deterministic weights; otherwise the network is freshly initialized
/// and may run a zero-initialization phase first.
pub fn train_bnn(
    data: &Dataset,
    physics: PhysicsModel,
    arch: Architecture,
    cfg: &TrainConfig,
    warm_start: Option<&Network>,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let det = arch.deterministic();
    let net = match warm_start {
        Some(w) => {
            let w = if w.is_variational() { w.mean_network() } else { w.clone() };
            if w.arch != det {
                return Err(TrainError::WarmStart(format!(
                    "checkpoint has {} layers / {} parameters, expected {} layers / {} parameters",
                    w.arch.layers.len(),
                    w.param_count(),
                    det.layers.len(),
                    det.param_count()?,
                )));
            }
            w.to_variational(crate::tensor::SIGMA_INIT)?
        }
        None => Network::init(det.variational(), cfg.seed)?,
    };
    run(data, physics, net, Some(cfg.sigma2_init.ln()), cfg)
}

fn run(
    data: &Dataset,
    physics: PhysicsModel,
    network: Network,
    log_sigma2: Option<f64>,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    let problems = problems_for(data, physics)?;
    let sample = |r: usize| Sample {
        image: data.record(r),
        problem: &problems[data.input_of(r)],
    };
    let split = Split::new(data.len(), cfg.seed);
    let validation: Vec<Sample> = split.validation.iter().map(|&r| sample(r)).collect();
    let names = param_names(&network);
    let mut sizes: Vec<usize> = network.params.iter().map(|p| p.tensor.len()).collect();
    if log_sigma2.is_some() {
        sizes.push(1);
    }
    let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let mut st = TrainState {
        network,
        log_sigma2: log_sigma2.map(|l| l.clamp(LOG_SIGMA2_MIN, LOG_SIGMA2_MAX)),
        optimizer,
        epoch: 0,
        history: Vec::with_capacity(cfg.epochs),
        best: None,
        split,
        checkpoints: Vec::new(),
        clamp_warnings: 0,
    };
    let bayes = st.log_sigma2.is_some();
    let mut streak = 0usize;
    let mut order = st.split.train.clone();
    let n_batches = order.len().div_ceil(cfg.batch_size);
    let log_every = (cfg.epochs / 20).max(1);
    for e in 0..cfg.epochs {
        let phase = if e < cfg.zero_init_epochs {
            Phase::ZeroInit
        } else if bayes {
            Phase::Bayesian
        } else {
            Phase::Residual
        };
        order.shuffle(&mut StreamKey::new(cfg.seed).epoch(e as u64).rng(Stream::Shuffle));
        let (mut loss_sum, mut res_sum, mut clamp_sum, mut gp_sum) = (0.0, 0.0, 0usize, 0usize);
        for (b, recs) in order.chunks(cfg.batch_size).enumerate() {
            let key = StreamKey::new(cfg.seed).epoch(e as u64).batch(b as u64);
            let batch: Vec<Sample> = recs.iter().map(|&r| sample(r)).collect();
            let kind = match phase {
                Phase::ZeroInit => LossKind::ZeroInit,
                Phase::Residual => LossKind::Residual,
                Phase::Bayesian => LossKind::Bayesian {
                    log_sigma2: st.log_sigma2.expect("bayesian state"),
                    kl_weight: 1.0 / n_batches as f64,
                },
            };
            let noise = bayes.then(|| FlipoutNoise::sample(&st.network, key));
            let ev = evaluate_batch(&st.network, &batch, kind, key, noise.as_ref(), cfg.chunk_size, cfg.exec);
            let ev = match ev {
                Ok(ev) if ev.loss.is_finite() => ev,
                Ok(_) | Err(TrainError::Residual(ResidualError::NonFinite { .. })) => {
                    return Err(diverged(&st, cfg, e, b));
                }
                Err(other) => return Err(other),
            };
            if ev.gauss_points > 0 && ev.clamped as f64 > CLAMP_FRACTION * ev.gauss_points as f64 {
                streak += 1;
                if streak == CLAMP_STREAK {
                    st.clamp_warnings += 1;
                    log::warn!(
                        "epoch {e}: more than {:.0}% of Gauss points clamped for {CLAMP_STREAK} consecutive batches",
                        CLAMP_FRACTION * 100.0
                    );
                }
            } else {
                streak = 0;
            }
            let mut grads = ev.grads;
            if bayes {
                grads.push(vec![ev.d_log_sigma2]);
            }
            let mut slots: Vec<&mut [f64]> =
                st.network.params.iter_mut().map(|p| p.tensor.data.as_mut_slice()).collect();
            let mut ls = [st.log_sigma2.unwrap_or(0.0)];
            if bayes {
                slots.push(&mut ls);
            }
            let mut all_names = names.clone();
            all_names.push("log sigma2".into());
            match st.optimizer.update(&mut slots, &grads, &all_names) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient { name, index }) => {
                    log::error!("non-finite gradient in {name} (entry {index})");
                    return Err(diverged(&st, cfg, e, b));
                }
                Err(other) => return Err(other),
            }
            if bayes {
                st.log_sigma2 = Some(ls[0].clamp(LOG_SIGMA2_MIN, LOG_SIGMA2_MAX));
            }
            loss_sum += ev.loss;
            res_sum += ev.residual;
            clamp_sum += ev.clamped;
            gp_sum += ev.gauss_points;
        }
        st.epoch = e + 1;
        let validation_loss = if !validation.is_empty()
            && cfg.validate_every > 0
            && ((e + 1) % cfg.validate_every == 0 || e + 1 == cfg.epochs)
        {
            let mean = if bayes { st.network.mean_network() } else { st.network.clone() };
            let key = StreamKey::new(cfg.seed ^ 0x7661_6c69_6461_7465).epoch(e as u64);
            Some(residual_loss(&mean, &validation, key, cfg.chunk_size, cfg.exec)?)
        } else {
            None
        };
        if let Some(v) = validation_loss.filter(|v| v.is_finite()) {
            if phase != Phase::ZeroInit && st.best.as_ref().is_none_or(|b| v < b.validation) {
                st.best = Some(BestState {
                    epoch: e + 1,
                    validation: v,
                    network: st.network.clone(),
                    log_sigma2: st.log_sigma2,
                });
            }
        }
        let nb = n_batches as f64;
        st.history.push(EpochRecord {
            epoch: e + 1,
            phase,
            loss: loss_sum / nb,
            residual: res_sum / nb,
            validation: validation_loss,
            sigma2: st.sigma2(),
            clamped_fraction: if gp_sum > 0 { clamp_sum as f64 / gp_sum as f64 } else { 0.0 },
        });
        if (e + 1) % log_every == 0 {
            log::info!(
                "epoch {}/{}: loss {:.4e}, residual {:.4e}{}",
                e + 1,
                cfg.epochs,
                loss_sum / nb,
                res_sum / nb,
                validation_loss.map(|v| format!(", validation {v:.4e}")).unwrap_or_default()
            );
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch-{:06}.wfsm", e + 1));
                save(&st.network, st.log_sigma2, &path)?;
                st.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("final.wfsm");
        save(&st.network, st.log_sigma2, &path)?;
        st.checkpoints.push(path);
        if let Some(b) = &st.best {
            let path = dir.join("best.wfsm");
            save(&b.network, b.log_sigma2, &path)?;
            st.checkpoints.push(path);
        }
    }
    Ok(st)
}

fn diverged(st: &TrainState, cfg: &TrainConfig, epoch: usize, batch: usize) -> TrainError {
    let checkpoint = cfg.checkpoint_dir.as_ref().and_then(|dir| {
        let path = dir.join("last-good.wfsm");
        match save(&st.network, st.log_sigma2, &path) {
            Ok(()) => Some(path),
            Err(e) => {
                log::error!("could not write last good checkpoint: {e}");
                None
            }
        }
    });
    TrainError::Diverged {
        epoch: epoch + 1,
        batch,
        checkpoint,
    }
}

/// Self-describing record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub suite: Option<String>,
    pub preset: Option<String>,
    pub bayesian: bool,
    pub seed: u64,
    pub config: TrainConfig,
    pub split: Split,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub clamp_warnings: usize,
}

impl RunManifest {
    pub fn new(st: &TrainState, cfg: &TrainConfig, suite: Option<&str>, preset: Option<&str>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            suite: suite.map(str::to_string),
            preset: preset.map(str::to_string),
            bayesian: st.log_sigma2.is_some(),
            seed: cfg.seed,
            config: cfg.clone(),
            split: st.split.clone(),
            history: st.history.clone(),
            best_epoch: st.best.as_ref().map(|b| b.epoch),
            checkpoints: st.checkpoints.clone(),
            clamp_warnings: st.clamp_warnings,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let f = fs::File::create(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Loss history as CSV: `epoch,phase,loss,residual,validation,sigma2,clamped_fraction`.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    use std::io::Write;
    let f = fs::File::create(path).map_err(|e| TrainError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut body = String::from("epoch,phase,loss,residual,validation,sigma2,clamped_fraction\n");
    for r in history {
        let phase = match r.phase {
            Phase::ZeroInit => "zero_init",
            Phase::Residual => "residual",
            Phase::Bayesian => "bayesian",
        };
        body.push_str(&format!(
            "{},{},{:e},{:e},{},{},{}\n",
            r.epoch,
            phase,
            r.loss,
            r.residual,
            opt(r.validation),
            opt(r.sigma2),
            r.clamped_fraction
        ));
    }
    w.write_all(body.as_bytes()).map_err(|e| TrainError::io(path, e))?;
    Ok(())
}
