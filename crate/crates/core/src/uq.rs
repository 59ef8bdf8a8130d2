//! Monte-Carlo prediction, error metrics against reference solutions and
//! report files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{self, DnsSolution, FemError};
use crate::grid::{
    encode_bvp, masks_from_input, BcImage, BvpSpec, CutLine, GridError, GridSpec, PixelClass,
    ScaleMap, StepTag,
};
use crate::par::{self, Exec};
use crate::residual::{ResidualError, ResidualProblem};
use crate::rng::StreamKey;
use crate::tensor::{FlipoutNoise, ForwardCtx, Network, TensorError};
use crate::train::batch_input;

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum UqError {
    #[error("Monte-Carlo estimate needs at least 2 samples, got {0}")]
    Samples(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> UqError + '_ {
    move |source| UqError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A model that can be sampled: draw `draw` returns a scaled output field
/// laid out `nx ny dof`.
pub trait Surrogate: Sync {
    fn draw(&self, image: &BcImage, draw: u64, seed: u64) -> Result<Vec<f64>, UqError>;
}

impl Surrogate for Network {
    fn draw(&self, image: &BcImage, draw: u64, seed: u64) -> Result<Vec<f64>, UqError> {
        let key = StreamKey::new(seed).epoch(u64::MAX).batch(draw);
        let noise = self.is_variational().then(|| FlipoutNoise::sample(self, key));
        let mut ctx = ForwardCtx::new(key);
        if let Some(n) = &noise {
            ctx = ctx.noise(n);
        }
        Ok(self.predict(&batch_input(&[image]), &ctx)?.data)
    }
}

/// Predictive mean and standard deviation in scaled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveStats {
    pub grid: GridSpec,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub samples: usize,
    pub sigma1: f64,
}

impl PredictiveStats {
    /// Single deterministic output: zero spread.
    pub fn point(image: &BcImage, output: Vec<f64>) -> Self {
        let mut s = Self {
            grid: image.grid(),
            std: vec![0.0; output.len()],
            mean: output,
            samples: 1,
            sigma1: 0.0,
        };
        s.impose_dirichlet(image);
        s
    }

    fn impose_dirichlet(&mut self, image: &BcImage) {
        let dof = self.grid.dof;
        let rev = masks_from_input(image).dirichlet_rev;
        for (k, r) in rev.iter().enumerate() {
            if *r == 0.0 {
                self.mean[k] = image.dirichlet(k / dof, k % dof);
                self.std[k] = 0.0;
            }
        }
    }

    pub fn mean_actual(&self) -> Vec<f64> {
        self.mean.iter().map(|&s| ScaleMap::unscale(s)).collect()
    }

    pub fn std_actual(&self) -> Vec<f64> {
        self.std.iter().map(|s| 2.0 * s).collect()
    }

    /// Mean std over the entries of `image` in class `class`.
    pub fn class_mean_std(&self, image: &BcImage, class: PixelClass) -> Option<f64> {
        let dof = self.grid.dof;
        let (mut sum, mut n) = (0.0, 0usize);
        for (k, s) in self.std.iter().enumerate() {
            if image.classify(k / dof, k % dof) == class {
                sum += s;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// `S` independent draws; mean and biased second-moment variance plus the
/// aleatoric `sigma1`. Dirichlet entries report the boundary value and zero
/// spread.
pub fn mc_predict<M: Surrogate + ?Sized>(
    model: &M,
    image: &BcImage,
    samples: usize,
    seed: u64,
    sigma1: f64,
    exec: Exec,
) -> Result<PredictiveStats, UqError> {
    if samples < 2 {
        return Err(UqError::Samples(samples));
    }
    let draws = par::map(exec, samples, |s| model.draw(image, s as u64, seed));
    let n = image.nx * image.ny * image.dof();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for d in draws {
        let d = d?;
        if d.len() != n {
            return Err(UqError::Shape(format!("draw of {} values, expected {n}", d.len())));
        }
        for k in 0..n {
            sum[k] += d[k];
            sq[k] += d[k] * d[k];
        }
    }
    let sn = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / sn).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / sn - m * m + sigma1).max(0.0).sqrt())
        .collect();
    let mut stats = PredictiveStats {
        grid: image.grid(),
        mean,
        std,
        samples,
        sigma1,
    };
    stats.impose_dirichlet(image);
    Ok(stats)
}

/// Time- and volume-averaged L2 error
/// `(1/L) sum_l (1/K) sqrt(sum_k (y_ref - y)^2)` over the `K` domain entries
/// (pixel x component) marked in `domain` (one flag per pixel).
pub fn l2_error(pred: &[&[f64]], reference: &[&[f64]], domain: &[bool]) -> Result<f64, UqError> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(UqError::Shape(format!(
            "{} predictions for {} references",
            pred.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        if p.len() != r.len() || p.len() % domain.len() != 0 {
            return Err(UqError::Shape(format!(
                "fields of {} and {} values on {} pixels",
                p.len(),
                r.len(),
                domain.len()
            )));
        }
        let dof = p.len() / domain.len();
        let (mut ss, mut k) = (0.0, 0usize);
        for (idx, (a, b)) in p.iter().zip(r.iter()).enumerate() {
            if domain[idx / dof] {
                ss += (a - b) * (a - b);
                k += 1;
            }
        }
        total += ss.sqrt() / k.max(1) as f64;
    }
    Ok(total / pred.len() as f64)
}

/// Maximum absolute difference over domain entries.
pub fn linf_error(pred: &[f64], reference: &[f64], domain: &[bool]) -> f64 {
    let dof = pred.len() / domain.len();
    pred.iter()
        .zip(reference)
        .enumerate()
        .filter(|(k, _)| domain[k / dof])
        .map(|(_, (a, b))| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Reaction force of a surrogate output on a constrained edge: the field is
/// unscaled, Dirichlet values are imposed, the bulk internal force is
/// assembled and summed over the edge nodes.
pub fn surrogate_reaction(
    field_scaled: &[f64],
    spec: &BvpSpec,
    nx: usize,
    ny: usize,
    edge: usize,
    component: usize,
) -> Result<f64, UqError> {
    let img = encode_bvp(spec, nx, ny)?;
    let problem = ResidualProblem::new(&img, spec.physics)?;
    let stages = problem.evaluate(field_scaled)?;
    let bvp = spec.resolve(nx, ny)?;
    Ok(fem::reaction_from(&stages.bulk.values, &bvp, edge, component)?)
}

/// Reaction of one constrained edge component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionRow {
    pub bvp: String,
    pub step: Option<usize>,
    pub tag: Option<StepTag>,
    pub edge: usize,
    pub component: usize,
    pub surrogate: f64,
    pub dns: Option<f64>,
}

/// Prediction of one BVP with its reference, if any.
#[derive(Debug, Clone)]
pub struct BvpResult {
    pub spec: BvpSpec,
    pub image: BcImage,
    pub stats: PredictiveStats,
    pub dns: Option<DnsSolution>,
    pub reactions: Vec<ReactionRow>,
}

impl BvpResult {
    /// Predict `spec`; `samples < 2` gives a single pass without spread.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate<M: Surrogate + ?Sized>(
        model: &M,
        spec: &BvpSpec,
        grid: usize,
        samples: usize,
        seed: u64,
        sigma1: f64,
        dns: Option<DnsSolution>,
        exec: Exec,
    ) -> Result<Self, UqError> {
        let image = encode_bvp(spec, grid, grid)?;
        let stats = if samples >= 2 {
            mc_predict(model, &image, samples, seed, sigma1, exec)?
        } else {
            PredictiveStats::point(&image, model.draw(&image, 0, seed)?)
        };
        let bvp = spec.resolve(grid, grid)?;
        let mut reactions = Vec::new();
        let mut seen = Vec::new();
        for s in &spec.dirichlet {
            if seen.contains(&(s.edge, s.component)) {
                continue;
            }
            seen.push((s.edge, s.component));
            let Ok(surrogate) = surrogate_reaction(&stats.mean, spec, grid, grid, s.edge, s.component)
            else {
                continue;
            };
            let dns = dns
                .as_ref()
                .and_then(|d| fem::reaction_force(d, &bvp, s.edge, s.component).ok());
            reactions.push(ReactionRow {
                bvp: spec.name.clone(),
                step: spec.step,
                tag: spec.tag,
                edge: s.edge,
                component: s.component,
                surrogate,
                dns,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            image,
            stats,
            dns,
            reactions,
        })
    }

    pub fn domain(&self) -> Vec<bool> {
        masks_from_input(&self.image).bulk.iter().map(|b| *b != 0.0).collect()
    }

    /// Reference field in scaled units.
    pub fn dns_scaled(&self) -> Option<Vec<f64>> {
        self.dns
            .as_ref()
            .map(|d| d.values.iter().map(|&a| ScaleMap::scale(a)).collect())
    }

    pub fn summary(&self) -> BvpSummary {
        let domain = self.domain();
        let (linf, rel_linf, l2) = match self.dns_scaled() {
            Some(r) => {
                let actual = self.stats.mean_actual();
                let dns = &self.dns.as_ref().expect("dns").values;
                let linf = linf_error(&actual, dns, &domain);
                let scale = linf_error(dns, &vec![0.0; dns.len()], &domain);
                let l2 = l2_error(&[&self.stats.mean], &[&r], &domain).ok();
                (Some(linf), (scale > 0.0).then(|| linf / scale), l2)
            }
            None => (None, None, None),
        };
        BvpSummary {
            name: self.spec.name.clone(),
            step: self.spec.step,
            tag: self.spec.tag,
            linf,
            rel_linf,
            l2,
            max_std: self.stats.std_actual().into_iter().fold(0.0, f64::max),
            neumann_std: self.stats.class_mean_std(&self.image, PixelClass::Neumann).map(|s| 2.0 * s),
            interior_std: self.stats.class_mean_std(&self.image, PixelClass::Interior).map(|s| 2.0 * s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSummary {
    pub name: String,
    pub step: Option<usize>,
    pub tag: Option<StepTag>,
    /// Actual units.
    pub linf: Option<f64>,
    pub rel_linf: Option<f64>,
    /// Scaled units.
    pub l2: Option<f64>,
    pub max_std: f64,
    pub neumann_std: Option<f64>,
    pub interior_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub version: u32,
    pub suite: Option<String>,
    pub checkpoint: Option<String>,
    pub samples: usize,
    pub sigma1: f64,
    pub bvps: Vec<BvpSummary>,
    /// Averaged over all BVPs with a reference, scaled units.
    pub averaged_l2: Option<f64>,
    pub reactions: Vec<ReactionRow>,
    pub sigma2: Option<f64>,
    pub sigma2_history: Vec<f64>,
}

/// Run-level facts copied into the summary.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub suite: Option<String>,
    pub checkpoint: Option<String>,
    pub sigma2: Option<f64>,
    pub sigma2_history: Vec<f64>,
}

pub fn summarize(results: &[BvpResult], meta: &ReportMeta) -> Result<ReportSummary, UqError> {
    let with_ref: Vec<&BvpResult> = results.iter().filter(|r| r.dns.is_some()).collect();
    let mut averaged_l2 = None;
    if !with_ref.is_empty() {
        let mut total = 0.0;
        for r in &with_ref {
            let reference = r.dns_scaled().expect("dns");
            total += l2_error(&[&r.stats.mean], &[&reference], &r.domain())?;
        }
        averaged_l2 = Some(total / with_ref.len() as f64);
    }
    let first = results.first();
    Ok(ReportSummary {
        version: SUMMARY_VERSION,
        suite: meta.suite.clone(),
        checkpoint: meta.checkpoint.clone(),
        samples: first.map_or(0, |r| r.stats.samples),
        sigma1: first.map_or(0.0, |r| r.stats.sigma1),
        bvps: results.iter().map(BvpResult::summary).collect(),
        averaged_l2,
        reactions: results.iter().flat_map(|r| r.reactions.clone()).collect(),
        sigma2: meta.sigma2,
        sigma2_history: meta.sigma2_history.clone(),
    })
}

fn write_text(path: &Path, body: &str) -> Result<(), UqError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(body.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

const FIELD_HEADER: &str = "x,y,component,mean,std,dns,abs_err\n";

fn field_rows(r: &BvpResult, pixels: &[(usize, usize)]) -> String {
    let grid = r.stats.grid;
    let dof = grid.dof;
    let mean = r.stats.mean_actual();
    let std = r.stats.std_actual();
    let domain = r.domain();
    let mut out = String::from(FIELD_HEADER);
    for &(i, j) in pixels {
        let p = grid.index(i, j);
        if !domain[p] {
            continue;
        }
        let [x, y] = grid.coords(i, j);
        for c in 0..dof {
            let k = p * dof + c;
            let dns = r.dns.as_ref().map(|d| d.values[k]);
            let err = dns.map(|d| (d - mean[k]).abs());
            out.push_str(&format!(
                "{x},{y},{c},{:e},{:e},{},{}\n",
                mean[k],
                std[k],
                opt(dns),
                opt(err)
            ));
        }
    }
    out
}

/// Write one field CSV per BVP (actual units), line profiles under
/// `profiles/`, and `summary.json`. Returns every written path.
pub fn emit_report(
    dir: &Path,
    results: &[BvpResult],
    cut_lines: &[CutLine],
    meta: &ReportMeta,
) -> Result<Vec<PathBuf>, UqError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for r in results {
        let grid = r.stats.grid;
        let all: Vec<(usize, usize)> = (0..grid.nx)
            .flat_map(|i| (0..grid.ny).map(move |j| (i, j)))
            .collect();
        let path = dir.join(format!("{}.csv", r.spec.name));
        write_text(&path, &field_rows(r, &all))?;
        written.push(path);
        if !cut_lines.is_empty() {
            let pdir = dir.join("profiles");
            fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
            for (k, line) in cut_lines.iter().enumerate() {
                let path = pdir.join(format!("{}-cut{k}.csv", r.spec.name));
                write_text(&path, &field_rows(r, &line.pixels(grid.nx, grid.ny)))?;
                written.push(path);
            }
        }
    }
    let summary = summarize(results, meta)?;
    let path = dir.join("summary.json");
    write_text(&path, &serde_json::to_string_pretty(&summary)?)?;
    written.push(path);
    Ok(written)
}
