//! Discretized weak-form residual on pixel grids.
//!
//! Nodal fields are gathered into element blocks with four zero-padded
//! shifts, integrated with 2x2 Gauss quadrature on bilinear quads, and
//! assembled back to nodes with four rolls. Every step is recorded on a
//! [`Graph`], so the residual is differentiable with respect to the network
//! output.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{decode_bvp, masks_from_input, write_field, BcImage, GridError, GridSpec};
use crate::physics::PhysicsModel;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("non-finite stress in element {element} at Gauss point {gauss}")]
    NonFinite { element: usize, gauss: usize },
    #[error("image has {channels} channels but the physics needs {dof} unknowns per node")]
    Channels { channels: usize, dof: usize },
    #[error("invalid physics parameters: {0:?}")]
    Physics(PhysicsModel),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Node order of a bulk element, as shifts of its lower-left pixel. The
/// parent coordinates of node `a` are `(2 di - 1, 2 dj - 1)`.
pub const NODE_SHIFTS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub bulk_points: [[f64; 2]; 4],
    pub bulk_weights: [f64; 4],
    pub surface_points: [f64; 2],
    pub surface_weights: [f64; 2],
}

impl QuadratureRule {
    pub fn gauss2() -> Self {
        let g = 1.0 / 3f64.sqrt();
        Self {
            bulk_points: [[-g, -g], [-g, g], [g, -g], [g, g]],
            bulk_weights: [1.0; 4],
            surface_points: [-g, g],
            surface_weights: [1.0; 2],
        }
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::gauss2()
    }
}

/// Bilinear shape functions evaluated at the quadrature points.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTables {
    pub rule: QuadratureRule,
    /// `n_bulk[g][a]`
    pub n_bulk: [[f64; 4]; 4],
    /// `b_parent[g][d][a]`: derivative of `N_a` along parent axis `d`.
    pub b_parent: [[[f64; 4]; 2]; 4],
    /// `n_surf[g][a]`
    pub n_surf: [[f64; 2]; 2],
}

impl ShapeTables {
    pub fn new(rule: QuadratureRule) -> Self {
        let mut n_bulk = [[0.0; 4]; 4];
        let mut b_parent = [[[0.0; 4]; 2]; 4];
        for (g, &[xi, eta]) in rule.bulk_points.iter().enumerate() {
            for (a, &(di, dj)) in NODE_SHIFTS.iter().enumerate() {
                let (xa, ya) = (2.0 * di as f64 - 1.0, 2.0 * dj as f64 - 1.0);
                n_bulk[g][a] = 0.25 * (1.0 + xa * xi) * (1.0 + ya * eta);
                b_parent[g][0][a] = 0.25 * xa * (1.0 + ya * eta);
                b_parent[g][1][a] = 0.25 * ya * (1.0 + xa * xi);
            }
        }
        let mut n_surf = [[0.0; 2]; 2];
        for (g, &s) in rule.surface_points.iter().enumerate() {
            n_surf[g] = [0.5 * (1.0 - s), 0.5 * (1.0 + s)];
        }
        Self {
            rule,
            n_bulk,
            b_parent,
            n_surf,
        }
    }

    /// Physical gradient table `b[g][d][a]` on an `hx x hy` element.
    pub fn gradients(&self, hx: f64, hy: f64) -> [[[f64; 4]; 2]; 4] {
        let mut b = self.b_parent;
        for bg in &mut b {
            bg[0].iter_mut().for_each(|v| *v *= 2.0 / hx);
            bg[1].iter_mut().for_each(|v| *v *= 2.0 / hy);
        }
        b
    }

    pub fn bulk_det(hx: f64, hy: f64) -> f64 {
        0.25 * hx * hy
    }

    pub fn surface_det(h: f64) -> f64 {
        0.5 * h
    }
}

impl Default for ShapeTables {
    fn default() -> Self {
        Self::new(QuadratureRule::gauss2())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bulk,
    Neumann,
    Total,
    Reduced,
}

/// Nodal residual `nx x ny x dof`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    pub grid: GridSpec,
    pub stage: Stage,
    pub values: Vec<f64>,
}

impl ResidualField {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Dump in the boundary-image binary layout.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        write_field(&mut w, self.grid.nx, self.grid.ny, self.grid.dof, &self.values)
    }
}

/// All residual stages of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStages {
    pub bulk: ResidualField,
    pub neumann: ResidualField,
    pub total: ResidualField,
    pub reduced: ResidualField,
    /// Gauss points of active elements dropped by the J bounds.
    pub clamped: usize,
}

/// Tape handles produced by [`ResidualProblem::record`].
#[derive(Debug, Clone, Copy)]
pub struct RecordedResidual {
    pub bulk: Var,
    pub total: Var,
    pub reduced: Var,
    pub clamped: usize,
}

/// Everything the residual needs from one boundary image, precomputed.
#[derive(Debug, Clone)]
pub struct ResidualProblem {
    pub grid: GridSpec,
    pub physics: PhysicsModel,
    pub tables: ShapeTables,
    /// Number of stacked samples.
    pub batch: usize,
    /// Scaled Dirichlet values where prescribed, zero elsewhere (`nx ny dof`).
    dirichlet_fill: Vec<f64>,
    /// Zero at Dirichlet entries, one elsewhere (`nx ny dof`).
    dirichlet_rev: Vec<f64>,
    /// One at pixels that are the lower-left node of an active element (`nx ny`).
    element_mask: Vec<f64>,
    /// Domain indicator `M_bulk` (`nx ny`).
    bulk_mask: Vec<f64>,
    /// `M_bulk * M_D_rev` (`nx ny dof`).
    reduce_mask: Vec<f64>,
    neumann: Vec<f64>,
}

impl ResidualProblem {
    pub fn new(img: &BcImage, physics: PhysicsModel) -> Result<Self, ResidualError> {
        Self::with_tables(img, physics, ShapeTables::default())
    }

    pub fn with_tables(
        img: &BcImage,
        physics: PhysicsModel,
        tables: ShapeTables,
    ) -> Result<Self, ResidualError> {
        let dof = physics.dof();
        if img.channels != 2 * dof {
            return Err(ResidualError::Channels {
                channels: img.channels,
                dof,
            });
        }
        if !physics.is_valid() {
            return Err(ResidualError::Physics(physics));
        }
        let grid = GridSpec::new(img.nx, img.ny, dof)?;
        let masks = masks_from_input(img);
        let np = grid.pixels();
        let mut dirichlet_fill = vec![0.0; np * dof];
        for p in 0..np {
            for c in 0..dof {
                if masks.dirichlet_rev[p * dof + c] == 0.0 {
                    dirichlet_fill[p * dof + c] = img.dirichlet(p, c);
                }
            }
        }
        let mut element_mask = vec![0.0; np];
        for i in 0..grid.nx - 1 {
            for j in 0..grid.ny - 1 {
                let all = NODE_SHIFTS
                    .iter()
                    .all(|&(di, dj)| masks.bulk[grid.index(i + di, j + dj)] == 1.0);
                if all {
                    element_mask[grid.index(i, j)] = 1.0;
                }
            }
        }
        let reduce_mask = (0..np * dof)
            .map(|k| masks.bulk[k / dof] * masks.dirichlet_rev[k])
            .collect();
        let neumann = neumann_values(img, &grid, &tables);
        Ok(Self {
            grid,
            physics,
            tables,
            batch: 1,
            dirichlet_fill,
            dirichlet_rev: masks.dirichlet_rev,
            bulk_mask: masks.bulk,
            element_mask,
            reduce_mask,
            neumann,
        })
    }

    /// Concatenate single-sample problems on the same grid and physics
    /// into one batched problem.
    pub fn stack(problems: &[&ResidualProblem]) -> Result<Self, ResidualError> {
        let first = problems.first().ok_or_else(|| TensorError::Shape {
            op: "residual stack",
            detail: "empty batch".into(),
        })?;
        let mut out = ResidualProblem {
            batch: 0,
            dirichlet_fill: Vec::new(),
            dirichlet_rev: Vec::new(),
            element_mask: Vec::new(),
            bulk_mask: Vec::new(),
            reduce_mask: Vec::new(),
            neumann: Vec::new(),
            ..(*first).clone()
        };
        for p in problems {
            if p.grid != first.grid || p.physics != first.physics {
                return Err(TensorError::Shape {
                    op: "residual stack",
                    detail: format!("mixed grids or physics in one batch: {:?}", p.grid),
                }
                .into());
            }
            out.batch += p.batch;
            out.dirichlet_fill.extend_from_slice(&p.dirichlet_fill);
            out.dirichlet_rev.extend_from_slice(&p.dirichlet_rev);
            out.element_mask.extend_from_slice(&p.element_mask);
            out.bulk_mask.extend_from_slice(&p.bulk_mask);
            out.reduce_mask.extend_from_slice(&p.reduce_mask);
            out.neumann.extend_from_slice(&p.neumann);
        }
        Ok(out)
    }

    pub fn dof(&self) -> usize {
        self.grid.dof
    }

    /// Entries of the reduced residual per sample.
    pub fn free_count(&self) -> usize {
        self.reduce_mask.iter().filter(|m| **m != 0.0).count() / self.batch
    }

    /// Gauss points of active elements per sample.
    pub fn gauss_points(&self) -> usize {
        4 * self.element_mask.iter().filter(|m| **m != 0.0).count() / self.batch
    }

    /// Domain-pixel indicator `nx ny` of every sample, concatenated.
    pub fn domain_mask(&self) -> &[f64] {
        &self.bulk_mask
    }

    /// Neumann residual (actual units).
    pub fn neumann_residual(&self) -> ResidualField {
        ResidualField {
            grid: self.grid,
            stage: Stage::Neumann,
            values: self.neumann.clone(),
        }
    }

    /// `M_bulk * M_D_rev` per `(pixel, component)`.
    pub fn reduce_mask(&self) -> &[f64] {
        &self.reduce_mask
    }

    pub fn element_mask(&self) -> &[f64] {
        &self.element_mask
    }

    /// Impose the Dirichlet channel values on a scaled network output
    /// (`1 x nx x ny x dof`). Replaced entries carry no gradient.
    pub fn apply_dirichlet(&self, g: &mut Graph, nn: Var) -> Var {
        let kept = g.mul_const(nn, self.dirichlet_rev.clone());
        g.add_const(kept, &self.dirichlet_fill)
    }

    /// Record the full pipeline for a scaled network output `nn`
    /// (`1 x nx x ny x dof`).
    pub fn record(&self, g: &mut Graph, nn: Var) -> Result<RecordedResidual, ResidualError> {
        let expect = [self.batch, self.grid.nx, self.grid.ny, self.dof()];
        if g.shape(nn) != expect {
            return Err(TensorError::Shape {
                op: "residual",
                detail: format!("field {:?}, expected {expect:?}", g.shape(nn)),
            }
            .into());
        }
        let s = self.apply_dirichlet(g, nn);
        let a = g.scale(s, 2.0);
        let field = g.add_scalar(a, -1.0);
        let (bulk, clamped) = self.bulk(g, field)?;
        let neg: Vec<f64> = self.neumann.iter().map(|v| -v).collect();
        let total = g.add_const(bulk, &neg);
        let reduced = g.mul_const(total, self.reduce_mask.clone());
        Ok(RecordedResidual {
            bulk,
            total,
            reduced,
            clamped,
        })
    }

    /// Evaluate all stages for a scaled field laid out `nx x ny x dof`.
    pub fn evaluate(&self, nn_scaled: &[f64]) -> Result<ResidualStages, ResidualError> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(
            vec![self.batch, self.grid.nx, self.grid.ny, self.dof()],
            nn_scaled.to_vec(),
        ));
        let r = self.record(&mut g, x)?;
        let field = |v: Var, stage| ResidualField {
            grid: self.grid,
            stage,
            values: g.value(v).data.clone(),
        };
        Ok(ResidualStages {
            bulk: field(r.bulk, Stage::Bulk),
            neumann: self.neumann_residual(),
            total: field(r.total, Stage::Total),
            reduced: field(r.reduced, Stage::Reduced),
            clamped: r.clamped,
        })
    }

    /// Element-level nodal values of an actual-unit field, `[component][node]`.
    fn gather(&self, g: &mut Graph, field: Var) -> Result<Vec<[Var; 4]>, ResidualError> {
        (0..self.dof())
            .map(|c| {
                let u = g.channel(field, c)?;
                let mut nodes = [u; 4];
                for (a, &(di, dj)) in NODE_SHIFTS.iter().enumerate().skip(1) {
                    nodes[a] = g.shift(u, di as isize, dj as isize)?;
                }
                Ok(nodes)
            })
            .collect()
    }

    fn bulk(&self, g: &mut Graph, field: Var) -> Result<(Var, usize), ResidualError> {
        let (hx, hy) = (self.grid.hx(), self.grid.hy());
        let b = self.tables.gradients(hx, hy);
        let det = ShapeTables::bulk_det(hx, hy);
        let w = self.tables.rule.bulk_weights;
        let dof = self.dof();
        let nodes = self.gather(g, field)?;
        // grad[g][c][d] = d u_c / d x_d
        let mut grad = Vec::with_capacity(4);
        for bg in &b {
            let mut per_c = Vec::with_capacity(dof);
            for nc in &nodes {
                let mut per_d = [nc[0]; 2];
                for d in 0..2 {
                    let terms: Vec<(Var, f64)> = (0..4).map(|a| (nc[a], bg[d][a])).collect();
                    per_d[d] = g.lin_comb(&terms)?;
                }
                per_c.push(per_d);
            }
            grad.push(per_c);
        }
        let mut clamped = 0;
        // flux[g][c][d]: diffusive flux or first Piola stress P_cd
        let mut flux = Vec::with_capacity(4);
        for (gp, gr) in grad.iter().enumerate() {
            let f = match self.physics {
                PhysicsModel::Diffusion { diffusivity } => {
                    vec![[g.scale(gr[0][0], diffusivity), g.scale(gr[0][1], diffusivity)]]
                }
                PhysicsModel::LinearElastic { lambda, mu } => {
                    let (ux, uy) = (gr[0], gr[1]);
                    let sxx = g.lin_comb(&[(ux[0], lambda + 2.0 * mu), (uy[1], lambda)])?;
                    let syy = g.lin_comb(&[(ux[0], lambda), (uy[1], lambda + 2.0 * mu)])?;
                    let sxy = g.lin_comb(&[(ux[1], mu), (uy[0], mu)])?;
                    vec![[sxx, sxy], [sxy, syy]]
                }
                PhysicsModel::NeoHookean {
                    lambda,
                    mu,
                    j_min,
                    j_max,
                } => {
                    let (p, dropped) = self.neo_hookean(g, gr, gp, lambda, mu, j_min, j_max)?;
                    clamped += dropped;
                    p
                }
            };
            flux.push(f);
        }
        let mut comps = Vec::with_capacity(dof);
        for c in 0..dof {
            let mut assembled: Option<Var> = None;
            for (a, &(di, dj)) in NODE_SHIFTS.iter().enumerate() {
                let mut terms = Vec::with_capacity(8);
                for gp in 0..4 {
                    for d in 0..2 {
                        terms.push((flux[gp][c][d], w[gp] * det * b[gp][d][a]));
                    }
                }
                let r = g.lin_comb(&terms)?;
                let r = g.mul_const(r, self.element_mask.clone());
                let r = g.roll(r, di as isize, dj as isize)?;
                assembled = Some(match assembled {
                    None => r,
                    Some(acc) => g.add(acc, r)?,
                });
            }
            comps.push(assembled.expect("four nodes"));
        }
        let bulk = if dof == 1 {
            comps[0]
        } else {
            g.stack_channels(&comps)?
        };
        Ok((bulk, clamped))
    }

    #[allow(clippy::too_many_arguments)]
    fn neo_hookean(
        &self,
        g: &mut Graph,
        gr: &[[Var; 2]],
        gp: usize,
        lambda: f64,
        mu: f64,
        j_min: f64,
        j_max: f64,
    ) -> Result<(Vec<[Var; 2]>, usize), ResidualError> {
        let f11 = g.add_scalar(gr[0][0], 1.0);
        let f12 = gr[0][1];
        let f21 = gr[1][0];
        let f22 = g.add_scalar(gr[1][1], 1.0);
        let a = g.mul(f11, f22)?;
        let bb = g.mul(f12, f21)?;
        let j = g.sub(a, bb)?;
        let mut keep = self.element_mask.clone();
        let mut dropped = 0;
        for (k, &jv) in g.value(j).data.iter().enumerate() {
            if keep[k] == 1.0 && !(j_min..=j_max).contains(&jv) {
                keep[k] = 0.0;
                dropped += 1;
            }
        }
        let fill: Vec<f64> = keep.iter().map(|m| 1.0 - m).collect();
        let jm = g.mul_const(j, keep.clone());
        let js = g.add_const(jm, &fill);
        let ones = g.constant(Tensor::filled(g.shape(js).to_vec(), 1.0));
        let inv = g.div(ones, js)?;
        // P = mu F + (lambda (J - 1) - mu / J) cof F
        let c = g.lin_comb(&[(js, lambda), (inv, -mu)])?;
        let c = g.add_scalar(c, -lambda);
        let cf22 = g.mul(c, f22)?;
        let cf21 = g.mul(c, f21)?;
        let cf12 = g.mul(c, f12)?;
        let cf11 = g.mul(c, f11)?;
        let p11 = g.lin_comb(&[(f11, mu), (cf22, 1.0)])?;
        let p12 = g.lin_comb(&[(f12, mu), (cf21, -1.0)])?;
        let p21 = g.lin_comb(&[(f21, mu), (cf12, -1.0)])?;
        let p22 = g.lin_comb(&[(f22, mu), (cf11, 1.0)])?;
        let mut out = [[p11; 2]; 2];
        for (slot, p) in [(0, p11), (1, p12), (2, p21), (3, p22)] {
            let pm = g.mul_const(p, keep.clone());
            if let Some(k) = g.value(pm).data.iter().position(|v| !v.is_finite()) {
                return Err(ResidualError::NonFinite {
                    element: element_index(&self.grid, k),
                    gauss: gp,
                });
            }
            out[slot / 2][slot % 2] = pm;
        }
        Ok((out.to_vec(), dropped))
    }
}

/// Element index `i (ny - 1) + j` of the element with lower-left pixel `p`.
fn element_index(grid: &GridSpec, p: usize) -> usize {
    let p = p % grid.pixels();
    let (i, j) = (p / grid.ny, p % grid.ny);
    i * (grid.ny - 1) + j.min(grid.ny - 2)
}

/// Assemble `int N^T t dS` over two-node surface elements: every pair of
/// grid-adjacent pixels that both carry a flux for the same component.
fn neumann_values(img: &BcImage, grid: &GridSpec, tables: &ShapeTables) -> Vec<f64> {
    let dof = grid.dof;
    let bcs = decode_bvp(img);
    let mut out = vec![0.0; grid.pixels() * dof];
    let rule = &tables.rule;
    for c in 0..dof {
        let t = |p: usize| bcs.neumann[p * dof + c];
        // horizontal group joins (i, j)-(i+1, j); vertical joins (i, j)-(i, j+1)
        for (di, dj, h) in [(1, 0, grid.hx()), (0, 1, grid.hy())] {
            let det = ShapeTables::surface_det(h);
            for i in 0..grid.nx - di {
                for j in 0..grid.ny - dj {
                    let (p, q) = (grid.index(i, j), grid.index(i + di, j + dj));
                    let (Some(tp), Some(tq)) = (t(p), t(q)) else {
                        continue;
                    };
                    for (gp, n) in tables.n_surf.iter().enumerate() {
                        let tg = n[0] * tp + n[1] * tq;
                        out[p * dof + c] += rule.surface_weights[gp] * det * n[0] * tg;
                        out[q * dof + c] += rule.surface_weights[gp] * det * n[1] * tg;
                    }
                }
            }
        }
    }
    out
}

/// Gather an `nx x ny x dof` field into `nx x ny x (4 dof)` element blocks:
/// channel `a dof + c` holds component `c` of node `a`.
pub fn gather_elements(field: &[f64], grid: &GridSpec) -> Vec<f64> {
    let dof = grid.dof;
    let mut out = vec![0.0; grid.pixels() * 4 * dof];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            for (a, &(di, dj)) in NODE_SHIFTS.iter().enumerate() {
                if i + di >= grid.nx || j + dj >= grid.ny {
                    continue;
                }
                let src = grid.index(i + di, j + dj);
                for c in 0..dof {
                    out[(grid.index(i, j) * 4 + a) * dof + c] = field[src * dof + c];
                }
            }
        }
    }
    out
}

/// Inverse of [`gather_elements`]: roll every node block to its node and sum.
pub fn scatter_assemble(elem: &[f64], grid: &GridSpec) -> Result<Vec<f64>, ResidualError> {
    let dof = grid.dof;
    let (nx, ny) = (grid.nx, grid.ny);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, nx, ny, 4 * dof], elem.to_vec()));
    let mut out = vec![0.0; grid.pixels() * dof];
    for (a, &(di, dj)) in NODE_SHIFTS.iter().enumerate() {
        for c in 0..dof {
            let block = g.channel(x, a * dof + c)?;
            let r = g.roll(block, di as isize, dj as isize)?;
            for (p, v) in g.value(r).data.iter().enumerate() {
                out[p * dof + c] += v;
            }
        }
    }
    Ok(out)
}

/// Reduced residual of a scaled network output for one image.
pub fn total_residual(
    nn_scaled: &[f64],
    img: &BcImage,
    physics: PhysicsModel,
) -> Result<ResidualField, ResidualError> {
    Ok(ResidualProblem::new(img, physics)?.evaluate(nn_scaled)?.reduced)
}
