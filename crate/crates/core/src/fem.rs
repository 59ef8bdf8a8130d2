//! Element-loop finite-element reference solver on the pixel grid.
//!
//! Independent of the convolutional residual: it walks the active elements
//! one by one with counter-clockwise connectivity, builds element vectors
//! and tangents at the 2x2 Gauss points, and solves with a banded direct
//! factorization (Newton with load stepping for Neo-Hookean).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{write_field, BvpSpec, GridError, GridSpec, ResolvedBvp};
use crate::physics::PhysicsModel;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("stiffness matrix is singular at equation {0}; add Dirichlet constraints")]
    Singular(usize),
    #[error("Newton iteration did not converge in load step {step} (residual {residual:e})")]
    NoConvergence { step: usize, residual: f64 },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Newton tolerance on the free-dof residual norm.
pub const NEWTON_TOL: f64 = 1e-10;
pub const MAX_NEWTON: usize = 25;
pub const LOAD_STEPS: usize = 10;

const GP: f64 = 0.577_350_269_189_625_8;
const GAUSS: [[f64; 2]; 4] = [[-GP, -GP], [GP, -GP], [GP, GP], [-GP, GP]];
const CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

/// Structured mesh of the active elements of a resolved problem.
#[derive(Debug, Clone)]
pub struct FeMesh {
    pub grid: GridSpec,
    pub nodes: Vec<[f64; 2]>,
    /// Active elements, counter-clockwise node lists.
    pub elements: Vec<[usize; 4]>,
    /// Prescribed value per dof.
    pub constrained: Vec<Option<f64>>,
    /// Surface elements `(node_a, node_b, component)`.
    pub surface: Vec<(usize, usize, usize)>,
    /// Prescribed flux per dof.
    pub traction: Vec<Option<f64>>,
    /// Dofs that belong to at least one element.
    pub active: Vec<bool>,
}

impl FeMesh {
    pub fn new(bvp: &ResolvedBvp) -> Self {
        let grid = bvp.grid;
        let dof = grid.dof;
        let mut nodes = Vec::with_capacity(grid.pixels());
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                nodes.push(grid.coords(i, j));
            }
        }
        let mut elements = Vec::new();
        let mut active = vec![false; grid.pixels() * dof];
        for i in 0..grid.nx - 1 {
            for j in 0..grid.ny - 1 {
                let e = [
                    grid.index(i, j),
                    grid.index(i + 1, j),
                    grid.index(i + 1, j + 1),
                    grid.index(i, j + 1),
                ];
                if e.iter().all(|&n| bvp.domain.mask[n]) {
                    for &n in &e {
                        for c in 0..dof {
                            active[n * dof + c] = true;
                        }
                    }
                    elements.push(e);
                }
            }
        }
        Self {
            grid,
            nodes,
            elements,
            constrained: bvp.dirichlet.clone(),
            surface: bvp.surface.clone(),
            traction: bvp.neumann.clone(),
            active,
        }
    }

    pub fn dof(&self) -> usize {
        self.grid.dof
    }

    pub fn ndofs(&self) -> usize {
        self.nodes.len() * self.dof()
    }

    pub fn is_free(&self, k: usize) -> bool {
        self.active[k] && self.constrained[k].is_none()
    }

    /// Half bandwidth of the assembled matrix in dof numbering.
    fn bandwidth(&self) -> usize {
        let dof = self.dof();
        self.elements
            .iter()
            .map(|e| (e.iter().max().unwrap() - e.iter().min().unwrap() + 1) * dof - 1)
            .max()
            .unwrap_or(0)
    }

    /// Shape values, physical gradients and `det J` at one Gauss point.
    fn shape(&self, e: &[usize; 4], gp: [f64; 2]) -> ([f64; 4], [[f64; 4]; 2], f64) {
        let [xi, eta] = gp;
        let mut n = [0.0; 4];
        let mut dn = [[0.0; 4]; 2];
        for a in 0..4 {
            let [xa, ya] = CORNERS[a];
            n[a] = 0.25 * (1.0 + xa * xi) * (1.0 + ya * eta);
            dn[0][a] = 0.25 * xa * (1.0 + ya * eta);
            dn[1][a] = 0.25 * ya * (1.0 + xa * xi);
        }
        let mut jac = [[0.0; 2]; 2];
        for a in 0..4 {
            let x = self.nodes[e[a]];
            for r in 0..2 {
                for s in 0..2 {
                    jac[r][s] += dn[s][a] * x[r];
                }
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let inv = [
            [jac[1][1] / det, -jac[0][1] / det],
            [-jac[1][0] / det, jac[0][0] / det],
        ];
        let mut b = [[0.0; 4]; 2];
        for a in 0..4 {
            for d in 0..2 {
                // dN/dx_d = sum_s dN/dxi_s dxi_s/dx_d
                b[d][a] = dn[0][a] * inv[0][d] + dn[1][a] * inv[1][d];
            }
        }
        (n, b, det)
    }
}

/// Flux `P[i][J]` and tangent `A[i][J][k][L]` at one Gauss point, or `None`
/// when the point is excluded by the J bounds.
type Material = ([[f64; 2]; 2], [[[[f64; 2]; 2]; 2]; 2]);

fn material(physics: &PhysicsModel, g: &[[f64; 2]; 2], dof: usize) -> Option<Material> {
    let mut p = [[0.0; 2]; 2];
    let mut a = [[[[0.0; 2]; 2]; 2]; 2];
    let d = |x: usize, y: usize| if x == y { 1.0 } else { 0.0 };
    match *physics {
        PhysicsModel::Diffusion { diffusivity } => {
            for jj in 0..2 {
                p[0][jj] = diffusivity * g[0][jj];
                a[0][jj][0][jj] = diffusivity;
            }
        }
        PhysicsModel::LinearElastic { lambda, mu } => {
            let tr = g[0][0] + g[1][1];
            for i in 0..dof {
                for jj in 0..2 {
                    p[i][jj] = lambda * tr * d(i, jj) + mu * (g[i][jj] + g[jj][i]);
                    for k in 0..dof {
                        for l in 0..2 {
                            a[i][jj][k][l] =
                                lambda * d(i, jj) * d(k, l) + mu * (d(i, k) * d(jj, l) + d(i, l) * d(jj, k));
                        }
                    }
                }
            }
        }
        PhysicsModel::NeoHookean {
            lambda,
            mu,
            j_min,
            j_max,
        } => {
            let f = [[1.0 + g[0][0], g[0][1]], [g[1][0], 1.0 + g[1][1]]];
            let j = f[0][0] * f[1][1] - f[0][1] * f[1][0];
            if !(j_min..=j_max).contains(&j) {
                return None;
            }
            let fit = [[f[1][1] / j, -f[1][0] / j], [-f[0][1] / j, f[0][0] / j]];
            let c = lambda * (j * j - j) - mu;
            for i in 0..2 {
                for jj in 0..2 {
                    p[i][jj] = mu * f[i][jj] + c * fit[i][jj];
                    for k in 0..2 {
                        for l in 0..2 {
                            a[i][jj][k][l] = mu * d(i, k) * d(jj, l)
                                + lambda * (2.0 * j - 1.0) * j * fit[k][l] * fit[i][jj]
                                - c * fit[i][l] * fit[k][jj];
                        }
                    }
                }
            }
        }
    }
    Some((p, a))
}

/// Banded matrix with half bandwidth `bw`, stored row-wise.
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn new(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    #[inline]
    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i.abs_diff(j) <= self.bw);
        &mut self.data[i * (2 * self.bw + 1) + self.bw + j - i]
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        *self.at(i, j) += v;
    }

    /// Gaussian elimination without pivoting; overwrites `rhs` with the
    /// solution.
    pub fn solve(mut self, rhs: &mut [f64]) -> Result<(), FemError> {
        let (n, bw) = (self.n, self.bw);
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let piv = *self.at(k, k);
            if piv.abs() <= 1e-13 * scale {
                return Err(FemError::Singular(k));
            }
            let last = (k + bw).min(n - 1);
            for i in k + 1..=last {
                let m = *self.at(i, k) / piv;
                if m == 0.0 {
                    continue;
                }
                for j in k..=last {
                    let v = *self.at(k, j);
                    *self.at(i, j) -= m * v;
                }
                rhs[i] -= m * rhs[k];
            }
        }
        for k in (0..n).rev() {
            let last = (k + bw).min(n - 1);
            let mut s = rhs[k];
            for j in k + 1..=last {
                s -= *self.at(k, j) * rhs[j];
            }
            rhs[k] = s / *self.at(k, k);
        }
        Ok(())
    }
}

/// Internal force vector (and optionally the tangent restricted to free
/// dofs) of the field `u`. Returns the number of excluded Gauss points.
fn internal(
    mesh: &FeMesh,
    physics: &PhysicsModel,
    u: &[f64],
    mut tangent: Option<(&mut Banded, &[Option<usize>])>,
) -> (Vec<f64>, usize) {
    let dof = mesh.dof();
    let mut r = vec![0.0; mesh.ndofs()];
    let mut clamped = 0;
    for e in &mesh.elements {
        for gp in GAUSS {
            let (_, b, det) = mesh.shape(e, gp);
            let mut g = [[0.0; 2]; 2];
            for c in 0..dof {
                for d in 0..2 {
                    g[c][d] = (0..4).map(|a| b[d][a] * u[e[a] * dof + c]).sum();
                }
            }
            let Some((p, aa)) = material(physics, &g, dof) else {
                clamped += 1;
                continue;
            };
            for a in 0..4 {
                for i in 0..dof {
                    r[e[a] * dof + i] += det * (b[0][a] * p[i][0] + b[1][a] * p[i][1]);
                }
            }
            if let Some((k, map)) = tangent.as_mut() {
                for a in 0..4 {
                    for i in 0..dof {
                        let Some(row) = map[e[a] * dof + i] else { continue };
                        for bb in 0..4 {
                            for kk in 0..dof {
                                let Some(col) = map[e[bb] * dof + kk] else { continue };
                                let mut v = 0.0;
                                for jj in 0..2 {
                                    for l in 0..2 {
                                        v += b[jj][a] * aa[i][jj][kk][l] * b[l][bb];
                                    }
                                }
                                k.add(row, col, det * v);
                            }
                        }
                    }
                }
            }
        }
    }
    (r, clamped)
}

/// Consistent surface load vector, scaled by `load`.
fn external(mesh: &FeMesh, load: f64) -> Vec<f64> {
    let dof = mesh.dof();
    let mut f = vec![0.0; mesh.ndofs()];
    for &(na, nb, c) in &mesh.surface {
        let (xa, xb) = (mesh.nodes[na], mesh.nodes[nb]);
        let len = ((xb[0] - xa[0]).powi(2) + (xb[1] - xa[1]).powi(2)).sqrt();
        let ta = mesh.traction[na * dof + c].unwrap_or(0.0) * load;
        let tb = mesh.traction[nb * dof + c].unwrap_or(0.0) * load;
        for s in [-GP, GP] {
            let (n0, n1) = (0.5 * (1.0 - s), 0.5 * (1.0 + s));
            let t = n0 * ta + n1 * tb;
            f[na * dof + c] += 0.5 * len * n0 * t;
            f[nb * dof + c] += 0.5 * len * n1 * t;
        }
    }
    f
}

/// Nodal residual `R_int(u) - F_ext` of an actual-unit field by element
/// loop, together with the count of excluded Gauss points.
pub fn loop_residual(mesh: &FeMesh, physics: &PhysicsModel, u: &[f64]) -> (Vec<f64>, usize) {
    let (mut r, clamped) = internal(mesh, physics, u, None);
    for (ri, fi) in r.iter_mut().zip(external(mesh, 1.0)) {
        *ri -= fi;
    }
    (r, clamped)
}

/// Loop residual restricted to free dofs (zero elsewhere).
pub fn loop_reduced(mesh: &FeMesh, physics: &PhysicsModel, u: &[f64]) -> (Vec<f64>, usize) {
    let (mut r, clamped) = loop_residual(mesh, physics, u);
    for (k, v) in r.iter_mut().enumerate() {
        if !mesh.is_free(k) {
            *v = 0.0;
        }
    }
    (r, clamped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsSolution {
    pub grid: GridSpec,
    /// Nodal values, actual units, `nx ny dof`; zero outside the domain.
    pub values: Vec<f64>,
    pub converged: bool,
    /// Newton iterations per load step.
    pub iterations: Vec<usize>,
    /// Free-residual norms of the final load step, one per iterate.
    pub final_history: Vec<f64>,
    /// Internal force at each constrained dof, zero elsewhere.
    pub reactions: Vec<f64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    bvp: &'a str,
    physics: &'a str,
    nx: usize,
    ny: usize,
    converged: bool,
    iterations: &'a [usize],
    final_history: &'a [f64],
    /// Reaction totals per Dirichlet segment `(edge, component, force)`.
    reactions: Vec<(usize, usize, f64)>,
}

impl DnsSolution {
    /// Write `<stem>.bin` (field) and `<stem>.json` (convergence data and
    /// reaction totals).
    pub fn export(&self, dir: &Path, stem: &str, spec: &BvpSpec) -> Result<(), FemError> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.bin")))?);
        write_field(&mut f, self.grid.nx, self.grid.ny, self.grid.dof, &self.values)?;
        let bvp = spec.resolve(self.grid.nx, self.grid.ny)?;
        let reactions = spec
            .dirichlet
            .iter()
            .map(|s| {
                let r = reaction_force(self, &bvp, s.edge, s.component).unwrap_or(f64::NAN);
                (s.edge, s.component, r)
            })
            .collect();
        let side = Sidecar {
            bvp: &spec.name,
            physics: spec.physics.name(),
            nx: self.grid.nx,
            ny: self.grid.ny,
            converged: self.converged,
            iterations: &self.iterations,
            final_history: &self.final_history,
            reactions,
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }
}

/// Direct solve for diffusion and linear elasticity.
pub fn solve_linear(spec: &BvpSpec, nx: usize, ny: usize) -> Result<DnsSolution, FemError> {
    if matches!(spec.physics, PhysicsModel::NeoHookean { .. }) {
        return Err(FemError::Contract("solve_linear needs a linear physics model".into()));
    }
    solve_steps(spec, nx, ny, 1)
}

/// Newton with `steps` uniform load increments (Neo-Hookean).
pub fn solve_newton(spec: &BvpSpec, nx: usize, ny: usize, steps: usize) -> Result<DnsSolution, FemError> {
    if !matches!(spec.physics, PhysicsModel::NeoHookean { .. }) {
        return Err(FemError::Contract("solve_newton needs the Neo-Hookean model".into()));
    }
    solve_steps(spec, nx, ny, steps.max(1))
}

/// Solve with the default strategy for the physics model.
pub fn solve(spec: &BvpSpec, nx: usize, ny: usize) -> Result<DnsSolution, FemError> {
    match spec.physics {
        PhysicsModel::NeoHookean { .. } => solve_newton(spec, nx, ny, LOAD_STEPS),
        _ => solve_linear(spec, nx, ny),
    }
}

fn solve_steps(spec: &BvpSpec, nx: usize, ny: usize, steps: usize) -> Result<DnsSolution, FemError> {
    let bvp = spec.resolve(nx, ny)?;
    let mesh = FeMesh::new(&bvp);
    let physics = spec.physics;
    let n = mesh.ndofs();
    let mut map = vec![None; n];
    let mut nfree = 0;
    for (k, slot) in map.iter_mut().enumerate() {
        if mesh.is_free(k) {
            *slot = Some(nfree);
            nfree += 1;
        }
    }
    let bw = mesh.bandwidth();
    let mut u = vec![0.0; n];
    let mut iterations = Vec::with_capacity(steps);
    let mut history = Vec::new();
    for step in 1..=steps {
        let load = step as f64 / steps as f64;
        for (k, c) in mesh.constrained.iter().enumerate() {
            if let Some(v) = c {
                u[k] = v * load;
            }
        }
        let fext = external(&mesh, load);
        history.clear();
        let mut iters = 0;
        loop {
            let mut k = Banded::new(nfree, bw);
            let (rint, _) = internal(&mesh, &physics, &u, Some((&mut k, &map)));
            let mut rhs = vec![0.0; nfree];
            for (d, m) in map.iter().enumerate() {
                if let Some(m) = m {
                    rhs[*m] = fext[d] - rint[d];
                }
            }
            let norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            history.push(norm);
            if norm < NEWTON_TOL {
                break;
            }
            if iters == MAX_NEWTON || !norm.is_finite() {
                return Err(FemError::NoConvergence { step, residual: norm });
            }
            k.solve(&mut rhs)?;
            for (d, m) in map.iter().enumerate() {
                if let Some(m) = m {
                    u[d] += rhs[*m];
                }
            }
            iters += 1;
        }
        iterations.push(iters);
    }
    let (rint, _) = internal(&mesh, &physics, &u, None);
    let reactions = (0..n)
        .map(|k| if mesh.active[k] && mesh.constrained[k].is_some() { rint[k] } else { 0.0 })
        .collect();
    Ok(DnsSolution {
        grid: mesh.grid,
        values: u,
        converged: true,
        iterations,
        final_history: history,
        reactions,
    })
}

/// Sum of internal forces over the constrained nodes of polygon edge `edge`
/// for `component`.
pub fn reaction_force(
    sol: &DnsSolution,
    bvp: &ResolvedBvp,
    edge: usize,
    component: usize,
) -> Result<f64, FemError> {
    reaction_from(&sol.reactions, bvp, edge, component)
}

/// Edge sum of a nodal internal-force field over constrained nodes.
pub fn reaction_from(
    internal_force: &[f64],
    bvp: &ResolvedBvp,
    edge: usize,
    component: usize,
) -> Result<f64, FemError> {
    let dof = bvp.dof();
    let pixels = bvp
        .domain
        .edge_pixels
        .get(edge)
        .ok_or_else(|| FemError::Contract(format!("edge {edge} does not exist")))?;
    if component >= dof {
        return Err(FemError::Contract(format!("component {component} exceeds dof {dof}")));
    }
    if pixels.iter().any(|&p| !bvp.is_constrained(p, component)) {
        return Err(FemError::Contract(format!(
            "edge {edge} is not fully constrained in component {component}"
        )));
    }
    Ok(pixels.iter().map(|&p| internal_force[p * dof + component]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BcSegment, DomainShape};
    use approx::assert_abs_diff_eq;

    fn seg(edge: usize, component: usize, value: f64) -> BcSegment {
        BcSegment {
            edge,
            component,
            value,
        }
    }

    fn spec(physics: PhysicsModel, dirichlet: Vec<BcSegment>, neumann: Vec<BcSegment>) -> BvpSpec {
        BvpSpec {
            name: "t".into(),
            domain: DomainShape::full(),
            dirichlet,
            neumann,
            physics,
            tag: None,
            step: None,
        }
    }

    #[test]
    fn ramp_is_exact() {
        let s = spec(PhysicsModel::diffusion(), vec![seg(3, 0, 0.0), seg(1, 0, 1.0)], vec![]);
        let sol = solve_linear(&s, 9, 9).unwrap();
        let g = sol.grid;
        for i in 0..9 {
            for j in 0..9 {
                assert_abs_diff_eq!(sol.values[g.index(i, j)], g.coords(i, j)[0], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn flux_profile_peaks_at_loaded_edge() {
        let s = spec(PhysicsModel::diffusion(), vec![seg(3, 0, 0.0)], vec![seg(1, 0, 1.0)]);
        let sol = solve_linear(&s, 9, 9).unwrap();
        let g = sol.grid;
        for i in 0..9 {
            assert_abs_diff_eq!(sol.values[g.index(i, 4)], g.coords(i, 4)[0], epsilon = 1e-10);
        }
    }

    #[test]
    fn uniaxial_stretch_contracts_laterally() {
        // roller left (ux = 0), bottom uy = 0, right ux = 0.01
        let s = spec(
            PhysicsModel::linear_elastic(),
            vec![seg(3, 0, 0.0), seg(0, 1, 0.0), seg(1, 0, 0.01)],
            vec![],
        );
        let sol = solve_linear(&s, 6, 6).unwrap();
        let g = sol.grid;
        let top = sol.values[g.index(3, 5) * 2 + 1];
        // plane strain, free top: eps_yy = -lambda / (lambda + 2 mu) eps_xx
        let (l, m) = (crate::physics::LAME_LAMBDA, crate::physics::LAME_MU);
        assert_abs_diff_eq!(top, -l / (l + 2.0 * m) * 0.01, epsilon = 1e-12);
    }

    #[test]
    fn singular_without_constraints() {
        let s = spec(PhysicsModel::diffusion(), vec![], vec![seg(1, 0, 0.5)]);
        assert!(matches!(solve_linear(&s, 5, 5), Err(FemError::Singular(_))));
    }

    #[test]
    fn tangent_matches_differences() {
        let phys = PhysicsModel::neo_hookean();
        let g = [[0.12, -0.05], [0.08, -0.1]];
        let (_, a) = material(&phys, &g, 2).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            for l in 0..2 {
                let mut gp = g;
                let mut gm = g;
                gp[k][l] += h;
                gm[k][l] -= h;
                let (pp, _) = material(&phys, &gp, 2).unwrap();
                let (pm, _) = material(&phys, &gm, 2).unwrap();
                for i in 0..2 {
                    for jj in 0..2 {
                        let fd = (pp[i][jj] - pm[i][jj]) / (2.0 * h);
                        assert_abs_diff_eq!(a[i][jj][k][l], fd, epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_load_is_trivial() {
        let s = spec(
            PhysicsModel::neo_hookean(),
            vec![seg(3, 0, 0.0), seg(3, 1, 0.0)],
            vec![],
        );
        let sol = solve_newton(&s, 5, 5, 3).unwrap();
        assert!(sol.values.iter().all(|v| *v == 0.0));
        assert_eq!(sol.iterations, vec![0, 0, 0]);
    }
}
