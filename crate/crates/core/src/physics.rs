use serde::{Deserialize, Serialize};

/// Diffusivity used for every diffusion suite.
pub const DIFFUSIVITY: f64 = 1.0;
/// Lamé constants shared by the linear and Neo-Hookean suites.
pub const LAME_LAMBDA: f64 = 14.4231;
pub const LAME_MU: f64 = 9.61538;
/// Admissible range of det F; Gauss points outside are dropped from the residual.
pub const J_MIN: f64 = 0.1;
pub const J_MAX: f64 = 5.0;

/// Constitutive description of a boundary-value problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhysicsModel {
    Diffusion {
        diffusivity: f64,
    },
    LinearElastic {
        lambda: f64,
        mu: f64,
    },
    NeoHookean {
        lambda: f64,
        mu: f64,
        j_min: f64,
        j_max: f64,
    },
}

impl PhysicsModel {
    pub fn diffusion() -> Self {
        PhysicsModel::Diffusion {
            diffusivity: DIFFUSIVITY,
        }
    }

    pub fn linear_elastic() -> Self {
        PhysicsModel::LinearElastic {
            lambda: LAME_LAMBDA,
            mu: LAME_MU,
        }
    }

    pub fn neo_hookean() -> Self {
        PhysicsModel::NeoHookean {
            lambda: LAME_LAMBDA,
            mu: LAME_MU,
            j_min: J_MIN,
            j_max: J_MAX,
        }
    }

    /// Unknowns per node.
    pub fn dof(&self) -> usize {
        match self {
            PhysicsModel::Diffusion { .. } => 1,
            _ => 2,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            PhysicsModel::Diffusion { diffusivity } => diffusivity > 0.0,
            PhysicsModel::LinearElastic { lambda, mu } => lambda > 0.0 && mu > 0.0,
            PhysicsModel::NeoHookean {
                lambda,
                mu,
                j_min,
                j_max,
            } => lambda > 0.0 && mu > 0.0 && j_min < j_max,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PhysicsModel::Diffusion { .. } => "diffusion",
            PhysicsModel::LinearElastic { .. } => "linear_elastic",
            PhysicsModel::NeoHookean { .. } => "neo_hookean",
        }
    }
}

/// Neo-Hookean first Piola-Kirchhoff stress for a 2D deformation gradient
/// `f = [F11, F12, F21, F22]`:
/// `P = mu F + (lambda (J^2 - J) - mu) F^-T`.
pub fn neo_hookean_piola(f: [f64; 4], lambda: f64, mu: f64) -> [f64; 4] {
    let j = f[0] * f[3] - f[1] * f[2];
    // F^-T = cof(F) / J
    let finv_t = [f[3] / j, -f[2] / j, -f[1] / j, f[0] / j];
    let c = lambda * (j * j - j) - mu;
    [
        mu * f[0] + c * finv_t[0],
        mu * f[1] + c * finv_t[1],
        mu * f[2] + c * finv_t[2],
        mu * f[3] + c * finv_t[3],
    ]
}

/// Strain energy density `W = mu/2 (tr C - 2 - 2 ln J) + lambda/2 (J - 1)^2`
/// (plane strain: the out-of-plane stretch is 1).
pub fn neo_hookean_energy(f: [f64; 4], lambda: f64, mu: f64) -> f64 {
    let j = f[0] * f[3] - f[1] * f[2];
    let tr_c = f.iter().map(|v| v * v).sum::<f64>();
    0.5 * mu * (tr_c - 2.0 - 2.0 * j.ln()) + 0.5 * lambda * (j - 1.0).powi(2)
}
