use serde::{Deserialize, Serialize};

use super::{Domain, DomainShape, GridError, GridSpec};
use crate::physics::PhysicsModel;

/// A boundary condition on one polygon edge and one solution component,
/// with its value in actual units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcSegment {
    pub edge: usize,
    pub component: usize,
    pub value: f64,
}

/// Role of a loading step in interpolation/extrapolation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepTag {
    Train,
    Interpolate,
    Extrapolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSpec {
    pub name: String,
    pub domain: DomainShape,
    pub dirichlet: Vec<BcSegment>,
    /// Unlisted boundary pixels carry a zero flux/traction.
    pub neumann: Vec<BcSegment>,
    pub physics: PhysicsModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<StepTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

impl BvpSpec {
    pub fn dof(&self) -> usize {
        self.physics.dof()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let count = self.domain.edge_count();
        let dof = self.dof();
        for s in self.dirichlet.iter().chain(&self.neumann) {
            if s.edge >= count {
                return Err(GridError::UnknownEdge {
                    edge: s.edge,
                    count,
                });
            }
            if s.component >= dof {
                return Err(GridError::UnknownComponent {
                    component: s.component,
                    dof,
                });
            }
            // scaled value must be strictly positive to be told apart from
            // the sentinels
            if !(s.value > -1.0 && s.value <= 1.0) {
                return Err(GridError::Range {
                    edge: s.edge,
                    component: s.component,
                    value: s.value,
                });
            }
        }
        for d in &self.dirichlet {
            if self
                .neumann
                .iter()
                .any(|n| n.edge == d.edge && n.component == d.component)
            {
                return Err(GridError::Overlap {
                    edge: d.edge,
                    component: d.component,
                });
            }
        }
        Ok(())
    }

    /// Resolve segments to pixels on `grid`. Pixels shared by two edges take
    /// the first listed Dirichlet value; Neumann pixels exclude every pixel
    /// that is Dirichlet on the same component and take the first listed
    /// Neumann value.
    pub fn resolve(&self, nx: usize, ny: usize) -> Result<ResolvedBvp, GridError> {
        self.validate()?;
        let dof = self.dof();
        let grid = GridSpec::new(nx, ny, dof)?;
        let domain = self.domain.rasterize(&grid)?;
        let np = grid.pixels();
        let mut dirichlet = vec![None; np * dof];
        for s in &self.dirichlet {
            for &p in &domain.edge_pixels[s.edge] {
                let slot = &mut dirichlet[p * dof + s.component];
                if slot.is_none() {
                    *slot = Some(s.value);
                }
            }
        }
        let mut neumann = vec![None; np * dof];
        let mut surface = Vec::new();
        for s in &self.neumann {
            let c = s.component;
            let pixels: Vec<usize> = domain.edge_pixels[s.edge]
                .iter()
                .copied()
                .filter(|&p| dirichlet[p * dof + c].is_none())
                .collect();
            for &p in &pixels {
                let slot = &mut neumann[p * dof + c];
                if slot.is_none() {
                    *slot = Some(s.value);
                }
            }
            for (ia, &a) in pixels.iter().enumerate() {
                for &b in &pixels[ia + 1..] {
                    let (lo, hi) = (a.min(b), a.max(b));
                    let adjacent = hi - lo == 1 && hi % ny != 0 || hi - lo == ny;
                    if adjacent && !surface.contains(&(lo, hi, c)) {
                        surface.push((lo, hi, c));
                    }
                }
            }
        }
        surface.sort_unstable();
        Ok(ResolvedBvp {
            grid,
            domain,
            dirichlet,
            neumann,
            surface,
        })
    }
}

/// Pixel-level view of a [`BvpSpec`] on a concrete grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBvp {
    pub grid: GridSpec,
    pub domain: Domain,
    /// Actual Dirichlet value per `(pixel, component)`.
    pub dirichlet: Vec<Option<f64>>,
    /// Actual Neumann value per `(pixel, component)`.
    pub neumann: Vec<Option<f64>>,
    /// Two-node surface elements `(pixel_a, pixel_b, component)` with
    /// `pixel_a < pixel_b` carrying a prescribed flux or traction.
    pub surface: Vec<(usize, usize, usize)>,
}

impl ResolvedBvp {
    pub fn dof(&self) -> usize {
        self.grid.dof
    }

    pub fn is_constrained(&self, pixel: usize, component: usize) -> bool {
        self.dirichlet[pixel * self.dof() + component].is_some()
    }

    /// True when the residual at this entry is part of the reduced residual.
    pub fn is_free(&self, pixel: usize, component: usize) -> bool {
        self.domain.mask[pixel] && !self.is_constrained(pixel, component)
    }
}
