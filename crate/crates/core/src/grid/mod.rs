//! Background pixel grid, boundary-value problem description and the
//! boundary-condition image fed to the surrogate.

mod bvp;
mod domain;
mod image;
mod suite;

pub use bvp::{BcSegment, BvpSpec, ResolvedBvp, StepTag};
pub use domain::{Domain, DomainShape};
pub use image::{
    augment, decode_bvp, encode_bvp, masks_from_input, read_field, write_field, BcImage, Dataset,
    DecodedBcs, Masks,
    PixelClass, MARGIN, INTERIOR_FILL,
};
pub use suite::{
    lshape, make_suite, octagon, rectangles, CutLine, Magnitudes, Suite, SuiteId, SuiteManifest,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid must have at least 2x2 nodes, got {nx}x{ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("boundary value {value} on edge {edge} component {component} is outside (-1, 1]")]
    Range {
        edge: usize,
        component: usize,
        value: f64,
    },
    #[error("edge {edge} component {component} is both Dirichlet and Neumann")]
    Overlap { edge: usize, component: usize },
    #[error("edge {edge} does not exist (domain has {count} edges)")]
    UnknownEdge { edge: usize, count: usize },
    #[error("component {component} exceeds dof {dof}")]
    UnknownComponent { component: usize, dof: usize },
    #[error("domain covers no complete element")]
    EmptyDomain,
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error("augmentation needs at least one copy")]
    NoCopies,
    #[error("bad image file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Fixed `[0, 1] x [0, 1]` background grid of `nx x ny` nodes (pixels).
///
/// The first image axis runs along X and the second along Y, so pixel
/// `(i, j)` sits at `(i h_x, j h_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dof: usize,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dof: usize) -> Result<Self, GridError> {
        if nx < 2 || ny < 2 {
            return Err(GridError::TooSmall { nx, ny });
        }
        Ok(Self { nx, ny, dof })
    }

    pub fn square(n: usize, dof: usize) -> Result<Self, GridError> {
        Self::new(n, n, dof)
    }

    pub fn hx(&self) -> f64 {
        1.0 / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / (self.ny - 1) as f64
    }

    pub fn pixels(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn coords(&self, i: usize, j: usize) -> [f64; 2] {
        [i as f64 * self.hx(), j as f64 * self.hy()]
    }
}

/// Affine map between actual units `a` in `[-1, 1]` and scaled units `s = (a + 1) / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScaleMap;

impl ScaleMap {
    #[inline]
    pub fn scale(a: f64) -> f64 {
        0.5 * (a + 1.0)
    }

    #[inline]
    pub fn unscale(s: f64) -> f64 {
        2.0 * s - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn grid_rejects_degenerate() {
        assert!(GridSpec::new(1, 5, 1).is_err());
        let g = GridSpec::square(16, 1).unwrap();
        assert!((g.hx() - 1.0 / 15.0).abs() < 1e-16);
    }

    #[test]
    fn scale_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x: f64 = rng.gen();
            assert!((ScaleMap::scale(ScaleMap::unscale(x)) - x).abs() <= 1e-15);
        }
        assert_eq!(ScaleMap::unscale(0.5), 0.0);
        assert_eq!(ScaleMap::scale(0.0), 0.5);
    }
}
