use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BcSegment, BvpSpec, DomainShape, GridError, StepTag};
use crate::physics::PhysicsModel;

pub const MANIFEST_VERSION: u32 = 1;

/// Built-in BVP collections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SuiteId {
    #[serde(rename = "diffusion-20")]
    Diffusion20,
    #[serde(rename = "elasticity-30-linear")]
    Elasticity30Linear,
    #[serde(rename = "elasticity-30-nonlinear")]
    Elasticity30Nonlinear,
    #[serde(rename = "octagon-1")]
    Octagon1,
    #[serde(rename = "lshape-steps")]
    LshapeSteps,
    #[serde(rename = "nonlinear-steps")]
    NonlinearSteps,
}

impl SuiteId {
    pub const ALL: [SuiteId; 6] = [
        SuiteId::Diffusion20,
        SuiteId::Elasticity30Linear,
        SuiteId::Elasticity30Nonlinear,
        SuiteId::Octagon1,
        SuiteId::LshapeSteps,
        SuiteId::NonlinearSteps,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteId::Diffusion20 => "diffusion-20",
            SuiteId::Elasticity30Linear => "elasticity-30-linear",
            SuiteId::Elasticity30Nonlinear => "elasticity-30-nonlinear",
            SuiteId::Octagon1 => "octagon-1",
            SuiteId::LshapeSteps => "lshape-steps",
            SuiteId::NonlinearSteps => "nonlinear-steps",
        }
    }

    pub fn physics(&self) -> PhysicsModel {
        match self {
            SuiteId::Diffusion20 | SuiteId::Octagon1 => PhysicsModel::diffusion(),
            SuiteId::Elasticity30Linear | SuiteId::LshapeSteps => PhysicsModel::linear_elastic(),
            SuiteId::Elasticity30Nonlinear | SuiteId::NonlinearSteps => {
                PhysicsModel::neo_hookean()
            }
        }
    }

    /// Output resolution used for the suite unless overridden.
    pub fn default_grid(&self) -> usize {
        match self {
            SuiteId::Octagon1 | SuiteId::LshapeSteps => 32,
            _ => 16,
        }
    }

    /// Magnitudes of the non-zero loads in actual units. For stepped suites
    /// these are the final-step values.
    pub fn default_magnitudes(&self) -> Magnitudes {
        let (dirichlet, neumann) = match self {
            SuiteId::Diffusion20 => (1.0, 1.0),
            SuiteId::Octagon1 => (1.0, 0.5),
            SuiteId::Elasticity30Linear => (0.1, 0.5),
            SuiteId::Elasticity30Nonlinear => (0.3, 1.0),
            SuiteId::LshapeSteps => (0.1, 0.0),
            SuiteId::NonlinearSteps => (0.3, 1.0),
        };
        Magnitudes { dirichlet, neumann }
    }
}

impl fmt::Display for SuiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteId {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuiteId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| GridError::UnknownSuite(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Magnitudes {
    pub dirichlet: f64,
    pub neumann: f64,
}

/// Straight pixel line used for solution profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum CutLine {
    /// Constant Y, varying X.
    Horizontal { y: f64 },
    /// Constant X, varying Y.
    Vertical { x: f64 },
}

impl CutLine {
    /// Pixels `(i, j)` along the line on an `nx x ny` grid.
    pub fn pixels(&self, nx: usize, ny: usize) -> Vec<(usize, usize)> {
        match *self {
            CutLine::Horizontal { y } => {
                let j = (y * (ny - 1) as f64).round() as usize;
                (0..nx).map(|i| (i, j.min(ny - 1))).collect()
            }
            CutLine::Vertical { x } => {
                let i = (x * (nx - 1) as f64).round() as usize;
                (0..ny).map(|j| (i.min(nx - 1), j)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub id: SuiteId,
    pub grid: usize,
    pub magnitudes: Magnitudes,
    pub specs: Vec<BvpSpec>,
    pub cut_lines: Vec<CutLine>,
}

/// Versioned on-disk description of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub version: u32,
    pub suite: SuiteId,
    pub grid: usize,
    pub magnitudes: Magnitudes,
    pub cut_lines: Vec<CutLine>,
    pub bvps: Vec<BvpSpec>,
}

impl Suite {
    pub fn build(id: SuiteId) -> Self {
        Self::with_magnitudes(id, id.default_magnitudes())
    }

    pub fn with_magnitudes(id: SuiteId, magnitudes: Magnitudes) -> Self {
        let specs = match id {
            SuiteId::Diffusion20 => diffusion_20(magnitudes),
            SuiteId::Elasticity30Linear | SuiteId::Elasticity30Nonlinear => {
                elasticity_30(id.physics(), magnitudes)
            }
            SuiteId::Octagon1 => octagon_1(magnitudes),
            SuiteId::LshapeSteps => lshape_steps(magnitudes),
            SuiteId::NonlinearSteps => nonlinear_steps(magnitudes),
        };
        Self {
            id,
            grid: id.default_grid(),
            magnitudes,
            specs,
            cut_lines: vec![CutLine::Horizontal { y: 0.5 }, CutLine::Vertical { x: 0.5 }],
        }
    }

    pub fn manifest(&self) -> SuiteManifest {
        SuiteManifest {
            version: MANIFEST_VERSION,
            suite: self.id,
            grid: self.grid,
            magnitudes: self.magnitudes,
            cut_lines: self.cut_lines.clone(),
            bvps: self.specs.clone(),
        }
    }

    pub fn from_manifest(m: SuiteManifest) -> Result<Self, GridError> {
        if m.version != MANIFEST_VERSION {
            return Err(GridError::Format(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        for s in &m.bvps {
            s.validate()?;
        }
        Ok(Self {
            id: m.suite,
            grid: m.grid,
            magnitudes: m.magnitudes,
            specs: m.bvps,
            cut_lines: m.cut_lines,
        })
    }
}

/// Specs of a named suite with default magnitudes.
pub fn make_suite(name: &str) -> Result<Vec<BvpSpec>, GridError> {
    Ok(Suite::build(name.parse()?).specs)
}

/// The five rectangles on the 16x16 background grid (pixel units of 1/15).
pub fn rectangles() -> [DomainShape; 5] {
    let u = |k: f64| k / 15.0;
    [
        DomainShape::Rect {
            x0: 0.0,
            x1: u(10.0),
            y0: 0.0,
            y1: u(10.0),
        },
        DomainShape::Rect {
            x0: u(5.0),
            x1: 1.0,
            y0: u(5.0),
            y1: 1.0,
        },
        DomainShape::Rect {
            x0: 0.0,
            x1: 1.0,
            y0: u(3.0),
            y1: u(12.0),
        },
        DomainShape::Rect {
            x0: u(2.0),
            x1: u(13.0),
            y0: 0.0,
            y1: 1.0,
        },
        DomainShape::full(),
    ]
}

const BOTTOM: usize = 0;
const RIGHT: usize = 1;
const TOP: usize = 2;
const LEFT: usize = 3;

fn seg(edge: usize, component: usize, value: f64) -> BcSegment {
    BcSegment {
        edge,
        component,
        value,
    }
}

fn fixed(edge: usize) -> [BcSegment; 2] {
    [seg(edge, 0, 0.0), seg(edge, 1, 0.0)]
}

fn bvp(
    name: String,
    domain: DomainShape,
    dirichlet: Vec<BcSegment>,
    neumann: Vec<BcSegment>,
    physics: PhysicsModel,
) -> BvpSpec {
    BvpSpec {
        name,
        domain,
        dirichlet,
        neumann,
        physics,
        tag: None,
        step: None,
    }
}

fn diffusion_20(m: Magnitudes) -> Vec<BvpSpec> {
    let physics = PhysicsModel::diffusion();
    let mut out = Vec::new();
    for (d, domain) in rectangles().into_iter().enumerate() {
        let sets: [(Vec<BcSegment>, Vec<BcSegment>); 4] = [
            // 1: non-zero Dirichlet
            (vec![seg(LEFT, 0, 0.0), seg(RIGHT, 0, m.dirichlet)], vec![]),
            // 2: non-zero flux on the right edge
            (vec![seg(LEFT, 0, 0.0)], vec![seg(RIGHT, 0, m.neumann)]),
            // 3: non-zero Dirichlet along Y
            (vec![seg(BOTTOM, 0, 0.0), seg(TOP, 0, m.dirichlet)], vec![]),
            // 4: non-zero flux on the top edge
            (vec![seg(BOTTOM, 0, 0.0)], vec![seg(TOP, 0, m.neumann)]),
        ];
        for (b, (dir, neu)) in sets.into_iter().enumerate() {
            out.push(bvp(
                format!("domain{}-bc{}", d + 1, b + 1),
                domain.clone(),
                dir,
                neu,
                physics,
            ));
        }
    }
    out
}

fn elasticity_30(physics: PhysicsModel, m: Magnitudes) -> Vec<BvpSpec> {
    let mut out = Vec::new();
    for (d, domain) in rectangles().into_iter().enumerate() {
        let sets: [(Vec<BcSegment>, Vec<BcSegment>); 6] = [
            // 1: stretch by prescribed displacement
            (
                [fixed(LEFT).to_vec(), vec![seg(RIGHT, 0, m.dirichlet)]].concat(),
                vec![],
            ),
            // 2: axial traction
            (fixed(LEFT).to_vec(), vec![seg(RIGHT, 0, m.neumann)]),
            // 3: mixed, displacement in X and traction in Y
            (
                [fixed(LEFT).to_vec(), vec![seg(RIGHT, 0, m.dirichlet)]].concat(),
                vec![seg(RIGHT, 1, m.neumann)],
            ),
            // 4: stretch along Y by prescribed displacement
            (
                [fixed(BOTTOM).to_vec(), vec![seg(TOP, 1, m.dirichlet)]].concat(),
                vec![],
            ),
            // 5: traction along Y
            (fixed(BOTTOM).to_vec(), vec![seg(TOP, 1, m.neumann)]),
            // 6: shear traction
            (fixed(LEFT).to_vec(), vec![seg(RIGHT, 1, 0.5 * m.neumann)]),
        ];
        for (b, (dir, neu)) in sets.into_iter().enumerate() {
            out.push(bvp(
                format!("domain{}-bc{}", d + 1, b + 1),
                domain.clone(),
                dir,
                neu,
                physics,
            ));
        }
    }
    out
}

pub fn octagon() -> DomainShape {
    DomainShape::Polygon {
        vertices: vec![
            [0.3, 0.0],
            [0.7, 0.0],
            [1.0, 0.3],
            [1.0, 0.7],
            [0.7, 1.0],
            [0.3, 1.0],
            [0.0, 0.7],
            [0.0, 0.3],
        ],
    }
}

pub fn lshape() -> DomainShape {
    DomainShape::Polygon {
        vertices: vec![
            [0.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.5],
            [0.5, 0.5],
            [0.5, 1.0],
            [0.0, 1.0],
        ],
    }
}

fn octagon_1(m: Magnitudes) -> Vec<BvpSpec> {
    // zero on the bottom edge, non-zero on the upper-right cut, inflow on the left
    vec![bvp(
        "octagon".into(),
        octagon(),
        vec![seg(0, 0, 0.0), seg(3, 0, m.dirichlet)],
        vec![seg(6, 0, m.neumann)],
        PhysicsModel::diffusion(),
    )]
}

const STEPS: usize = 10;

/// Step tags for ten loading steps: training on 1, 3, 5, 7, 10 and
/// interpolation on the rest.
fn step_tag(step: usize) -> StepTag {
    if [1, 3, 5, 7, 10].contains(&step) {
        StepTag::Train
    } else {
        StepTag::Interpolate
    }
}

fn lshape_steps(m: Magnitudes) -> Vec<BvpSpec> {
    (1..=STEPS)
        .map(|l| {
            let v = m.dirichlet * l as f64 / STEPS as f64;
            let mut s = bvp(
                format!("lshape-step{l:02}"),
                lshape(),
                vec![seg(0, 0, 0.0), seg(0, 1, 0.0), seg(5, 1, v)],
                vec![],
                PhysicsModel::linear_elastic(),
            );
            s.tag = Some(step_tag(l));
            s.step = Some(l);
            s
        })
        .collect()
}

fn nonlinear_steps(m: Magnitudes) -> Vec<BvpSpec> {
    (1..=STEPS)
        .map(|l| {
            let f = l as f64 / STEPS as f64;
            let mut s = bvp(
                format!("stretch-step{l:02}"),
                DomainShape::full(),
                [fixed(LEFT).to_vec(), vec![seg(RIGHT, 0, m.dirichlet * f)]].concat(),
                vec![seg(RIGHT, 1, m.neumann * f)],
                PhysicsModel::neo_hookean(),
            );
            s.tag = Some(step_tag(l));
            s.step = Some(l);
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_sizes() {
        assert_eq!(make_suite("diffusion-20").unwrap().len(), 20);
        assert_eq!(make_suite("elasticity-30-linear").unwrap().len(), 30);
        assert_eq!(make_suite("elasticity-30-nonlinear").unwrap().len(), 30);
        assert_eq!(make_suite("octagon-1").unwrap().len(), 1);
        assert_eq!(make_suite("lshape-steps").unwrap().len(), 10);
        assert_eq!(make_suite("nonlinear-steps").unwrap().len(), 10);
        assert!(matches!(
            make_suite("heat-7"),
            Err(GridError::UnknownSuite(_))
        ));
    }

    #[test]
    fn lshape_steps_monotone_and_tagged() {
        let s = make_suite("lshape-steps").unwrap();
        let mags: Vec<f64> = s.iter().map(|b| b.dirichlet[2].value).collect();
        assert!(mags.windows(2).all(|w| w[1] > w[0]));
        let train = s.iter().filter(|b| b.tag == Some(StepTag::Train)).count();
        let inter = s
            .iter()
            .filter(|b| b.tag == Some(StepTag::Interpolate))
            .count();
        assert_eq!((train, inter), (5, 5));
        // steps differ only in the loaded value
        for b in &s[1..] {
            assert_eq!(b.domain, s[0].domain);
            assert_eq!(b.neumann, s[0].neumann);
            assert_eq!(b.dirichlet[..2], s[0].dirichlet[..2]);
        }
    }

    #[test]
    fn every_suite_member_validates() {
        for id in SuiteId::ALL {
            let suite = Suite::build(id);
            for s in &suite.specs {
                s.resolve(suite.grid, suite.grid)
                    .unwrap_or_else(|e| panic!("{id} {}: {e}", s.name));
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let suite = Suite::build(SuiteId::NonlinearSteps);
        let json = serde_json::to_string(&suite.manifest()).unwrap();
        let back: SuiteManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(Suite::from_manifest(back).unwrap(), suite);
    }
}
