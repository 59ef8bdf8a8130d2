use serde::{Deserialize, Serialize};

use super::{GridError, GridSpec};

const GEOM_TOL: f64 = 1e-9;

/// Geometric description of a problem domain on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainShape {
    /// Axis-aligned rectangle. Edges: 0 bottom, 1 right, 2 top, 3 left.
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    /// Closed polygon with counter-clockwise vertices; edge `k` runs from
    /// vertex `k` to vertex `k + 1`.
    Polygon { vertices: Vec<[f64; 2]> },
}

impl DomainShape {
    pub fn full() -> Self {
        DomainShape::Rect {
            x0: 0.0,
            x1: 1.0,
            y0: 0.0,
            y1: 1.0,
        }
    }

    pub fn vertices(&self) -> Vec<[f64; 2]> {
        match self {
            DomainShape::Rect { x0, x1, y0, y1 } => {
                vec![[*x0, *y0], [*x1, *y0], [*x1, *y1], [*x0, *y1]]
            }
            DomainShape::Polygon { vertices } => vertices.clone(),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.vertices().len()
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        let v = self.vertices();
        let n = v.len();
        for k in 0..n {
            if segment_distance(p, v[k], v[(k + 1) % n]) <= GEOM_TOL {
                return true;
            }
        }
        // even-odd ray cast along +x
        let mut inside = false;
        for k in 0..n {
            let (a, b) = (v[k], v[(k + 1) % n]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Rasterize onto `grid`: a pixel belongs to the domain iff its node is
    /// inside or on the closed polygon and it is a node of at least one
    /// element whose four nodes are all inside.
    pub fn rasterize(&self, grid: &GridSpec) -> Result<Domain, GridError> {
        let (nx, ny) = (grid.nx, grid.ny);
        let mut raw = vec![false; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                raw[grid.index(i, j)] = self.contains(grid.coords(i, j));
            }
        }
        let active = active_elements(grid, &raw);
        if !active.iter().any(|&a| a) {
            return Err(GridError::EmptyDomain);
        }
        let mut mask = vec![false; nx * ny];
        for i in 0..nx - 1 {
            for j in 0..ny - 1 {
                if active[i * (ny - 1) + j] {
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        mask[grid.index(i + di, j + dj)] = true;
                    }
                }
            }
        }
        let boundary = boundary_pixels(grid, &mask);

        let verts = self.vertices();
        let ne = verts.len();
        let mut edge_pixels = vec![Vec::new(); ne];
        for i in 0..nx {
            for j in 0..ny {
                let p = grid.index(i, j);
                if !boundary[p] {
                    continue;
                }
                let x = grid.coords(i, j);
                let d: Vec<f64> = (0..ne)
                    .map(|k| segment_distance(x, verts[k], verts[(k + 1) % ne]))
                    .collect();
                let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
                for k in 0..ne {
                    if d[k] <= dmin + GEOM_TOL {
                        edge_pixels[k].push(p);
                    }
                }
            }
        }
        Ok(Domain {
            grid: *grid,
            mask,
            boundary,
            edge_pixels,
        })
    }
}

/// A rasterized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub grid: GridSpec,
    /// Per-pixel membership, indexed by `grid.index(i, j)`.
    pub mask: Vec<bool>,
    /// Domain pixels touching an element outside the domain.
    pub boundary: Vec<bool>,
    /// Boundary pixels assigned to each polygon edge (nearest edge; corners
    /// belong to both adjacent edges).
    pub edge_pixels: Vec<Vec<usize>>,
}

impl Domain {
    pub fn pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary.iter().filter(|&&m| m).count()
    }

    /// Elements `(i, j)` (lower-left node) whose four nodes are in the domain.
    pub fn active_elements(&self) -> Vec<bool> {
        active_elements(&self.grid, &self.mask)
    }
}

fn active_elements(grid: &GridSpec, mask: &[bool]) -> Vec<bool> {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut active = vec![false; (nx - 1) * (ny - 1)];
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            active[i * (ny - 1) + j] = mask[grid.index(i, j)]
                && mask[grid.index(i + 1, j)]
                && mask[grid.index(i, j + 1)]
                && mask[grid.index(i + 1, j + 1)];
        }
    }
    active
}

fn boundary_pixels(grid: &GridSpec, mask: &[bool]) -> Vec<bool> {
    let (nx, ny) = (grid.nx, grid.ny);
    let active = active_elements(grid, mask);
    let elem = |i: isize, j: isize| -> bool {
        if i < 0 || j < 0 || i >= nx as isize - 1 || j >= ny as isize - 1 {
            false
        } else {
            active[i as usize * (ny - 1) + j as usize]
        }
    };
    let mut out = vec![false; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            if !mask[grid.index(i, j)] {
                continue;
            }
            let (ii, jj) = (i as isize, j as isize);
            let interior =
                elem(ii - 1, jj - 1) && elem(ii - 1, jj) && elem(ii, jj - 1) && elem(ii, jj);
            out[grid.index(i, j)] = !interior;
        }
    }
    out
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}
