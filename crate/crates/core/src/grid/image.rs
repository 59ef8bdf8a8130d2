use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{BvpSpec, GridError, GridSpec, ScaleMap};

/// Sentinel for pixels between the domain and the background grid.
pub const MARGIN: f64 = -1.0;
/// Sentinel for unknown domain pixels in the Dirichlet channels; replaced by
/// uniform noise at the input layer.
pub const INTERIOR_FILL: f64 = -2.0;

const MAGIC: &[u8; 4] = b"BCIM";

/// Encoded boundary-value problem: `nx x ny x (2 dof)` scaled values laid
/// out row-major with channel order `[D_0, .., D_{dof-1}, N_0, .., N_{dof-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcImage {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Classification of one pixel for one solution component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Margin,
    Interior,
    Dirichlet,
    Neumann,
}

impl BcImage {
    pub fn new(nx: usize, ny: usize, channels: usize) -> Self {
        Self {
            nx,
            ny,
            channels,
            data: vec![0.0; nx * ny * channels],
        }
    }

    pub fn dof(&self) -> usize {
        self.channels / 2
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            nx: self.nx,
            ny: self.ny,
            dof: self.dof(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.ny + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[(i * self.ny + j) * self.channels + c] = v;
    }

    pub fn dirichlet(&self, pixel: usize, component: usize) -> f64 {
        self.data[pixel * self.channels + component]
    }

    pub fn neumann(&self, pixel: usize, component: usize) -> f64 {
        self.data[pixel * self.channels + self.dof() + component]
    }

    pub fn classify(&self, pixel: usize, component: usize) -> PixelClass {
        let d = self.dirichlet(pixel, component);
        let n = self.neumann(pixel, component);
        if d == MARGIN {
            PixelClass::Margin
        } else if d > 0.0 {
            PixelClass::Dirichlet
        } else if n > 0.0 {
            PixelClass::Neumann
        } else {
            PixelClass::Interior
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        write_field(&mut w, self.nx, self.ny, self.channels, &self.data)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, GridError> {
        let (nx, ny, channels, data) = read_field(r)?;
        Ok(Self {
            nx,
            ny,
            channels,
            data,
        })
    }
}

/// Write a `nx x ny x channels` field in the shared binary layout:
/// magic `BCIM`, `u32` nx, ny, channels, then little-endian `f64` values.
pub fn write_field<W: Write>(
    w: &mut W,
    nx: usize,
    ny: usize,
    channels: usize,
    data: &[f64],
) -> Result<(), GridError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(nx as u32)?;
    w.write_u32::<LittleEndian>(ny as u32)?;
    w.write_u32::<LittleEndian>(channels as u32)?;
    for &v in data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<(usize, usize, usize, Vec<f64>), GridError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GridError::Format(format!("bad magic {magic:?}")));
    }
    let nx = r.read_u32::<LittleEndian>()? as usize;
    let ny = r.read_u32::<LittleEndian>()? as usize;
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; nx * ny * channels];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Ok((nx, ny, channels, data))
}

/// Encode `spec` on an `nx x ny` grid.
pub fn encode_bvp(spec: &BvpSpec, nx: usize, ny: usize) -> Result<BcImage, GridError> {
    let r = spec.resolve(nx, ny)?;
    let dof = r.dof();
    let mut img = BcImage::new(nx, ny, 2 * dof);
    for p in 0..r.grid.pixels() {
        for c in 0..dof {
            let (d, n) = if !r.domain.mask[p] {
                (MARGIN, MARGIN)
            } else {
                (
                    r.dirichlet[p * dof + c].map_or(INTERIOR_FILL, ScaleMap::scale),
                    r.neumann[p * dof + c].map_or(0.0, ScaleMap::scale),
                )
            };
            img.data[p * 2 * dof + c] = d;
            img.data[p * 2 * dof + dof + c] = n;
        }
    }
    Ok(img)
}

/// Per-pixel boundary data recovered from an image, in actual units.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBcs {
    pub domain: Vec<bool>,
    pub dirichlet: Vec<Option<f64>>,
    pub neumann: Vec<Option<f64>>,
}

pub fn decode_bvp(img: &BcImage) -> DecodedBcs {
    let dof = img.dof();
    let np = img.nx * img.ny;
    let mut out = DecodedBcs {
        domain: vec![false; np],
        dirichlet: vec![None; np * dof],
        neumann: vec![None; np * dof],
    };
    for p in 0..np {
        out.domain[p] = img.dirichlet(p, 0) != MARGIN;
        for c in 0..dof {
            let d = img.dirichlet(p, c);
            if d > 0.0 {
                out.dirichlet[p * dof + c] = Some(ScaleMap::unscale(d));
            }
            let n = img.neumann(p, c);
            if n > 0.0 {
                out.neumann[p * dof + c] = Some(ScaleMap::unscale(n));
            }
        }
    }
    out
}

/// Domain mask (`nx x ny`) and reverse Dirichlet mask (`nx x ny x dof`).
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub bulk: Vec<f64>,
    pub dirichlet_rev: Vec<f64>,
}

pub fn masks_from_input(img: &BcImage) -> Masks {
    let dof = img.dof();
    let np = img.nx * img.ny;
    let mut bulk = vec![1.0; np];
    let mut dirichlet_rev = vec![1.0; np * dof];
    for p in 0..np {
        if img.dirichlet(p, 0) == MARGIN {
            bulk[p] = 0.0;
        }
        for c in 0..dof {
            if img.dirichlet(p, c) > 0.0 {
                dirichlet_rev[p * dof + c] = 0.0;
            }
        }
    }
    Masks {
        bulk,
        dirichlet_rev,
    }
}

/// Augmented dataset. Records are duplicates of the unique inputs; the
/// interior noise is drawn afresh on every forward pass, so only the copy
/// count is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<BcImage>,
    pub copies: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len() * self.copies
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input behind record `r`.
    pub fn input_of(&self, record: usize) -> usize {
        record / self.copies
    }

    pub fn record(&self, record: usize) -> &BcImage {
        &self.inputs[self.input_of(record)]
    }
}

pub fn augment(inputs: Vec<BcImage>, copies: usize) -> Result<Dataset, GridError> {
    if copies == 0 {
        return Err(GridError::NoCopies);
    }
    Ok(Dataset { inputs, copies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BcSegment, DomainShape};
    use crate::physics::PhysicsModel;

    fn all_zero_dirichlet() -> BvpSpec {
        BvpSpec {
            name: "zero".into(),
            domain: DomainShape::full(),
            dirichlet: (0..4)
                .map(|edge| BcSegment {
                    edge,
                    component: 0,
                    value: 0.0,
                })
                .collect(),
            neumann: vec![],
            physics: PhysicsModel::diffusion(),
            tag: None,
            step: None,
        }
    }

    #[test]
    fn zero_dirichlet_full_grid() {
        let img = encode_bvp(&all_zero_dirichlet(), 6, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let ring = i == 0 || j == 0 || i == 5 || j == 5;
                assert_eq!(img.get(i, j, 0), if ring { 0.5 } else { -2.0 });
                assert_eq!(img.get(i, j, 1), 0.0);
            }
        }
        let m = masks_from_input(&img);
        assert!(m.bulk.iter().all(|&v| v == 1.0));
        assert_eq!(m.dirichlet_rev.iter().filter(|&&v| v == 0.0).count(), 20);
    }

    #[test]
    fn serialization_round_trip() {
        let img = encode_bvp(&all_zero_dirichlet(), 5, 7).unwrap();
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 5 * 7 * 2 * 8);
        assert_eq!(&buf[..4], b"BCIM");
        assert_eq!(BcImage::read_from(&buf[..]).unwrap(), img);
        buf[0] = b'X';
        assert!(BcImage::read_from(&buf[..]).is_err());
    }

    #[test]
    fn augment_counts() {
        let img = encode_bvp(&all_zero_dirichlet(), 4, 4).unwrap();
        assert_eq!(augment(vec![img.clone(); 20], 1 << 10).unwrap().len(), 20480);
        assert_eq!(augment(vec![img.clone(); 30], 1 << 9).unwrap().len(), 15360);
        let one = augment(vec![img.clone()], 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.record(0), &img);
        assert!(augment(vec![img], 0).is_err());
    }
}
