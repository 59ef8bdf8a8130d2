//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `WFSM`, `u32` version, `u32` layer count,
//! `u32` input rank and dims; then per layer a `u8` kind tag, its
//! hyperparameters and its parameter tensors (kernel means, biases and,
//! for Flipout layers, kernel spreads) as `f64`; finally a `u8` flag and the
//! optional log residual variance.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::layers::{Activation, Param};
use super::{Architecture, LayerSpec, Network, ParamKind, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"WFSM";

fn put_dims<W: Write>(w: &mut W, dims: &[usize]) -> std::io::Result<()> {
    w.write_u32::<LE>(dims.len() as u32)?;
    for &d in dims {
        w.write_u32::<LE>(d as u32)?;
    }
    Ok(())
}

fn get_dims<R: Read>(r: &mut R) -> Result<Vec<usize>, TensorError> {
    let n = r.read_u32::<LE>()? as usize;
    if n > 8 {
        return Err(TensorError::Format(format!("implausible rank {n}")));
    }
    (0..n).map(|_| Ok(r.read_u32::<LE>()? as usize)).collect()
}

fn act_tag(a: Activation) -> u8 {
    match a {
        Activation::Linear => 0,
        Activation::Relu => 1,
    }
}

fn get_act<R: Read>(r: &mut R) -> Result<Activation, TensorError> {
    match r.read_u8()? {
        0 => Ok(Activation::Linear),
        1 => Ok(Activation::Relu),
        t => Err(TensorError::Format(format!("unknown activation tag {t}"))),
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    net: &Network,
    log_sigma2: Option<f64>,
) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;
    w.write_u32::<LE>(net.arch.layers.len() as u32)?;
    put_dims(&mut w, &net.arch.input)?;
    let mut params = net.params.iter().peekable();
    for (l, spec) in net.arch.layers.iter().enumerate() {
        match spec {
            LayerSpec::FillRandom => w.write_u8(0)?,
            LayerSpec::Conv2D {
                filters,
                kernel,
                activation,
            }
            | LayerSpec::Conv2DFlipout {
                filters,
                kernel,
                activation,
            } => {
                w.write_u8(if spec.is_flipout() { 2 } else { 1 })?;
                w.write_u32::<LE>(*filters as u32)?;
                w.write_u32::<LE>(*kernel as u32)?;
                w.write_u8(act_tag(*activation))?;
            }
            LayerSpec::MaxPool2D => w.write_u8(3)?,
            LayerSpec::UpSampling2D => w.write_u8(4)?,
            LayerSpec::Flatten => w.write_u8(5)?,
            LayerSpec::Dense { units, activation } | LayerSpec::DenseFlipout { units, activation } => {
                w.write_u8(if spec.is_flipout() { 7 } else { 6 })?;
                w.write_u32::<LE>(*units as u32)?;
                w.write_u8(act_tag(*activation))?;
            }
            LayerSpec::Reshape { shape } => {
                w.write_u8(8)?;
                put_dims(&mut w, shape)?;
            }
        }
        while let Some(p) = params.next_if(|p| p.layer == l) {
            for &v in &p.tensor.data {
                w.write_f64::<LE>(v)?;
            }
        }
    }
    match log_sigma2 {
        Some(v) => {
            w.write_u8(1)?;
            w.write_f64::<LE>(v)?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

/// Read a network and the optional log residual variance.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Network, Option<f64>), TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("not a model checkpoint".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LE>()? as usize;
    let input = get_dims(&mut r)?;
    let mut arch = Architecture {
        input,
        layers: Vec::with_capacity(n),
    };
    let mut params = Vec::new();
    for l in 0..n {
        let spec = match r.read_u8()? {
            0 => LayerSpec::FillRandom,
            t @ (1 | 2) => {
                let filters = r.read_u32::<LE>()? as usize;
                let kernel = r.read_u32::<LE>()? as usize;
                let activation = get_act(&mut r)?;
                if t == 1 {
                    LayerSpec::Conv2D {
                        filters,
                        kernel,
                        activation,
                    }
                } else {
                    LayerSpec::Conv2DFlipout {
                        filters,
                        kernel,
                        activation,
                    }
                }
            }
            3 => LayerSpec::MaxPool2D,
            4 => LayerSpec::UpSampling2D,
            5 => LayerSpec::Flatten,
            t @ (6 | 7) => {
                let units = r.read_u32::<LE>()? as usize;
                let activation = get_act(&mut r)?;
                if t == 6 {
                    LayerSpec::Dense { units, activation }
                } else {
                    LayerSpec::DenseFlipout { units, activation }
                }
            }
            8 => LayerSpec::Reshape {
                shape: get_dims(&mut r)?,
            },
            t => return Err(TensorError::Format(format!("unknown layer tag {t}"))),
        };
        arch.layers.push(spec.clone());
        // parameter shapes follow from the architecture read so far
        let shapes = arch.shapes()?;
        let prev = if l == 0 { arch.input.clone() } else { shapes[l - 1].clone() };
        let kernel = match &spec {
            LayerSpec::Conv2D { filters, kernel, .. } | LayerSpec::Conv2DFlipout { filters, kernel, .. } => {
                Some((vec![*kernel, *kernel, prev[2], *filters], *filters))
            }
            LayerSpec::Dense { units, .. } | LayerSpec::DenseFlipout { units, .. } => {
                Some((vec![prev[0], *units], *units))
            }
            _ => None,
        };
        if let Some((kshape, bias)) = kernel {
            let mut kinds = vec![(ParamKind::Kernel, kshape.clone()), (ParamKind::Bias, vec![bias])];
            if spec.is_flipout() {
                kinds.push((ParamKind::Rho, kshape));
            }
            for (kind, shape) in kinds {
                let mut data = vec![0.0; shape.iter().product()];
                r.read_f64_into::<LE>(&mut data)?;
                params.push(Param {
                    layer: l,
                    kind,
                    tensor: Tensor::new(shape, data),
                });
            }
        }
    }
    let log_sigma2 = match r.read_u8()? {
        0 => None,
        1 => Some(r.read_f64::<LE>()?),
        t => return Err(TensorError::Format(format!("bad trailer flag {t}"))),
    };
    Ok((Network::from_params(arch, params)?, log_sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Preset;

    #[test]
    fn round_trip_both_kinds() {
        let det = Network::init(Preset::Octagon.architecture(), 9).unwrap();
        let var = det.to_variational(2e-3).unwrap();
        for (net, ls) in [(det, None), (var, Some(-3.5))] {
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &net, ls).unwrap();
            assert_eq!(&buf[..4], b"WFSM");
            let (back, ls2) = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, net);
            assert_eq!(ls2, ls);
        }
    }

    #[test]
    fn truncated_or_foreign_files_fail() {
        let net = Network::init(Preset::Diffusion.architecture(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, None).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 9]).is_err());
        buf[0] = b'B';
        assert!(matches!(read_checkpoint(&buf[..]), Err(TensorError::Format(_))));
    }
}
