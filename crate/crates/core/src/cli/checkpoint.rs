//! Versioned binary model container.
//!
//! Layout (little-endian): magic `GFCKPT01`, `u32` format version, input
//! dims as three `u32`, `u32` layer count, then one record per layer:
//! `u8` tag, `u32` layer index and, for parameterised layers, their shape
//! followed by raw `f64` weights and biases. Conv modes are not persisted;
//! a loaded model starts fully vanilla.

use std::io::{Read, Write};
use std::path::Path;

use crate::conv::ConvCfg;
use crate::error::{Error, Result};
use crate::tensor::Kernel4;
use crate::train::{Layer, Model};

const MAGIC: &[u8; 8] = b"GFCKPT01";
pub const FORMAT_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_LINEAR: u8 = 4;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("dimension fits u32").to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let (c, h, w) = model.input_dims();
    for d in [c, h, w, model.layers().len()] {
        put_u32(&mut out, d);
    }
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Conv(cl) => {
                out.push(TAG_CONV);
                put_u32(&mut out, i);
                for d in cl.kernel.dims() {
                    put_u32(&mut out, d);
                }
                put_u32(&mut out, cl.cfg.padding);
                put_f64s(&mut out, cl.kernel.data());
                put_f64s(&mut out, &cl.bias);
            }
            Layer::Linear(l) => {
                out.push(TAG_LINEAR);
                put_u32(&mut out, i);
                put_u32(&mut out, l.in_features);
                put_u32(&mut out, l.out_features);
                put_f64s(&mut out, &l.weights);
                put_f64s(&mut out, &l.bias);
            }
            Layer::Relu | Layer::AvgPool2 | Layer::Flatten => {
                out.push(match layer {
                    Layer::Relu => TAG_RELU,
                    Layer::AvgPool2 => TAG_POOL,
                    _ => TAG_FLATTEN,
                });
                put_u32(&mut out, i);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(bad("truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("blob too large"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let input = (r.u32()?, r.u32()?, r.u32()?);
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for expected in 0..count {
        let tag = r.u8()?;
        let index = r.u32()?;
        if index != expected {
            return Err(bad(format!("layer index {index}, expected {expected}")));
        }
        let layer = match tag {
            TAG_CONV => {
                let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                let padding = r.u32()?;
                let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("kernel too large"))?;
                let kernel = Kernel4::new(dims, r.f64s(len)?).map_err(|e| bad(e.to_string()))?;
                let bias = r.f64s(dims[0])?;
                Layer::conv(kernel, bias, ConvCfg::new(padding))
            }
            TAG_LINEAR => {
                let (fi, fo) = (r.u32()?, r.u32()?);
                let len = fi.checked_mul(fo).ok_or_else(|| bad("linear too large"))?;
                let weights = r.f64s(len)?;
                let bias = r.f64s(fo)?;
                Layer::linear(weights, bias, fi, fo)
            }
            TAG_RELU => Layer::Relu,
            TAG_POOL => Layer::AvgPool2,
            TAG_FLATTEN => Layer::Flatten,
            t => return Err(bad(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Model::new(input, layers).map_err(|e| bad(e.to_string()))
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
