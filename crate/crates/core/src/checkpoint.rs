//! Binary checkpoints of a trained head and encoder.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "FSOSRCK\0"
//! version      u32
//! head tag     u32
//! encoder tag  u32      0 identity, 1 mlp
//! dim          u64      head dimension
//! step         u64
//! seed         u64
//! count        u32      number of tensors
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × Π dims }
//! ```
//!
//! Tensors are written in parameter visiting order, so save → load → save is
//! byte-identical.

use std::fs;
use std::path::Path;

use crate::classifier::EncoderSpec;
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::numerics::RngState;
use crate::params::Params;
use crate::transforms::{HeadConfig, HeadKind, TransformHead, DEFAULT_EPS};

pub const MAGIC: [u8; 8] = *b"FSOSRCK\0";
pub const VERSION: u32 = 1;

const EPS_TENSOR: &str = "head.eps";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: TransformHead,
    pub encoder: EncoderSpec,
    /// Training episodes applied to these parameters.
    pub step: u64,
    /// Root seed of the run that produced them.
    pub seed: u64,
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn encoder_tag(enc: &EncoderSpec) -> u32 {
    match enc {
        EncoderSpec::Identity => 0,
        EncoderSpec::Mlp(_) => 1,
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn fill(target: &mut dyn Params, prefix: &str, tensors: &[Tensor], used: &mut [bool]) -> Result<()> {
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    target.visit(prefix, &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    let mut flat = Vec::new();
    for (name, shape) in expected {
        let i = tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if tensors[i].shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                tensors[i].shape, shape
            )));
        }
        used[i] = true;
        flat.extend_from_slice(&tensors[i].values);
    }
    target.assign_flat(&flat);
    Ok(())
}

fn tensor<'t>(tensors: &'t [Tensor], name: &str) -> Option<&'t Tensor> {
    tensors.iter().find(|t| t.name == name)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.head
            .visit("head", &mut |n, s, v| tensors.push((n.to_string(), s.to_vec(), v.to_vec())));
        if let Some(eps) = self.head.eps() {
            tensors.push((EPS_TENSOR.to_string(), vec![1], vec![eps]));
        }
        self.encoder
            .visit("encoder", &mut |n, s, v| tensors.push((n.to_string(), s.to_vec(), v.to_vec())));

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.head.kind().tag().to_le_bytes());
        out.extend_from_slice(&encoder_tag(&self.encoder).to_le_bytes());
        out.extend_from_slice(&(self.head.dim() as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, values) in &tensors {
            push_tensor(&mut out, name, shape, values);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let kind = HeadKind::from_tag(r.u32()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let enc_tag = r.u32()?;
        let dim = r.u64()? as usize;
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is larger than the file")))?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(r.f64()?);
            }
            tensors.push(Tensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let eps = tensor(&tensors, EPS_TENSOR).map(|t| t.values[0]).unwrap_or(DEFAULT_EPS);
        let hidden = tensor(&tensors, "head.h.0.weight").map(|t| t.shape[0]);
        // Skeleton with the right shapes; values are overwritten below.
        let mut head = TransformHead::init_with(kind, dim, &HeadConfig { hidden, eps }, &mut RngState::new(0))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut encoder = match enc_tag {
            0 => EncoderSpec::Identity,
            1 => {
                let mut widths = Vec::new();
                let mut i = 0;
                while let Some(t) = tensor(&tensors, &format!("encoder.mlp.{i}.weight")) {
                    if t.shape.len() != 2 {
                        return Err(Error::Checkpoint(format!("encoder layer {i} weight is not a matrix")));
                    }
                    if i == 0 {
                        widths.push(t.shape[1]);
                    }
                    widths.push(t.shape[0]);
                    i += 1;
                }
                EncoderSpec::Mlp(Mlp::zeros(&widths).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
            other => return Err(Error::Checkpoint(format!("unknown encoder tag {other}"))),
        };

        let mut used = vec![false; tensors.len()];
        if let Some(i) = tensors.iter().position(|t| t.name == EPS_TENSOR) {
            used[i] = true;
        }
        fill(&mut head, "head", &tensors, &mut used)?;
        fill(&mut encoder, "encoder", &tensors, &mut used)?;
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Checkpoint(format!("unexpected tensor {}", tensors[i].name)));
        }
        head.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let EncoderSpec::Mlp(m) = &encoder {
            if m.output_dim() != dim {
                return Err(Error::Checkpoint(format!(
                    "encoder output width {} does not match head dimension {dim}",
                    m.output_dim()
                )));
            }
        }
        Ok(Checkpoint {
            head,
            encoder,
            step,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Rejects checkpoints that cannot consume features of width `data_dim`.
    pub fn ensure_input_dim(&self, data_dim: usize) -> Result<()> {
        let expected = self.encoder.input_dim().unwrap_or(self.head.dim());
        if expected != data_dim {
            return Err(Error::dim("checkpoint input width vs data", expected, data_dim));
        }
        Ok(())
    }
}
