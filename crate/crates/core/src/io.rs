//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RPCN"
//! u32 version
//! u32 header length, then that many bytes of UTF-8 JSON
//! per tensor: u32 name length, name bytes, u32 rank, rank x u32 dims,
//!             prod(dims) x f32
//! ```
//!
//! The JSON header carries the architecture, graph mode, model config and the
//! per-layer settings that are not tensors (activations, batch-norm
//! hyperparameters), so a graph is rebuilt from the file alone. Tensors are
//! written in [`Parameterized::visit`] order, running statistics included.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, GraphMode, Layer, ModelGraph, RepCnnConfig};
use crate::nn::{Activation, BnMode, Parameterized, TensorRole};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RPCN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BnSettings {
    eps: f32,
    momentum: f32,
    mode: BnMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    mode: GraphMode,
    config: RepCnnConfig,
    /// Every activation in layer order, block activations included.
    activations: Vec<Activation>,
    batch_norms: Vec<BnSettings>,
    tensors: usize,
}

fn activations_mut(graph: &mut ModelGraph) -> Vec<&mut Activation> {
    graph
        .layers
        .iter_mut()
        .filter_map(|l| match l {
            Layer::Activation(a) => Some(a),
            Layer::RepBlock(b) => Some(&mut b.activation),
            _ => None,
        })
        .collect()
}

fn batch_norms_mut(graph: &mut ModelGraph) -> Vec<&mut crate::nn::BatchNorm1d> {
    let mut out = Vec::new();
    for l in &mut graph.layers {
        match l {
            Layer::BatchNorm(b) => out.push(b),
            Layer::RepBlock(b) => {
                for p in b.branches.iter_mut().chain(std::iter::once(&mut b.one_by_one)) {
                    out.push(&mut p.bn);
                }
            }
            _ => {}
        }
    }
    out
}

fn header_of(graph: &ModelGraph) -> Header {
    let mut g = graph.clone();
    let activations = activations_mut(&mut g).into_iter().map(|a| *a).collect();
    let batch_norms = batch_norms_mut(&mut g)
        .into_iter()
        .map(|b| BnSettings {
            eps: b.eps,
            momentum: b.momentum,
            mode: b.mode,
        })
        .collect();
    let mut tensors = 0;
    graph.visit("", &mut |_, _, _| tensors += 1);
    Header {
        arch: graph.arch,
        mode: graph.mode,
        config: graph.config.clone(),
        activations,
        batch_norms,
        tensors,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Corrupt(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn model_to_bytes(graph: &ModelGraph) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_of(graph))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    graph.visit("", &mut |name, _role: TensorRole, t: &Tensor| tensors.push((name.to_string(), t.clone())));
    for (name, t) in &tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt("missing RPCN magic bytes".into()));
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;

    let mut graph = ModelGraph::skeleton(header.arch, &header.config)?;
    if header.mode == GraphMode::Fused {
        graph = graph.fuse()?;
    }
    {
        let acts = activations_mut(&mut graph);
        if acts.len() != header.activations.len() {
            return Err(Error::Corrupt(format!(
                "header lists {} activations, topology has {}",
                header.activations.len(),
                acts.len()
            )));
        }
        for (a, h) in acts.into_iter().zip(&header.activations) {
            *a = *h;
        }
        let bns = batch_norms_mut(&mut graph);
        if bns.len() != header.batch_norms.len() {
            return Err(Error::Corrupt(format!(
                "header lists {} batch norms, topology has {}",
                header.batch_norms.len(),
                bns.len()
            )));
        }
        for (b, h) in bns.into_iter().zip(&header.batch_norms) {
            b.eps = h.eps;
            b.momentum = h.momentum;
            b.mode = h.mode;
        }
    }

    let mut records = std::collections::BTreeMap::new();
    for _ in 0..header.tensors {
        let nlen = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank).map(|_| r.u32("tensor dim")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let nbytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} is too large")))?;
        let raw = r.take(nbytes, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if records.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Corrupt(format!("tensor {name} appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut problem = None;
    graph.visit_mut("", &mut |name, _, t| match records.remove(name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        Some(v) => {
            problem.get_or_insert(format!("tensor {name} has shape {:?}, expected {:?}", v.shape(), t.shape()));
        }
        None => {
            problem.get_or_insert(format!("tensor {name} missing"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Corrupt(p));
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(graph)
}

pub fn save_model(graph: &ModelGraph, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(graph)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    model_from_bytes(&fs::read(path)?)
}

/// Loads a file for further training; fused files are rejected.
pub fn load_trainable(path: &Path) -> Result<ModelGraph> {
    let g = load_model(path)?;
    if g.mode == GraphMode::Fused {
        return Err(Error::GraphMode(format!(
            "{} holds a fused inference graph and cannot be trained",
            path.display()
        )));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_repcnn;

    #[test]
    fn round_trip_train_and_fused() {
        let g = build_repcnn(&RepCnnConfig::default(), 5).unwrap();
        let bytes = model_to_bytes(&g).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
        let f = g.fuse().unwrap();
        let fb = model_to_bytes(&f).unwrap();
        assert_eq!(model_from_bytes(&fb).unwrap(), f);
        assert!(fb.len() < bytes.len());
    }

    #[test]
    fn corruption_is_reported() {
        let g = build_repcnn(&RepCnnConfig::default(), 5).unwrap();
        let bytes = model_to_bytes(&g).unwrap();
        let err = model_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = model_from_bytes(&v2).unwrap_err();
        assert!(err.to_string().contains('7') && err.to_string().contains('1'), "{err}");
    }
}
