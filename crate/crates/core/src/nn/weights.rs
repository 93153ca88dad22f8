//! Parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"FDCKPT\0\0"           8 bytes
//! version u32                     currently 1
//! dtype   u8                      1 = f32, 2 = f64
//! round   u64                     round index the weights belong to
//! blocks  u32                     number of body blocks B
//! then B+1 parameter sets (blocks in order, head last), each:
//!   count u32                     tensors in the set
//!   per tensor: rank u32, dims u64 × rank, elements (dtype-sized)
//! crc32   u32                     over every preceding byte
//! ```

use std::path::Path;

use rand::Rng;

use super::graph::BlockGraph;
use super::tensor::{DType, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Parameters of the full model: one tensor list per body block plus the head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub body: Vec<Vec<Tensor<T>>>,
    pub head: Vec<Tensor<T>>,
}

pub(crate) const CHECKPOINT_MAGIC: &[u8; 8] = b"FDCKPT\0\0";
pub(crate) const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> ModelWeights<T> {
    pub fn init<R: Rng + ?Sized>(graph: &BlockGraph, rng: &mut R) -> Self {
        let body = graph
            .blocks()
            .iter()
            .map(|b| b.layers.iter().flat_map(|l| l.init_params(rng)).collect())
            .collect();
        ModelWeights {
            body,
            head: init_head(graph.head(), rng),
        }
    }

    /// Check tensor shapes against the owning graph.
    pub fn validate(&self, graph: &BlockGraph) -> Result<()> {
        if self.body.len() != graph.num_blocks() {
            return Err(Error::structure(format!(
                "weights have {} blocks, graph has {}",
                self.body.len(),
                graph.num_blocks()
            )));
        }
        for (j, (params, block)) in self.body.iter().zip(graph.blocks()).enumerate() {
            let expected: Vec<Shape> = block.layers.iter().flat_map(|l| l.param_shapes()).collect();
            check_shapes(params, &expected, &format!("block {}", j + 1))?;
        }
        let expected: Vec<Shape> = graph.head().iter().flat_map(|l| l.param_shapes()).collect();
        check_shapes(&self.head, &expected, "head")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// All tensors, body blocks first, head last.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.body.iter().flatten().chain(self.head.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.body.iter_mut().flatten().chain(self.head.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.body.len() == other.body.len()
            && self.tensors().count() == other.tensors().count()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self, round: u64) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&round.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        for set in self.body.iter().chain(std::iter::once(&self.head)) {
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for t in set {
                out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
                for &d in t.dims() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decode a checkpoint; returns the weights and their round index.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(Self, u64)> {
        let bad = |reason: &str| Error::Integrity {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 + 4 + 1 + 8 + 4 + 4 {
            return Err(bad("file too short"));
        }
        let (payload, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader::new(payload);
        if r.take(8).ok_or_else(|| bad("truncated"))? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = r.u8().and_then(DType::from_code).ok_or_else(|| bad("unknown dtype"))?;
        if dtype != T::DTYPE {
            return Err(bad(&format!("stored {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let round = r.u64().ok_or_else(|| bad("truncated"))?;
        let blocks = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut sets = Vec::with_capacity(blocks + 1);
        for _ in 0..=blocks {
            let count = r.u32().ok_or_else(|| bad("truncated"))? as usize;
            let mut set = Vec::with_capacity(count);
            for _ in 0..count {
                let rank = r.u32().ok_or_else(|| bad("truncated"))? as usize;
                let dims = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("truncated"))?;
                let shape = Shape::new(dims).map_err(|_| bad("invalid shape"))?;
                let size = dtype.size();
                let raw = r.take(shape.numel() * size).ok_or_else(|| bad("truncated"))?;
                let data = raw.chunks_exact(size).map(T::read_le).collect();
                set.push(Tensor::from_vec(shape, data)?);
            }
            sets.push(set);
        }
        if !r.done() {
            return Err(bad("trailing bytes"));
        }
        let head = sets.pop().expect("at least the head set");
        Ok((ModelWeights { body: sets, head }, round))
    }

    pub fn save(&self, path: &Path, round: u64) -> Result<()> {
        std::fs::write(path, self.to_bytes(round)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn init_head<T: Scalar, R: Rng + ?Sized>(head: &[super::layer::LayerSpec], rng: &mut R) -> Vec<Tensor<T>> {
    head.iter().flat_map(|l| l.init_params(rng)).collect()
}

fn check_shapes<T: Scalar>(params: &[Tensor<T>], expected: &[Shape], what: &str) -> Result<()> {
    if params.len() != expected.len() || params.iter().zip(expected).any(|(t, s)| t.shape() != s) {
        return Err(Error::structure(format!(
            "{what}: parameter shapes do not match the graph"
        )));
    }
    Ok(())
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn init_matches_graph_and_is_seeded() {
        let g = BlockGraph::mlp(3, 8, 3, 4).unwrap();
        let a = ModelWeights::<f32>::init(&g, &mut rng_for(1, &[]));
        let b = ModelWeights::<f32>::init(&g, &mut rng_for(1, &[]));
        a.validate(&g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), g.param_count());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let g = BlockGraph::mlp(3, 8, 2, 4).unwrap();
        let w = ModelWeights::<f64>::init(&g, &mut rng_for(2, &[]));
        let bytes = w.to_bytes(17);
        let (back, round) = ModelWeights::<f64>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(round, 17);
        assert_eq!(back, w);

        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(
            ModelWeights::<f64>::from_bytes(&flipped, Path::new("mem")),
            Err(Error::Integrity { .. })
        ));
        assert!(ModelWeights::<f32>::from_bytes(&bytes, Path::new("mem")).is_err());
    }
}
