//! Block-by-block inference that keeps intermediate activations on disk.
//!
//! Spill record layout (little-endian):
//!
//! ```text
//! magic   b"FDSP"
//! version u32        currently 1
//! dtype   u8         1 = f32, 2 = f64
//! rank    u32
//! dims    u64 × rank
//! data    elements in row-major order
//! crc32   u32        over every preceding byte
//! ```

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::engine::{run_block, run_head};
use crate::nn::graph::BlockGraph;
use crate::nn::tensor::{DType, Scalar, Shape, Tensor};
use crate::nn::weights::{ModelWeights, Reader};

pub const SPILL_MAGIC: &[u8; 4] = b"FDSP";
pub const SPILL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpillStats {
    pub writes: usize,
    pub reads: usize,
    pub bytes_written: usize,
}

/// Storage for spilled activations, keyed by the producing block.
pub trait SpillStore<T: Scalar> {
    fn write(&mut self, block: usize, z: &Tensor<T>) -> Result<()>;
    /// Read and discard the record of `block`.
    fn read(&mut self, block: usize) -> Result<Tensor<T>>;
    fn stats(&self) -> SpillStats;
}

fn encode<T: Scalar>(z: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + 8 * z.dims().len() + z.len() * T::DTYPE.size());
    out.extend_from_slice(SPILL_MAGIC);
    out.extend_from_slice(&SPILL_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(z.dims().len() as u32).to_le_bytes());
    for &d in z.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in z.data() {
        v.write_le(&mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let bad = |reason: &str| Error::Integrity {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 + 4 + 1 + 4 + 4 {
        return Err(bad("record too short"));
    }
    let (payload, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader::new(payload);
    if r.take(4) != Some(SPILL_MAGIC.as_slice()) {
        return Err(bad("not a spill record"));
    }
    if r.u32() != Some(SPILL_VERSION) {
        return Err(bad("unsupported version"));
    }
    if r.u8().and_then(DType::from_code) != Some(T::DTYPE) {
        return Err(bad("element type mismatch"));
    }
    let rank = r.u32().ok_or_else(|| bad("truncated"))? as usize;
    let dims = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated"))?;
    let shape = Shape::new(dims).map_err(|_| bad("invalid shape"))?;
    let size = T::DTYPE.size();
    let raw = r.take(shape.numel() * size).ok_or_else(|| bad("truncated"))?;
    if !r.done() {
        return Err(bad("trailing bytes"));
    }
    Tensor::from_vec(shape, raw.chunks_exact(size).map(T::read_le).collect())
}

/// One file per spilled activation inside `dir`. Records still on disk
/// when the store is dropped are removed.
#[derive(Debug)]
pub struct FileSpill {
    dir: PathBuf,
    stats: SpillStats,
    live: BTreeSet<usize>,
}

impl FileSpill {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(FileSpill {
            dir,
            stats: SpillStats::default(),
            live: BTreeSet::new(),
        })
    }

    pub fn path_of(&self, block: usize) -> PathBuf {
        self.dir.join(format!("z{:04}.spill", block + 1))
    }
}

impl Drop for FileSpill {
    fn drop(&mut self) {
        for &block in &self.live {
            let _ = std::fs::remove_file(self.path_of(block));
        }
    }
}

impl<T: Scalar> SpillStore<T> for FileSpill {
    fn write(&mut self, block: usize, z: &Tensor<T>) -> Result<()> {
        let bytes = encode(z);
        let path = self.path_of(block);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.live.insert(block);
        self.stats.writes += 1;
        self.stats.bytes_written += bytes.len();
        Ok(())
    }

    fn read(&mut self, block: usize) -> Result<Tensor<T>> {
        let path = self.path_of(block);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let z = decode(&bytes, &path)?;
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        self.live.remove(&block);
        self.stats.reads += 1;
        Ok(z)
    }

    fn stats(&self) -> SpillStats {
        self.stats
    }
}

/// In-memory store using the same record encoding, for tests and dry runs.
#[derive(Debug, Default)]
pub struct MemorySpill {
    pub records: HashMap<usize, Vec<u8>>,
    stats: SpillStats,
}

impl<T: Scalar> SpillStore<T> for MemorySpill {
    fn write(&mut self, block: usize, z: &Tensor<T>) -> Result<()> {
        let bytes = encode(z);
        self.stats.writes += 1;
        self.stats.bytes_written += bytes.len();
        self.records.insert(block, bytes);
        Ok(())
    }

    fn read(&mut self, block: usize) -> Result<Tensor<T>> {
        let origin = PathBuf::from(format!("<memory>/z{:04}", block + 1));
        let bytes = self.records.remove(&block).ok_or_else(|| Error::Integrity {
            path: origin.clone(),
            reason: "record missing".into(),
        })?;
        self.stats.reads += 1;
        decode(&bytes, &origin)
    }

    fn stats(&self) -> SpillStats {
        self.stats
    }
}

/// Logits computed one block at a time. Each block output is spilled, and
/// the next block reads its input back from the store; only the final body
/// output feeds the head directly. A network of B blocks performs B writes
/// and B − 1 reads.
pub fn depthwise_inference<T: Scalar, S: SpillStore<T> + ?Sized>(
    graph: &BlockGraph,
    weights: &ModelWeights<T>,
    x: &Tensor<T>,
    spill: &mut S,
) -> Result<Tensor<T>> {
    let blocks = graph.num_blocks();
    let mut last = None;
    for j in 0..blocks {
        let z = if j == 0 {
            run_block(graph, weights, 0, x)?
        } else {
            let input = spill.read(j - 1)?;
            run_block(graph, weights, j, &input)?
        };
        spill.write(j, &z)?;
        if j + 1 == blocks {
            last = Some(z);
        }
    }
    run_head(graph, weights, &last.expect("at least one block"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::engine::predict;
    use crate::rng::rng_for;

    #[test]
    fn file_spill_matches_forward_and_counts_io() {
        let g = BlockGraph::mlp(3, 6, 4, 2).unwrap();
        let w = ModelWeights::<f32>::init(&g, &mut rng_for(4, &[]));
        let x = Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut spill = FileSpill::new(dir.path()).unwrap();
        let logits = depthwise_inference(&g, &w, &x, &mut spill).unwrap();
        assert_eq!(logits, predict(&g, &w, &x).unwrap());
        let stats = SpillStore::<f32>::stats(&spill);
        assert_eq!((stats.writes, stats.reads), (4, 3));
    }

    #[test]
    fn corrupted_record_is_an_integrity_error() {
        let z = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let mut store = MemorySpill::default();
        store.write(0, &z).unwrap();
        store.records.get_mut(&0).unwrap()[10] ^= 1;
        assert!(matches!(
            SpillStore::<f64>::read(&mut store, 0),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn record_round_trip() {
        let z = Tensor::<f32>::from_f64(&[2, 1, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let bytes = encode(&z);
        assert_eq!(&bytes[..4], SPILL_MAGIC);
        assert_eq!(decode::<f32>(&bytes, Path::new("x")).unwrap(), z);
        assert!(decode::<f64>(&bytes, Path::new("x")).is_err());
    }
}
