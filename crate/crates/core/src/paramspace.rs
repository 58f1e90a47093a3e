//! Named parameter blocks and blockwise arithmetic.
//!
//! A [`Checkpoint`] holds model weights as an ordered list of named blocks
//! (one per weight matrix and one per bias vector). A [`BlockVector`] has the
//! same layout and holds directions in weight space: task vectors, difference
//! vectors, gradients. All arithmetic walks blocks in stored order and
//! elements left to right, so identical inputs give bit-identical outputs.
//!
//! Binary layout (all integers little-endian `u32`, floats little-endian `f64`):
//!
//! ```text
//! magic      8 bytes   "DVCKPT1\0" (checkpoint) or "DVVECT1\0" (block vector)
//! n_blocks   u32
//! per block: name_len u32, name utf-8, rank u32, dims[rank] u32, payload f64 * prod(dims)
//! n_meta     u32
//! per entry: key_len u32, key utf-8, value_len u32, value utf-8
//! ```
//!
//! Block vectors carry a meta count of zero.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DVCKPT1\0";
pub const VECTOR_MAGIC: &[u8; 8] = b"DVVECT1\0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockShape {
    name: String,
    dims: Vec<usize>,
}

impl BlockShape {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                name,
                reason: "rank must be at least 1".into(),
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                name,
                reason: format!("extents must be positive, got {dims:?}"),
            });
        }
        Ok(Self { name, dims })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of scalar entries.
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    shape: BlockShape,
    values: Vec<f64>,
}

impl Block {
    pub fn new(shape: BlockShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                block: shape.name.clone(),
                detail: format!(
                    "payload has {} values but dims {:?} need {}",
                    values.len(),
                    shape.dims,
                    shape.numel()
                ),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: BlockShape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &BlockShape {
        &self.shape
    }

    pub fn name(&self) -> &str {
        &self.shape.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

fn check_unique(blocks: &[Block]) -> Result<()> {
    let mut seen = HashSet::new();
    for b in blocks {
        if !seen.insert(b.name()) {
            return Err(Error::InvalidShape {
                name: b.name().to_string(),
                reason: "duplicate block name".into(),
            });
        }
    }
    Ok(())
}

/// Verifies that two block lists have identical names and dims, in order.
pub(crate) fn check_compatible(a: &[Block], b: &[Block]) -> Result<()> {
    for (x, y) in a.iter().zip(b) {
        if x.shape != y.shape {
            return Err(Error::ShapeMismatch {
                block: x.name().to_string(),
                detail: format!(
                    "`{}` {:?} vs `{}` {:?}",
                    x.name(),
                    x.shape.dims,
                    y.name(),
                    y.shape.dims
                ),
            });
        }
    }
    if a.len() != b.len() {
        return Err(Error::BlockCount {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

fn zip_with(a: &[Block], b: &[Block], f: impl Fn(f64, f64) -> f64) -> Result<Vec<Block>> {
    check_compatible(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| Block {
            shape: x.shape.clone(),
            values: x.values.iter().zip(&y.values).map(|(&p, &q)| f(p, q)).collect(),
        })
        .collect())
}

/// Model weights: ordered named blocks plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    blocks: Vec<Block>,
    meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        check_unique(&blocks)?;
        Ok(Self {
            blocks,
            meta: Vec::new(),
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name() == name)
    }

    pub fn shapes(&self) -> impl Iterator<Item = &BlockShape> {
        self.blocks.iter().map(|b| &b.shape)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Sets a metadata entry, replacing an existing key in place.
    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        let key = key.into();
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key, value)),
        }
        self
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn zeros_like(&self) -> BlockVector {
        BlockVector {
            blocks: self.blocks.iter().map(|b| Block::zeros(b.shape.clone())).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_container(w, CHECKPOINT_MAGIC, &self.blocks, &self.meta)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (blocks, meta) = read_container(r, CHECKPOINT_MAGIC)?;
        Ok(Self { blocks, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// A direction in weight space with the same block layout as a [`Checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    blocks: Vec<Block>,
}

impl BlockVector {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        check_unique(&blocks)?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name() == name)
    }

    pub fn zeros_like(&self) -> BlockVector {
        BlockVector {
            blocks: self.blocks.iter().map(|b| Block::zeros(b.shape.clone())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// All entries in block order.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.values.iter().copied())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> BlockVector {
        BlockVector {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    shape: b.shape.clone(),
                    values: b.values.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    pub fn plus(&self, other: &BlockVector) -> Result<BlockVector> {
        Ok(BlockVector {
            blocks: zip_with(&self.blocks, &other.blocks, |p, q| p + q)?,
        })
    }

    pub fn minus(&self, other: &BlockVector) -> Result<BlockVector> {
        Ok(BlockVector {
            blocks: zip_with(&self.blocks, &other.blocks, |p, q| p - q)?,
        })
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: f64, other: &BlockVector) -> Result<()> {
        check_compatible(&self.blocks, &other.blocks)?;
        for (x, y) in self.blocks.iter_mut().zip(&other.blocks) {
            for (p, &q) in x.values.iter_mut().zip(&y.values) {
                *p += c * q;
            }
        }
        Ok(())
    }

    /// Global inner product over all blocks.
    pub fn dot(&self, other: &BlockVector) -> Result<f64> {
        Ok(self.block_dots(other)?.iter().sum())
    }

    /// One inner product per block.
    pub fn block_dots(&self, other: &BlockVector) -> Result<Vec<f64>> {
        check_compatible(&self.blocks, &other.blocks)?;
        Ok(self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(x, y)| x.values.iter().zip(&y.values).map(|(p, q)| p * q).sum())
            .collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_container(w, VECTOR_MAGIC, &self.blocks, &[])
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (blocks, meta) = read_container(r, VECTOR_MAGIC)?;
        if !meta.is_empty() {
            return Err(Error::Format("block vector carries metadata entries".into()));
        }
        let v = Self { blocks };
        if !v.is_finite() {
            return Err(Error::NonFinite("block vector payload".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Blockwise `a - b`.
pub fn subtract(a: &Checkpoint, b: &Checkpoint) -> Result<BlockVector> {
    Ok(BlockVector {
        blocks: zip_with(&a.blocks, &b.blocks, |p, q| p - q)?,
    })
}

/// Blockwise `a + v`; metadata is copied from `a`.
pub fn add(a: &Checkpoint, v: &BlockVector) -> Result<Checkpoint> {
    Ok(Checkpoint {
        blocks: zip_with(&a.blocks, &v.blocks, |p, q| p + q)?,
        meta: a.meta.clone(),
    })
}

pub fn scale_uniform(v: &BlockVector, c: f64) -> BlockVector {
    v.map(|x| c * x)
}

/// Per-block and global Euclidean norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Norms {
    pub per_block: Vec<f64>,
    pub global: f64,
}

pub fn norm(v: &BlockVector) -> Norms {
    let sums: Vec<f64> = v
        .blocks
        .iter()
        .map(|b| b.values.iter().map(|x| x * x).sum())
        .collect();
    Norms {
        per_block: sums.iter().map(|s| s.sqrt()).collect(),
        global: sums.iter().sum::<f64>().sqrt(),
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_container<W: Write>(
    w: &mut W,
    magic: &[u8; 8],
    blocks: &[Block],
    meta: &[(String, String)],
) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, blocks.len())?;
    for b in blocks {
        write_str(w, b.name())?;
        write_u32(w, b.shape.dims.len())?;
        for &d in &b.shape.dims {
            write_u32(w, d)?;
        }
        for v in &b.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    write_u32(w, meta.len())?;
    for (k, v) in meta {
        write_str(w, k)?;
        write_str(w, v)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated while reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)?;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Format(format!("truncated while reading {what}")));
    }
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
}

type Container = (Vec<Block>, Vec<(String, String)>);

fn read_container<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<Container> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("file shorter than magic header".into()))?;
    if &head != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        )));
    }
    let n_blocks = read_u32(r, "block count")?;
    let mut blocks = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        let name = read_str(r, "block name")?;
        let rank = read_u32(r, "rank")?;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(read_u32(r, "dims")?);
        }
        let shape = BlockShape::new(name, dims)?;
        let n = shape.numel();
        let mut bytes = Vec::new();
        r.take(8 * n as u64).read_to_end(&mut bytes)?;
        if bytes.len() != 8 * n {
            return Err(Error::Format(format!(
                "truncated payload in block `{}`",
                shape.name
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        blocks.push(Block { shape, values });
    }
    check_unique(&blocks)?;
    let n_meta = read_u32(r, "meta count")?;
    let mut meta = Vec::with_capacity(n_meta.min(1024));
    for _ in 0..n_meta {
        let k = read_str(r, "meta key")?;
        let v = read_str(r, "meta value")?;
        meta.push((k, v));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after metadata".into()));
    }
    Ok((blocks, meta))
}
