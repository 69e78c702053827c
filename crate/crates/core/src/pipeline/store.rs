//! Binary artifacts: a JSON header followed by named little-endian float
//! blocks.
//!
//! Layout: the 8-byte magic, a `u32` header length, the UTF-8 JSON header, a
//! `u32` block count, then per block a `u32` name length, the name, a `u8`
//! element width (4 or 8 bytes), a `u32` rank, `u64` dimensions and the
//! values. Blocks declared as 32-bit must hold values exactly representable
//! in `f32`, so every artifact round-trips bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{ConceptEmbedding, EmbeddingTable, TinyConfig, TinyDenoiser, TinyWeights};
use crate::error::{Error, Result};
use crate::inversion::{PerStepEmbeddings, StepLosses};
use crate::schedule::{Latent, NoiseSchedule};

const MAGIC: &[u8; 8] = b"CSHIFT\x00\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub precision: Precision,
    pub data: ArrayD<f64>,
}

impl Block {
    pub fn f32(name: impl Into<String>, data: ArrayD<f64>) -> Self {
        Block {
            name: name.into(),
            precision: Precision::F32,
            data,
        }
    }

    pub fn f64(name: impl Into<String>, data: ArrayD<f64>) -> Self {
        Block {
            name: name.into(),
            precision: Precision::F64,
            data,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format("field exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a header and blocks.
pub fn encode(header: &Value, blocks: &[Block]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    let json = serde_json::to_vec(header)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, blocks.len())?;
    for b in blocks {
        put_u32(&mut out, b.name.len())?;
        out.extend_from_slice(b.name.as_bytes());
        out.push(match b.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        });
        put_u32(&mut out, b.data.ndim())?;
        for d in b.data.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for &v in b.data.iter() {
            match b.precision {
                Precision::F32 => {
                    let f = v as f32;
                    if f as f64 != v && !(v.is_nan() && f.is_nan()) {
                        return Err(Error::Format(format!(
                            "block {} holds {v}, which is not exactly representable in f32",
                            b.name
                        )));
                    }
                    out.extend_from_slice(&f.to_le_bytes());
                }
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated artifact".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            .map_err(|_| Error::Format("dimension overflows".into()))
    }
}

/// Parses bytes written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<Block>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let hlen = c.u32()?;
    let header: Value = serde_json::from_slice(c.take(hlen)?)?;
    let count = c.u32()?;
    let mut blocks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = c.u32()?;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        let width = c.take(1)?[0];
        let precision = match width {
            4 => Precision::F32,
            8 => Precision::F64,
            w => return Err(Error::Format(format!("unsupported element width {w}"))),
        };
        let ndim = c.u32()?;
        let dims = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("block too large".into()))?;
        let raw = c.take(len.checked_mul(width as usize).ok_or_else(|| Error::Format("block too large".into()))?)?;
        let values: Vec<f64> = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        let data = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        blocks.push(Block {
            name,
            precision,
            data,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last block".into()));
    }
    Ok((header, blocks))
}

pub fn write_file(path: &Path, header: &Value, blocks: &[Block]) -> Result<()> {
    let bytes = encode(header, blocks)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(Value, Vec<Block>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn kind_of(header: &Value) -> Option<&str> {
    header.get("kind").and_then(Value::as_str)
}

fn expect_kind(header: &Value, kind: &str) -> Result<()> {
    match kind_of(header) {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Format(format!("expected a {kind} artifact, found {other:?}"))),
    }
}

fn take_block(blocks: &mut BTreeMap<String, ArrayD<f64>>, name: &str) -> Result<ArrayD<f64>> {
    blocks
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing block {name}")))
}

fn block_map(blocks: Vec<Block>) -> BTreeMap<String, ArrayD<f64>> {
    blocks.into_iter().map(|b| (b.name, b.data)).collect()
}

fn to2(a: ArrayD<f64>) -> Result<Array2<f64>> {
    a.into_dimensionality().map_err(|e| Error::Format(e.to_string()))
}

fn to3(a: ArrayD<f64>) -> Result<Array3<f64>> {
    a.into_dimensionality().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: TinyConfig,
    schedule: NoiseSchedule,
    vocabulary: BTreeMap<String, usize>,
    fingerprint: String,
    #[serde(default)]
    extra: Value,
}

/// Stores a backbone with its embedding table. `extra` is kept verbatim in
/// the header (training settings, losses).
pub fn save_checkpoint(path: &Path, b: &TinyDenoiser, table: &EmbeddingTable, extra: Value) -> Result<()> {
    use crate::backbone::Denoiser;
    let header = CheckpointHeader {
        kind: "backbone".into(),
        config: b.config.clone(),
        schedule: b.schedule().clone(),
        vocabulary: table.vocabulary().clone(),
        fingerprint: b.fingerprint(),
        extra,
    };
    let mut blocks: Vec<Block> = b
        .weights
        .named()
        .into_iter()
        .map(|(n, a)| Block::f32(n, a.to_owned()))
        .collect();
    blocks.push(Block::f32("token_table", table.weights().clone().into_dyn()));
    write_file(path, &serde_json::to_value(header)?, &blocks)
}

/// Loaded backbone checkpoint.
pub struct Checkpoint {
    pub backbone: TinyDenoiser,
    pub table: EmbeddingTable,
    pub extra: Value,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    use crate::backbone::Denoiser;
    let (header, blocks) = read_file(path)?;
    expect_kind(&header, "backbone")?;
    let h: CheckpointHeader = serde_json::from_value(header)?;
    let mut map = block_map(blocks);
    let mut weights = TinyWeights::init(&h.config, 0)?;
    for (name, mut slot) in weights.named_mut() {
        let data = take_block(&mut map, &name)?;
        if data.shape() != slot.shape() {
            return Err(Error::Format(format!("block {name} has the wrong shape")));
        }
        slot.assign(&data);
    }
    let table = EmbeddingTable::from_parts(h.vocabulary, to2(take_block(&mut map, "token_table")?)?)?;
    if let Some(name) = map.keys().next() {
        return Err(Error::Format(format!("unexpected block {name}")));
    }
    let backbone = TinyDenoiser::from_parts(h.config, weights, h.schedule)?;
    if backbone.fingerprint() != h.fingerprint {
        return Err(Error::ArtifactMismatch("checkpoint fingerprint does not match its contents".into()));
    }
    Ok(Checkpoint {
        backbone,
        table,
        extra: h.extra,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub kind: String,
    pub schedule_hash: String,
    pub backbone: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub w: Option<f64>,
    #[serde(default)]
    pub label: String,
    /// Last logged loss values.
    #[serde(default)]
    pub loss_tail: Vec<f64>,
    #[serde(default)]
    pub extra: Value,
}

fn check_schedule(header: &EmbeddingHeader, schedule_hash: &str) -> Result<()> {
    if header.schedule_hash != schedule_hash {
        return Err(Error::ArtifactMismatch(format!(
            "embedding was produced under schedule {}, backbone uses {}",
            &header.schedule_hash[..12.min(header.schedule_hash.len())],
            &schedule_hash[..12.min(schedule_hash.len())]
        )));
    }
    Ok(())
}

pub fn save_concept(path: &Path, v: &ConceptEmbedding, header: &EmbeddingHeader) -> Result<()> {
    let mut h = header.clone();
    h.kind = "concept".into();
    h.label = v.label.clone();
    write_file(path, &serde_json::to_value(h)?, &[Block::f32("v", v.data.clone().into_dyn())])
}

/// Loads a concept embedding, refusing one made under another schedule.
pub fn load_concept(path: &Path, schedule_hash: &str) -> Result<(ConceptEmbedding, EmbeddingHeader)> {
    let (header, blocks) = read_file(path)?;
    expect_kind(&header, "concept")?;
    let h: EmbeddingHeader = serde_json::from_value(header)?;
    check_schedule(&h, schedule_hash)?;
    let mut map = block_map(blocks);
    let v = ConceptEmbedding::new(to2(take_block(&mut map, "v")?)?, h.label.clone())?;
    Ok((v, h))
}

pub fn save_per_step(path: &Path, p: &PerStepEmbeddings, header: &EmbeddingHeader) -> Result<()> {
    p.validate()?;
    let mut h = header.clone();
    h.kind = "per_step".into();
    h.w = Some(p.w);
    h.extra = serde_json::json!({ "grid": p.grid, "losses": p.losses });
    let mut blocks: Vec<Block> = p
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| Block::f32(format!("v.{i}"), e.data.clone().into_dyn()))
        .collect();
    blocks.extend(
        p.trajectory
            .iter()
            .enumerate()
            .map(|(i, z)| Block::f64(format!("z.{i}"), z.data.clone().into_dyn())),
    );
    write_file(path, &serde_json::to_value(h)?, &blocks)
}

/// Loads per-step embeddings, refusing ones made under another schedule.
pub fn load_per_step(path: &Path, schedule_hash: &str) -> Result<(PerStepEmbeddings, EmbeddingHeader)> {
    let (header, blocks) = read_file(path)?;
    expect_kind(&header, "per_step")?;
    let h: EmbeddingHeader = serde_json::from_value(header)?;
    check_schedule(&h, schedule_hash)?;
    #[derive(Deserialize)]
    struct Extra {
        grid: Vec<usize>,
        losses: Vec<StepLosses>,
    }
    let extra: Extra = serde_json::from_value(h.extra.clone())?;
    let n = extra.grid.len().saturating_sub(1);
    let mut map = block_map(blocks);
    let embeddings = (0..n)
        .map(|i| ConceptEmbedding::new(to2(take_block(&mut map, &format!("v.{i}"))?)?, "source"))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = (0..=n)
        .map(|i| Latent::new(to3(take_block(&mut map, &format!("z.{i}"))?)?))
        .collect::<Result<Vec<_>>>()?;
    let p = PerStepEmbeddings {
        grid: extra.grid,
        embeddings,
        trajectory,
        w: h.w.ok_or_else(|| Error::Format("per-step header lacks w".into()))?,
        losses: extra.losses,
    };
    p.validate()?;
    Ok((p, h))
}
