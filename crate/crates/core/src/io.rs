//! Binary containers for datasets, motions and checkpoints.
//!
//! Every file is `b"SMDMFILE"`, a little-endian `u64` manifest length, a UTF-8
//! JSON manifest of that length, then a blob of little-endian `f64` values
//! running to the end of the file. The manifest's `format` field names the
//! payload kind and its offsets index the blob in `f64` units.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleKind;
use crate::model::{DenoiserConfig, DenoiserParams, ParamStore};
use crate::motion::{Dataset, MotionSequence, NormStats, SkeletonLayout, Split};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SMDMFILE";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("expected a {expected} file, found {found}")]
    WrongFormat { expected: &'static str, found: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn parse_err(offset: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { offset, msg: msg.into() }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| IoError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

pub fn encode_container<M: Serialize>(manifest: &M, blob: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER + json.len() + 8 * blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a container into its parsed manifest and blob. Errors carry the
/// byte offset at which the file stopped making sense.
pub fn decode_container<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<f64>)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        let at = bytes.iter().zip(MAGIC).take_while(|(a, b)| a == b).count();
        return Err(parse_err(at, "missing SMDMFILE magic"));
    }
    if bytes.len() < HEADER {
        return Err(parse_err(bytes.len(), "truncated manifest length"));
    }
    let len = u64::from_le_bytes(bytes[8..HEADER].try_into().expect("8 bytes")) as usize;
    let end = HEADER.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        parse_err(bytes.len(), format!("manifest of {len} bytes runs past end of file"))
    })?;
    let text = &bytes[HEADER..end];
    let manifest: M = serde_json::from_slice(text).map_err(|e| {
        let offset = HEADER + line_col_offset(text, e.line(), e.column());
        parse_err(offset, format!("manifest: {e}"))
    })?;
    let rest = &bytes[end..];
    if rest.len() % 8 != 0 {
        return Err(parse_err(end + rest.len() / 8 * 8, "blob length is not a multiple of 8"));
    }
    let blob = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((manifest, blob))
}

/// Byte offset of a 1-based (line, column) position.
fn line_col_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

#[derive(Deserialize)]
struct FormatTag {
    format: String,
}

/// Checks the manifest's `format` tag before decoding the full manifest.
fn check_format(bytes: &[u8], expected: &'static str) -> Result<()> {
    let (tag, _): (FormatTag, Vec<f64>) = decode_container(bytes)?;
    if tag.format != expected {
        return Err(IoError::WrongFormat { expected, found: tag.format });
    }
    Ok(())
}

fn blob_slice(blob: &[f64], offset: usize, len: usize, manifest_end: usize) -> Result<&[f64]> {
    blob.get(offset..offset + len).ok_or_else(|| {
        parse_err(manifest_end + 8 * blob.len(), format!("blob has {} values, entry needs {}..{}", blob.len(), offset, offset + len))
    })
}

fn manifest_end(bytes: &[u8]) -> usize {
    HEADER + u64::from_le_bytes(bytes[8..HEADER].try_into().expect("8 bytes")) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub class_id: usize,
    pub split: Split,
    pub n_frames: usize,
    /// Start of this sequence's frames in the blob, in f64 units.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub layout: SkeletonLayout,
    pub fps: f64,
    pub classes: Vec<String>,
    pub stats: NormStats,
    pub sequences: Vec<SequenceEntry>,
}

pub const DATASET_FORMAT: &str = "smdm-dataset";

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut blob = Vec::new();
    let sequences = ds
        .sequences
        .iter()
        .zip(&ds.splits)
        .map(|(s, &split)| {
            let offset = blob.len();
            blob.extend_from_slice(s.frames().data());
            SequenceEntry { name: s.name.clone(), class_id: s.class_id, split, n_frames: s.n_frames(), offset }
        })
        .collect();
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: VERSION,
        layout: ds.layout.clone(),
        fps: ds.fps,
        classes: ds.classes.clone(),
        stats: ds.stats.clone(),
        sequences,
    };
    encode_container(&manifest, &blob)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    check_format(bytes, DATASET_FORMAT)?;
    let (m, blob): (DatasetManifest, Vec<f64>) = decode_container(bytes)?;
    let end = manifest_end(bytes);
    let d = m.layout.dim();
    let mut sequences = Vec::with_capacity(m.sequences.len());
    let mut splits = Vec::with_capacity(m.sequences.len());
    for e in &m.sequences {
        let data = blob_slice(&blob, e.offset, e.n_frames * d, end)?;
        let frames = Tensor::new(&[e.n_frames, d], data.to_vec()).expect("length checked");
        let mut seq = MotionSequence::new(frames, m.fps, e.class_id)
            .map_err(|err| parse_err(end + 8 * e.offset, format!("sequence at blob offset {}: {err}", e.offset)))?;
        seq.name = e.name.clone();
        sequences.push(seq);
        splits.push(e.split);
    }
    let used: usize = m.sequences.iter().map(|e| e.n_frames * d).sum();
    if used != blob.len() {
        return Err(parse_err(end + 8 * used.min(blob.len()), format!("manifest covers {used} values, blob has {}", blob.len())));
    }
    Ok(Dataset { layout: m.layout, fps: m.fps, classes: m.classes, stats: m.stats, sequences, splits })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

/// Everything needed to resume sampling from trained weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub n_frames: usize,
    pub fps: f64,
    pub layout: SkeletonLayout,
    pub classes: Vec<String>,
    pub stats: NormStats,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub train_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    model: DenoiserConfig,
    d_motion: usize,
    n_frames: usize,
    fps: f64,
    layout: SkeletonLayout,
    classes: Vec<String>,
    stats: NormStats,
    schedule: ScheduleKind,
    diffusion_steps: usize,
    train_step: usize,
    params: Vec<ParamEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "smdm-checkpoint";

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut blob = Vec::new();
    let params = ck
        .params
        .store
        .iter()
        .map(|(name, t)| {
            let offset = blob.len();
            blob.extend_from_slice(t.data());
            ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset }
        })
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: VERSION,
        model: ck.params.config.clone(),
        d_motion: ck.params.d_motion,
        n_frames: ck.n_frames,
        fps: ck.fps,
        layout: ck.layout.clone(),
        classes: ck.classes.clone(),
        stats: ck.stats.clone(),
        schedule: ck.schedule,
        diffusion_steps: ck.diffusion_steps,
        train_step: ck.train_step,
        params,
    };
    encode_container(&manifest, &blob)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    check_format(bytes, CHECKPOINT_FORMAT)?;
    let (m, blob): (CheckpointManifest, Vec<f64>) = decode_container(bytes)?;
    let end = manifest_end(bytes);
    let mut store = ParamStore::default();
    for p in &m.params {
        let n: usize = p.shape.iter().product();
        let data = blob_slice(&blob, p.offset, n, end)?;
        let t = Tensor::new(&p.shape, data.to_vec()).map_err(|e| parse_err(end + 8 * p.offset, format!("{}: {e}", p.name)))?;
        store.push(p.name.clone(), t);
    }
    // the stored tensors must match what the config would build
    let reference = DenoiserParams::init(&m.model, m.d_motion, 0).map_err(|e| parse_err(HEADER, e.to_string()))?;
    for (name, t) in reference.store.iter() {
        match store.get(name) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => {
                return Err(parse_err(HEADER, format!("parameter {name} has shape {:?}, config implies {:?}", s.shape(), t.shape())))
            }
            None => return Err(parse_err(HEADER, format!("parameter {name} missing"))),
        }
    }
    if store.len() != reference.store.len() {
        return Err(parse_err(HEADER, format!("{} parameters stored, config implies {}", store.len(), reference.store.len())));
    }
    Ok(Checkpoint {
        params: DenoiserParams { config: m.model, d_motion: m.d_motion, store },
        n_frames: m.n_frames,
        fps: m.fps,
        layout: m.layout,
        classes: m.classes,
        stats: m.stats,
        schedule: m.schedule,
        diffusion_steps: m.diffusion_steps,
        train_step: m.train_step,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}
