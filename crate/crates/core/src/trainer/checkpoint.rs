//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                                  |
//! |----------------|----------------------------------------------------------|
//! | 8              | magic `DPCKPT\0\x01`                                     |
//! | 4              | format version (`u32`)                                   |
//! | 8              | header length `h` (`u64`)                                |
//! | h              | JSON header: config, step, RNG states, tensor manifest… |
//! | 8 · Σ numel    | parameters as `f64`, tensors in manifest order           |
//! | 8 · Σ numel    | Adam first moments, same order                           |
//! | 8 · Σ numel    | Adam second moments, same order                          |
//! | 16 · pairs     | seen-pair registry, sorted `(noun, adj)` as `u64` pairs  |
//! | 8              | FNV-1a 64 checksum of everything before it               |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, MetricsRecord, RunState};
use crate::error::{Error, Result};
use crate::grammar::SeenPairs;
use crate::model::{init_params, ModelParams};
use crate::numerics::{Array, Rng, RngState};
use crate::optim::OptState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: RunState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ExperimentConfig,
    step: u64,
    resets: u64,
    adam_t: u64,
    data_rng: RngState,
    reset_rng: RngState,
    loss_sum: f64,
    loss_count: u64,
    last_record: Option<MetricsRecord>,
    registry_pairs: usize,
    registry_digest: String,
    tensors: Vec<TensorEntry>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ck.state;
    let pairs = st.registry.sorted();
    let header = Header {
        config: ck.config.clone(),
        step: st.step,
        resets: st.resets,
        adam_t: st.opt.t,
        data_rng: st.data_rng.state(),
        reset_rng: st.reset_rng.state(),
        loss_sum: st.loss_sum,
        loss_count: st.loss_count,
        last_record: st.last_record.clone(),
        registry_pairs: pairs.len(),
        registry_digest: st.registry.digest(),
        tensors: st
            .params
            .names()
            .into_iter()
            .zip(&st.params.tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let numel: usize = st.params.tensors.iter().map(Array::len).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 24 * numel + 16 * pairs.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [&st.params.tensors, &st.opt.m, &st.opt.v] {
        for t in group.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    for (a, b) in pairs {
        out.extend_from_slice(&(a as u64).to_le_bytes());
        out.extend_from_slice(&(b as u64).to_le_bytes());
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// never replaces a good checkpoint with a partial one.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < PREAMBLE {
        return Err(fail(format!(
            "truncated: {} bytes, shorter than the preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64_at(bytes, 12) as usize;
    let body = PREAMBLE.checked_add(hlen).filter(|&e| e <= bytes.len());
    let Some(body) = body else {
        return Err(fail(format!(
            "truncated: header declares {hlen} bytes but the file has {}",
            bytes.len()
        )));
    };
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body])
        .map_err(|e| fail(format!("malformed header: {e}")))?;

    let expected_shapes: Vec<Vec<usize>> = init_params(&header.config.model, &mut Rng::new(0))?
        .tensors
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let shapes: Vec<Vec<usize>> = header.tensors.iter().map(|t| t.shape.clone()).collect();
    if shapes != expected_shapes {
        return Err(fail(
            "tensor manifest does not match the model config".into(),
        ));
    }
    let numel: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let expected = body + 24 * numel + 16 * header.registry_pairs + 8;
    if bytes.len() < expected {
        return Err(fail(format!(
            "truncated: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(fail(format!(
            "{} unexpected trailing bytes after the checksum",
            bytes.len() - expected
        )));
    }
    let stored = u64_at(bytes, expected - 8);
    if fnv1a64(&bytes[..expected - 8]) != stored {
        return Err(fail("checksum mismatch (file corrupted)".into()));
    }

    let mut at = body;
    let mut read_group = || -> Vec<Array> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n)
                    .map(|i| {
                        f64::from_le_bytes(
                            bytes[at + 8 * i..at + 8 * i + 8]
                                .try_into()
                                .expect("8 bytes"),
                        )
                    })
                    .collect();
                at += 8 * n;
                Array::new(s.clone(), data).expect("shape from manifest")
            })
            .collect()
    };
    let params = read_group();
    let m = read_group();
    let v = read_group();
    let registry: SeenPairs = (0..header.registry_pairs)
        .map(|i| {
            let p = at + 16 * i;
            (u64_at(bytes, p) as usize, u64_at(bytes, p + 8) as usize)
        })
        .collect();
    if registry.digest() != header.registry_digest {
        return Err(fail("seen-pair registry does not match its digest".into()));
    }
    let rng = |s: &RngState| Rng::from_state(s).ok_or_else(|| fail("bad RNG state".into()));
    let state = RunState {
        step: header.step,
        params: ModelParams { tensors: params },
        opt: OptState {
            m,
            v,
            t: header.adam_t,
        },
        data_rng: rng(&header.data_rng)?,
        reset_rng: rng(&header.reset_rng)?,
        registry,
        resets: header.resets,
        loss_sum: header.loss_sum,
        loss_count: header.loss_count,
        last_record: header.last_record,
    };
    Ok(Checkpoint {
        config: header.config,
        state,
    })
}
