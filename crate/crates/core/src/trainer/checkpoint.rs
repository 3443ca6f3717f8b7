//! Versioned binary checkpoints.
//!
//! ```text
//! b"NCACKPT\0"  u32 version  u64 header length  header (JSON)
//! parameter values, then Adam first moments, then second moments,
//! each array as little-endian f64 in store order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FieldModel, TrainConfig, TrainState};
use crate::diffnet::{Adam, ParamRole};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NCACKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    iteration: u64,
    phases: usize,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// Decimal, since JSON numbers cannot hold 128 bits.
    rng_word_pos: String,
    adam_updates: u64,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    role: ParamRole,
    rows: usize,
    cols: usize,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("checkpoint-{iteration:07}.bin")
}

pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let store = &state.model.store;
    let header = Header {
        config: config.clone(),
        iteration: state.iteration,
        phases: state.model.phases,
        rng_seed: state.rng.get_seed(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        adam_updates: state.optimizer.state.updates,
        params: store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                role: p.role,
                rows: p.value.nrows(),
                cols: p.value.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(json.len() + 24 + 24 * store.scalar_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let arrays = store
        .iter()
        .map(|p| &p.value)
        .chain(&state.optimizer.state.m)
        .chain(&state.optimizer.state.v);
    for a in arrays {
        for x in a.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    // Write to a sibling file first so an interrupted save never leaves a
    // truncated checkpoint behind.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Restores the full training state and the configuration it was run with.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format(path, why.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    header.config.validate()?;

    let resolved = header.config.resolved();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = FieldModel::new(
        header.config.variant,
        header.phases,
        &header.config.model,
        &resolved.encoding,
        &mut rng,
    );
    if model.store.len() != header.params.len() {
        return Err(bad("parameter count does not match the configured model"));
    }
    for (p, e) in model.store.iter().zip(&header.params) {
        if p.name != e.name || p.role != e.role || p.value.dim() != (e.rows, e.cols) {
            return Err(bad(&format!("parameter '{}' does not match the configured model", e.name)));
        }
    }

    let mut cursor = 20 + hlen;
    let mut next = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let n = rows * cols * 8;
        let chunk = bytes.get(cursor..cursor + n).ok_or_else(|| bad("truncated arrays"))?;
        cursor += n;
        let vals = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).unwrap())
    };
    let mut values = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for dest in [&mut values, &mut m, &mut v] {
        for e in &header.params {
            dest.push(next(e.rows, e.cols)?);
        }
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after arrays"));
    }
    for (p, val) in model.store.iter_mut().zip(values) {
        p.value = val;
    }
    let mut optimizer = Adam::new(&model.store);
    optimizer.state.updates = header.adam_updates;
    optimizer.state.m = m;
    optimizer.state.v = v;

    let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(header.rng_word_pos.parse().map_err(|_| bad("bad generator position"))?);

    Ok((
        TrainState {
            iteration: header.iteration,
            model,
            optimizer,
            rng,
        },
        header.config,
    ))
}

/// The checkpoint with the highest iteration in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint-") && n.ends_with(".bin"))
        })
        .collect();
    found.sort();
    Ok(found.pop())
}
