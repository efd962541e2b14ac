//! Binary container: magic, format version, a length-prefixed JSON header
//! and raw little-endian tensor data in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linearize::LengthBuckets;

use super::params::Params;
use super::real::Real;
use super::train::{Adam, TrainState};
use super::vocab::Vocabulary;
use super::{PgConfig, PgError, PgModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGEN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainHeader {
    step: usize,
    adam_t: u64,
    best_score: Option<f64>,
    best_step: usize,
    stale: usize,
    initial_loss: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: PgConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    buckets: Option<LengthBuckets>,
    train: Option<TrainHeader>,
    tensors: Vec<TensorEntry>,
}

const PARAMS: &str = "params";
const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";
const BEST: &str = "best";

fn bad(msg: impl Into<String>) -> PgError {
    PgError::Checkpoint(msg.into())
}

fn write_container<R: Real>(path: &Path, header: &Header, groups: &[&[Vec<R>]]) -> Result<(), PgError> {
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for group in groups {
        for t in *group {
            w.write_all(&R::to_le_bytes_vec(t))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn entries<R: Real>(group: &str, params: &Params<R>) -> Vec<TensorEntry> {
    params
        .tensors
        .iter()
        .map(|t| TensorEntry { group: group.to_string(), name: t.name.clone(), rows: t.rows, cols: t.cols })
        .collect()
}

fn header<R: Real>(model: &PgModel<R>, train: Option<TrainHeader>, groups: &[&str]) -> Header {
    Header {
        dtype: R::DTYPE.to_string(),
        config: model.config.clone(),
        src_vocab: model.src_vocab.clone(),
        tgt_vocab: model.tgt_vocab.clone(),
        buckets: model.buckets,
        train,
        tensors: groups.iter().flat_map(|g| entries(g, &model.params)).collect(),
    }
}

/// Writes the model parameters.
pub fn save_model<R: Real>(model: &PgModel<R>, path: &Path) -> Result<(), PgError> {
    let data: Vec<Vec<R>> = model.params.tensors.iter().map(|t| t.data.clone()).collect();
    write_container(path, &header(model, None, &[PARAMS]), &[&data])
}

/// Writes the full training state so that training can resume.
pub fn save_state<R: Real>(state: &TrainState<R>, path: &Path) -> Result<(), PgError> {
    let th = TrainHeader {
        step: state.step,
        adam_t: state.adam.t,
        best_score: state.best_score,
        best_step: state.best_step,
        stale: state.stale,
        initial_loss: state.initial_loss,
    };
    let params: Vec<Vec<R>> = state.model.params.tensors.iter().map(|t| t.data.clone()).collect();
    let best: Vec<Vec<R>> = state.best_params.tensors.iter().map(|t| t.data.clone()).collect();
    write_container(
        path,
        &header(&state.model, Some(th), &[PARAMS, ADAM_M, ADAM_V, BEST]),
        &[&params, &state.adam.m, &state.adam.v, &best],
    )
}

struct Loaded<R: Real> {
    header: Header,
    model: PgModel<R>,
    groups: Vec<(String, Vec<Vec<R>>)>,
}

fn read_container<R: Real>(path: &Path) -> Result<Loaded<R>, PgError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        d => return Err(bad(format!("unknown dtype {d}"))),
    };
    let mut model: PgModel<R> = PgModel {
        config: header.config.clone(),
        src_vocab: header.src_vocab.clone(),
        tgt_vocab: header.tgt_vocab.clone(),
        buckets: header.buckets,
        params: Params::zeros(&header.config, header.src_vocab.len(), header.tgt_vocab.len()),
    };
    let mut groups: Vec<(String, Vec<Vec<R>>)> = Vec::new();
    let mut buf = Vec::new();
    for entry in &header.tensors {
        let n = entry.rows * entry.cols;
        buf.resize(n * width, 0);
        r.read_exact(&mut buf).map_err(|_| bad(format!("truncated tensor {}", entry.name)))?;
        let data: Vec<R> = match width {
            4 => buf.chunks_exact(4).map(|c| R::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            _ => buf.chunks_exact(8).map(|c| R::from_f64(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        };
        if groups.last().is_none_or(|(g, _)| *g != entry.group) {
            groups.push((entry.group.clone(), Vec::new()));
        }
        let group = groups.last_mut().expect("pushed above");
        let slot = group.1.len();
        let expect = model.params.tensors.get(slot).ok_or_else(|| bad(format!("extra tensor {}", entry.name)))?;
        if expect.name != entry.name || expect.rows != entry.rows || expect.cols != entry.cols {
            return Err(bad(format!("tensor {} does not match the configured shapes", entry.name)));
        }
        group.1.push(data);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes"));
    }
    for (name, g) in &groups {
        if g.len() != model.params.len() {
            return Err(bad(format!("group {name} has {} of {} tensors", g.len(), model.params.len())));
        }
    }
    let params = take_group(&mut groups, PARAMS).ok_or_else(|| bad("no parameters"))?;
    for (t, d) in model.params.tensors.iter_mut().zip(params) {
        t.data = d;
    }
    if !model.params.is_finite() {
        return Err(bad("non-finite parameters"));
    }
    Ok(Loaded { header, model, groups })
}

fn take_group<R>(groups: &mut Vec<(String, Vec<Vec<R>>)>, name: &str) -> Option<Vec<Vec<R>>> {
    let i = groups.iter().position(|(g, _)| g == name)?;
    Some(groups.remove(i).1)
}

/// Reads a model from either a model or a training-state checkpoint,
/// converting the element type if needed.
pub fn load_model<R: Real>(path: &Path) -> Result<PgModel<R>, PgError> {
    Ok(read_container(path)?.model)
}

/// Reads a training-state checkpoint.
pub fn load_state<R: Real>(path: &Path) -> Result<TrainState<R>, PgError> {
    let Loaded { header, model, mut groups } = read_container::<R>(path)?;
    let th = header.train.ok_or_else(|| bad("not a training-state checkpoint"))?;
    let m = take_group(&mut groups, ADAM_M).ok_or_else(|| bad("missing optimizer moments"))?;
    let v = take_group(&mut groups, ADAM_V).ok_or_else(|| bad("missing optimizer moments"))?;
    let best = take_group(&mut groups, BEST).ok_or_else(|| bad("missing best parameters"))?;
    let mut best_params = model.params.clone();
    for (t, d) in best_params.tensors.iter_mut().zip(best) {
        t.data = d;
    }
    let mut adam = Adam::new(&model.params, model.config.learning_rate);
    adam.t = th.adam_t;
    adam.m = m;
    adam.v = v;
    Ok(TrainState {
        model,
        adam,
        step: th.step,
        best_params,
        best_score: th.best_score,
        best_step: th.best_step,
        stale: th.stale,
        initial_loss: th.initial_loss,
    })
}
