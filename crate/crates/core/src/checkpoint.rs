//! Versioned checkpoint container: query and key parameters with their
//! normalization buffers, optimizer moments, both queues and the loop
//! counters needed to resume bit-exactly.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::RetrievalMetrics;
use crate::feature_store::format::{self, Container, RawTensor};
use crate::momentum_contrast::DynamicQueue;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::real::Real;

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub mini: f64,
    pub dvq: f64,
    pub dtq: f64,
    pub val: Option<RetrievalMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    /// `None` for the untrained model of a zero-epoch run.
    pub epoch: Option<usize>,
    pub rsum: f64,
}

/// Loop position and running sums of the epoch in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Progress {
    pub global_step: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub loss_sum: f64,
    pub mini_sum: f64,
    pub dvq_sum: f64,
    pub dtq_sum: f64,
    pub history: Vec<EpochLog>,
    pub best: Option<BestRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    version: u32,
    config_hash: String,
    config: String,
    precision: String,
    adam_step: u64,
    queue_capacity: usize,
    progress: Progress,
}

/// Everything a training run owns.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub query: ParamStore<F>,
    pub key: ParamStore<F>,
    pub opt: AdamW<F>,
    pub visual_queue: DynamicQueue<F>,
    pub text_queue: DynamicQueue<F>,
    pub progress: Progress,
}

fn store_tensors<F: Real>(prefix: &str, store: &ParamStore<F>, out: &mut Vec<RawTensor>) {
    for p in store.params() {
        let (r, c) = p.value.dim();
        out.push(RawTensor::real(
            format!("{prefix}.param.{}", p.name),
            vec![r, c],
            &p.value.iter().copied().collect::<Vec<_>>(),
        ));
    }
    for b in store.buffers() {
        out.push(RawTensor::real(format!("{prefix}.buffer.{}", b.name), vec![b.value.len()], &b.value));
    }
}

fn moments<F: Real>(prefix: &str, store: &ParamStore<F>, m: &[Array2<F>], out: &mut Vec<RawTensor>) {
    for (p, a) in store.params().iter().zip(m) {
        let (r, c) = a.dim();
        out.push(RawTensor::real(
            format!("{prefix}.{}", p.name),
            vec![r, c],
            &a.iter().copied().collect::<Vec<_>>(),
        ));
    }
}

fn queue_tensor<F: Real>(name: &str, q: &DynamicQueue<F>) -> RawTensor {
    let snap = q.snapshot();
    RawTensor::real(name, vec![snap.nrows(), snap.ncols()], &snap.iter().copied().collect::<Vec<_>>())
}

pub fn save<F: Real>(path: &Path, cfg: &RunConfig, state: &TrainState<F>) -> Result<()> {
    let mut tensors = Vec::new();
    store_tensors("query", &state.query, &mut tensors);
    store_tensors("key", &state.key, &mut tensors);
    moments("adam_m", &state.query, &state.opt.m, &mut tensors);
    moments("adam_v", &state.query, &state.opt.v, &mut tensors);
    tensors.push(queue_tensor("queue.visual", &state.visual_queue));
    tensors.push(queue_tensor("queue.text", &state.text_queue));
    let meta = Meta {
        version: VERSION,
        config_hash: cfg.hash(),
        config: cfg.to_toml(),
        precision: F::NAME.into(),
        adam_step: state.opt.step,
        queue_capacity: state.visual_queue.capacity(),
        progress: state.progress.clone(),
    };
    format::write_container(path, &tensors, &meta)?;
    Ok(())
}

/// Header of a checkpoint without touching the tensors.
pub struct CheckpointInfo {
    pub config: RunConfig,
    pub config_hash: String,
    pub precision: String,
    pub progress: Progress,
}

pub fn info(path: &Path) -> Result<CheckpointInfo> {
    let c = Container::open(path)?;
    let meta: Meta = c.meta()?;
    if meta.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
    }
    let table: toml::Table = toml::from_str(&meta.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(CheckpointInfo {
        config: RunConfig::from_table(table)?,
        config_hash: meta.config_hash,
        precision: meta.precision,
        progress: meta.progress,
    })
}

fn fill_store<F: Real>(c: &Container, prefix: &str, store: &mut ParamStore<F>) -> Result<()> {
    for p in store.params_mut() {
        let name = format!("{prefix}.param.{}", p.name);
        let (shape, v) = c.real::<F>(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if shape != [p.value.nrows(), p.value.ncols()] {
            return Err(Error::Checkpoint(format!("`{name}` has shape {shape:?}, expected {:?}", p.value.dim())));
        }
        p.value = Array2::from_shape_vec(p.value.dim(), v).expect("checked shape");
    }
    for b in store.buffers_mut() {
        let name = format!("{prefix}.buffer.{}", b.name);
        let (shape, v) = c.real::<F>(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if shape != [b.value.len()] {
            return Err(Error::Checkpoint(format!("`{name}` has shape {shape:?}")));
        }
        b.value = v;
    }
    Ok(())
}

fn fill_moments<F: Real>(c: &Container, prefix: &str, store: &ParamStore<F>, m: &mut [Array2<F>]) -> Result<()> {
    for (p, a) in store.params().iter().zip(m.iter_mut()) {
        let name = format!("{prefix}.{}", p.name);
        let (shape, v) = c.real::<F>(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if shape != [a.nrows(), a.ncols()] {
            return Err(Error::Checkpoint(format!("`{name}` has shape {shape:?}")));
        }
        *a = Array2::from_shape_vec(a.dim(), v).expect("checked shape");
    }
    Ok(())
}

fn read_queue<F: Real>(c: &Container, name: &str, capacity: usize, dim: usize) -> Result<DynamicQueue<F>> {
    let (shape, v) = c.real::<F>(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let rows = shape.first().copied().unwrap_or(0);
    let fifo = Array2::from_shape_vec((rows, dim), v).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    Ok(DynamicQueue::from_fifo(capacity, fifo.view())?)
}

/// Loads a checkpoint into `state`, whose layout must already match.
/// A config-hash mismatch is refused unless `force` is set.
pub fn load_into<F: Real>(path: &Path, cfg: &RunConfig, state: &mut TrainState<F>, force: bool) -> Result<()> {
    let c = Container::open(path)?;
    let meta: Meta = c.meta()?;
    if meta.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
    }
    if meta.precision != F::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} differs from run precision {}",
            meta.precision,
            F::NAME
        )));
    }
    if meta.config_hash != cfg.hash() && !force {
        return Err(Error::Checkpoint(format!(
            "config hash {} differs from checkpoint {}; pass --force to resume anyway",
            cfg.hash(),
            meta.config_hash
        )));
    }
    fill_store(&c, "query", &mut state.query)?;
    fill_store(&c, "key", &mut state.key)?;
    fill_moments(&c, "adam_m", &state.query, &mut state.opt.m)?;
    fill_moments(&c, "adam_v", &state.query, &mut state.opt.v)?;
    state.opt.step = meta.adam_step;
    let dim = state.visual_queue.dim();
    state.visual_queue = read_queue(&c, "queue.visual", meta.queue_capacity, dim)?;
    state.text_queue = read_queue(&c, "queue.text", meta.queue_capacity, dim)?;
    state.progress = meta.progress;
    Ok(())
}

/// Query-encoder parameters only, for inference.
pub fn load_query<F: Real>(path: &Path, store: &mut ParamStore<F>) -> Result<()> {
    let c = Container::open(path)?;
    fill_store(&c, "query", store)
}
