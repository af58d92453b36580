//! Training loop: query forward, key forward, losses against the current
//! queues, optimizer step, momentum update, enqueue.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::checkpoint::{self, BestRecord, EpochLog, Progress, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{self, Protocol, RetrievalMetrics};
use crate::feature_store::{batch_slices, epoch_order, Batch, Dataset, ExpectedDims};
use crate::model::Model;
use crate::momentum_contrast::{initialize_key_from_query, momentum_update, DynamicQueue};
use crate::objectives::{self, LossKind};
use crate::optim::{self, AdamW, AdamWConfig};
use crate::params::{Mode, ParamStore};
use crate::real::Real;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Per-step diagnostics. The three digests witness the ordering contract:
/// the loss sees the queues exactly as they were before the step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub mini: f64,
    pub dvq: f64,
    pub dtq: f64,
    pub grad_norm: f64,
    pub queue_before: (String, String),
    pub queue_at_loss: (String, String),
    pub queue_after: (String, String),
    pub key_grad_free: bool,
}

pub fn expected_dims(cfg: &RunConfig) -> ExpectedDims {
    ExpectedDims {
        num_regions: Some(cfg.data.num_regions),
        d_i: Some(cfg.data.d_i),
        d_t: Some(cfg.data.d_t),
        d_ic: (cfg.model.enhancement == crate::visual_encoder::Enhancement::Cge).then_some(cfg.data.d_ic),
        max_length: Some(cfg.data.max_length),
        require_clip: cfg.model.enhancement == crate::visual_encoder::Enhancement::Cge,
    }
}

pub struct Trainer<'a, F: Real> {
    pub cfg: RunConfig,
    pub model: Model,
    pub train: &'a Dataset<F>,
    pub val: &'a Dataset<F>,
    pub state: TrainState<F>,
}

fn digests<F: Real>(s: &TrainState<F>) -> (String, String) {
    (s.visual_queue.digest(), s.text_queue.digest())
}

impl<'a, F: Real> Trainer<'a, F> {
    /// Fresh state: parameters from the seed, key copied from query,
    /// queues empty.
    pub fn new(cfg: RunConfig, train: &'a Dataset<F>, val: &'a Dataset<F>) -> Self {
        let (model, query) = Model::from_config::<F>(&cfg);
        let mut key = ParamStore::new();
        initialize_key_from_query(&query, &mut key);
        let opt = AdamW::new(
            &query,
            AdamWConfig {
                weight_decay: cfg.train.weight_decay,
                ..Default::default()
            },
        );
        let cap = if cfg.moco.enabled { cfg.moco.queue_size } else { cfg.train.batch_size };
        let state = TrainState {
            query,
            key,
            opt,
            visual_queue: DynamicQueue::new(cap, cfg.model.d_j),
            text_queue: DynamicQueue::new(cap, cfg.model.d_j),
            progress: Progress::default(),
        };
        Self {
            cfg,
            model,
            train,
            val,
            state,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let t = &self.cfg.train;
        optim::learning_rate(t.lr, epoch, t.epochs, t.lr_decay_epochs, t.lr_decay_factor)
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &Batch<F>, lr: f64) -> Result<StepReport> {
        let cfg = &self.cfg;
        let loss_cfg = cfg.loss.to_loss_config();
        let moco = cfg.moco.enabled;
        let queue_before = digests(&self.state);

        // (1) query encoders
        let mut g = Graph::<F>::new();
        let p = self.state.query.bind(&mut g);
        let v = self
            .model
            .encode_images_graph(&mut g, &p, &mut self.state.query, &batch.images, Mode::Train)?;
        let w = self.model.encode_captions_graph(&mut g, &p, &batch.captions)?;
        let (v_val, w_val) = (g.value(v).clone(), g.value(w).clone());

        // (2) key encoders, outside any gradient
        let mut key_grad_free = true;
        let keys = if moco {
            let mut gk = Graph::<F>::no_grad();
            key_grad_free = !gk.grad_enabled();
            let pk = self.state.key.bind(&mut gk);
            let vk = self
                .model
                .encode_images_graph(&mut gk, &pk, &mut self.state.key, &batch.images, Mode::Train)?;
            let wk = self.model.encode_captions_graph(&mut gk, &pk, &batch.captions)?;
            Some((gk.value(vk).clone(), gk.value(wk).clone()))
        } else {
            None
        };

        // (3) losses against the queues as they are now
        let queue_at_loss = digests(&self.state);
        let lambda = F::c(loss_cfg.lambda);
        let mini = match loss_cfg.kind {
            LossKind::Hal => objectives::mini_hal_loss(v_val.view(), w_val.view(), &loss_cfg)?,
            LossKind::Triplet => objectives::triplet_loss(v_val.view(), w_val.view(), loss_cfg.triplet_margin)?,
        };
        let mut grad_v = mini.grad_v.mapv(|x| x * lambda);
        let mut grad_w = mini.grad_w.mapv(|x| x * lambda);
        let (mut dvq, mut dtq) = (F::zero(), F::zero());
        if let Some((vk, wk)) = &keys {
            let vq = self.state.visual_queue.snapshot();
            let tq = self.state.text_queue.snapshot();
            let dq = objectives::dq_hal_loss(
                v_val.view(),
                w_val.view(),
                vk.view(),
                wk.view(),
                vq.view(),
                tq.view(),
                &loss_cfg,
            )?;
            grad_v += &dq.grad_v;
            grad_w += &dq.grad_w;
            dvq = dq.dvq;
            dtq = dq.dtq;
        }
        let total = objectives::total_loss(mini.value, dvq + dtq, &loss_cfg);
        if !total.is_finite() || !mini.value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.progress.global_step,
                batch_ids: batch.images.ids.clone(),
                components: format!(
                    "mini={} dvq={} dtq={} total={}",
                    mini.value, dvq, dtq, total
                ),
            });
        }

        // (4) gradient step on the query parameters
        let mut grads = g.backward(&[(v, grad_v), (w, grad_w)])?;
        let mut pg = optim::param_grads(&self.state.query, &p, &mut grads);
        let grad_norm = optim::clip_global_norm(&mut pg, cfg.train.clip());
        self.state.opt.update(&mut self.state.query, &pg, lr)?;

        // (5) momentum update, (6) enqueue
        if let Some((vk, wk)) = keys {
            momentum_update(&self.state.query, &mut self.state.key, cfg.moco.momentum)?;
            self.state.visual_queue.enqueue(vk.view())?;
            self.state.text_queue.enqueue(wk.view())?;
        }
        self.state.progress.global_step += 1;
        Ok(StepReport {
            loss: total.to_f64_lossy(),
            mini: mini.value.to_f64_lossy(),
            dvq: dvq.to_f64_lossy(),
            dtq: dtq.to_f64_lossy(),
            grad_norm: grad_norm.to_f64_lossy(),
            queue_before,
            queue_at_loss,
            queue_after: digests(&self.state),
            key_grad_free,
        })
    }

    pub fn validate(&self) -> Result<RetrievalMetrics> {
        Ok(evaluator::evaluate_model(
            &self.model,
            &self.state.query,
            self.val,
            Protocol::Full5k,
            self.cfg.train.eval_batch_size,
        )?
        .metrics)
    }

    /// Runs (or continues) training in `dir`. Stops early, after saving
    /// `last.ckpt`, once `train.stop_after_steps` steps have run in total.
    pub fn run(&mut self, dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_file(&dir.join(RESOLVED_CONFIG), self.cfg.to_toml().as_bytes())?;
        let epochs = self.cfg.train.epochs;
        let b = self.cfg.train.batch_size;
        if epochs == 0 && self.state.progress.best.is_none() {
            let m = self.validate()?;
            self.state.progress.best = Some(BestRecord { epoch: None, rsum: m.rsum });
            self.state.progress.history.clear();
            checkpoint::save(&dir.join(BEST_CHECKPOINT), &self.cfg, &self.state)?;
            checkpoint::save(&dir.join(LAST_CHECKPOINT), &self.cfg, &self.state)?;
            write_metrics(dir, &self.state.progress.history)?;
            return Ok(self.outcome(dir, false, Some(m)));
        }
        while self.state.progress.epoch < epochs {
            let epoch = self.state.progress.epoch;
            let lr = self.lr(epoch);
            let order = epoch_order(self.train.num_pairs(), self.cfg.run.seed, epoch as u64);
            let batches = batch_slices(&order, b, true);
            while self.state.progress.step_in_epoch < batches.len() {
                if let Some(stop) = self.cfg.train.stop_after_steps {
                    if self.state.progress.global_step >= stop {
                        checkpoint::save(&dir.join(LAST_CHECKPOINT), &self.cfg, &self.state)?;
                        return Ok(self.outcome(dir, true, None));
                    }
                }
                let batch = self.train.batch(batches[self.state.progress.step_in_epoch]);
                let r = self.train_step(&batch, lr)?;
                let p = &mut self.state.progress;
                p.loss_sum += r.loss;
                p.mini_sum += r.mini;
                p.dvq_sum += r.dvq;
                p.dtq_sum += r.dtq;
                p.step_in_epoch += 1;
            }
            let val = self.validate()?;
            let p = &mut self.state.progress;
            let steps = p.step_in_epoch;
            let n = steps.max(1) as f64;
            p.history.push(EpochLog {
                epoch,
                steps,
                lr,
                loss: p.loss_sum / n,
                mini: p.mini_sum / n,
                dvq: p.dvq_sum / n,
                dtq: p.dtq_sum / n,
                val: Some(val),
            });
            p.epoch += 1;
            p.step_in_epoch = 0;
            p.loss_sum = 0.0;
            p.mini_sum = 0.0;
            p.dvq_sum = 0.0;
            p.dtq_sum = 0.0;
            let improved = p.best.map_or(true, |best| val.rsum > best.rsum);
            if improved {
                p.best = Some(BestRecord {
                    epoch: Some(epoch),
                    rsum: val.rsum,
                });
                checkpoint::save(&dir.join(BEST_CHECKPOINT), &self.cfg, &self.state)?;
            }
            checkpoint::save(&dir.join(LAST_CHECKPOINT), &self.cfg, &self.state)?;
            write_metrics(dir, &self.state.progress.history)?;
        }
        Ok(self.outcome(dir, false, None))
    }

    fn outcome(&self, dir: &Path, interrupted: bool, initial: Option<RetrievalMetrics>) -> TrainOutcome {
        TrainOutcome {
            dir: dir.to_path_buf(),
            best: self.state.progress.best,
            history: self.state.progress.history.clone(),
            global_step: self.state.progress.global_step,
            interrupted,
            initial,
        }
    }

    /// Restores `dir/last.ckpt` into this trainer.
    pub fn resume(&mut self, dir: &Path, force: bool) -> Result<()> {
        checkpoint::load_into(&dir.join(LAST_CHECKPOINT), &self.cfg, &mut self.state, force)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub best: Option<BestRecord>,
    pub history: Vec<EpochLog>,
    pub global_step: u64,
    pub interrupted: bool,
    /// Validation metrics of the untrained model in a zero-epoch run.
    pub initial: Option<RetrievalMetrics>,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join(BEST_CHECKPOINT)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_metrics(dir: &Path, history: &[EpochLog]) -> Result<()> {
    let path = dir.join(METRICS_LOG);
    let mut out = Vec::new();
    for e in history {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.write_all(b"\n").expect("in-memory write");
    }
    write_file(&path, &out)
}

/// Loads the configured splits in the run precision.
pub fn load_splits<F: Real>(cfg: &RunConfig) -> Result<(Dataset<F>, Dataset<F>)> {
    let exp = expected_dims(cfg);
    let train = Dataset::load(cfg.data_root(), &cfg.data.train_split, &exp)?;
    let val = if cfg.data.val_split == cfg.data.train_split {
        train.clone()
    } else {
        Dataset::load(cfg.data_root(), &cfg.data.val_split, &exp)?
    };
    Ok((train, val))
}

/// Train from scratch, or continue from `dir/last.ckpt` when `resume`.
pub fn train<F: Real>(cfg: &RunConfig, dir: &Path, resume: bool, force: bool) -> Result<TrainOutcome> {
    let (train, val) = load_splits::<F>(cfg)?;
    let mut t = Trainer::new(cfg.clone(), &train, &val);
    if resume {
        t.resume(dir, force)?;
    }
    t.run(dir)
}
