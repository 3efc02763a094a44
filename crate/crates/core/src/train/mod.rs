//! Data-parallel training: Adam with a staircase learning rate, parameter
//! moving averages, and gradient averaging across workers.
//!
//! Each iteration every worker draws its own batch, runs forward and backward
//! on a private graph over the same parameter snapshot, and returns gradients.
//! The gradients are averaged in worker order, one Adam step is applied, and
//! the moving averages are updated. Batch-norm running statistics come from
//! worker 0.

mod checkpoint;
mod eval;

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use eval::{evaluate_cases, evaluate_volume, predict_probs, DecisionRule, EvalSlices};

use crate::arch::{build_network, forward, NetConfig, NetworkSpec, ParamStore, BN_MOMENTUM};
use crate::autodiff::{Graph, Mode};
use crate::data::{load_case, normalize, read_manifest, slice_and_filter, Slice};
use crate::error::{invalid, shape_err, Error, Result};
use crate::losses::{build_loss, LossKind, LossParams};
use crate::tensor::Tensor;

pub type GradMap = IndexMap<String, Vec<f32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Multiplier applied once per `decay_every` iterations.
    pub lr_decay: f64,
    pub decay_every: u64,
    pub ema_decay: f64,
    pub batch_per_worker: usize,
    pub workers: usize,
    pub max_iterations: u64,
    pub loss: LossKind,
    pub loss_params: LossParams,
    pub net: NetConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(net: NetConfig, loss: LossKind) -> Self {
        TrainConfig {
            base_lr: 5e-5,
            lr_decay: 0.95,
            decay_every: 10_000,
            ema_decay: 0.9999,
            batch_per_worker: 8,
            workers: 1,
            max_iterations: 2000,
            loss,
            loss_params: LossParams::default(),
            net,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                invalid(format!("{name} = {v} outside (0, 1]"))
            }
        };
        unit("base_lr", self.base_lr)?;
        unit("lr_decay", self.lr_decay)?;
        unit("ema_decay", self.ema_decay)?;
        if self.ema_decay >= 1.0 {
            return invalid("ema_decay must be below 1");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return invalid("adam betas must be in [0, 1) and eps positive");
        }
        if self.decay_every == 0 || self.batch_per_worker == 0 || self.workers == 0 {
            return invalid("decay_every, batch_per_worker and workers must be positive");
        }
        self.loss_params.validate()?;
        self.net.validate()
    }
}

/// `base_lr * lr_decay^floor(iter / decay_every)`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_decay.powi((iter / cfg.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: GradMap,
    pub v: GradMap,
    /// Completed steps.
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>, config: AdamConfig) -> Self {
        let zeros: GradMap = params.params.iter().map(|(k, p)| (k.clone(), vec![0.0; p.numel()])).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0, config }
    }
}

/// One bias-corrected Adam update of every parameter in `grads`.
pub fn adam_step(params: &mut ParamStore<f32>, grads: &GradMap, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params.params.get(name).ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
        let m = state.m.get(name).ok_or_else(|| Error::Invalid(format!("no Adam state for {name}")))?;
        if p.numel() != g.len() || m.len() != g.len() {
            return shape_err(format!("gradient for {name} has {} entries, parameter {}", g.len(), p.numel()));
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.param_mut(name).data_mut();
        let m = state.m.get_mut(name).expect("checked");
        let v = state.v.get_mut(name).expect("checked");
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            p[i] = (p[i] as f64 - lr * (mi / c1) / ((vi / c2).sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

/// `shadow = decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut IndexMap<String, Tensor<f32>>, params: &IndexMap<String, Tensor<f32>>, decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return invalid(format!("EMA decay {decay} outside (0, 1)"));
    }
    for (name, p) in params {
        let s = shadow.get_mut(name).ok_or_else(|| Error::Invalid(format!("no shadow for {name}")))?;
        if s.numel() != p.numel() {
            return shape_err(format!("shadow for {name} has {} entries, parameter {}", s.numel(), p.numel()));
        }
        for (si, &pi) in s.data_mut().iter_mut().zip(p.data()) {
            *si = (decay * *si as f64 + (1.0 - decay) * pi as f64) as f32;
        }
    }
    Ok(())
}

/// Moving-average decay actually applied after `updates` optimizer steps:
/// small early on so the shadow tracks the fast initial movement.
pub fn ema_decay_at(updates: u64, decay: f64) -> f64 {
    decay.min((1.0 + updates as f64) / (10.0 + updates as f64))
}

/// Per-parameter mean over workers, accumulated in worker order.
pub fn average_gradients(maps: &[GradMap]) -> Result<GradMap> {
    let first = maps.first().ok_or_else(|| Error::Invalid("no gradients to average".into()))?;
    for (w, m) in maps.iter().enumerate().skip(1) {
        if m.len() != first.len() || m.iter().zip(first).any(|((ka, va), (kb, vb))| ka != kb || va.len() != vb.len()) {
            return shape_err(format!("worker {w} gradients do not match worker 0"));
        }
    }
    let n = maps.len() as f64;
    let mut out = GradMap::with_capacity(first.len());
    for (idx, (name, g0)) in first.iter().enumerate() {
        let mut acc: Vec<f64> = g0.iter().map(|&v| v as f64).collect();
        for m in &maps[1..] {
            let (_, g) = m.get_index(idx).expect("checked");
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v as f64;
            }
        }
        out.insert(name.clone(), acc.into_iter().map(|a| (a / n) as f32).collect());
    }
    Ok(out)
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Raw parameters and batch-norm running statistics.
    pub store: ParamStore<f32>,
    /// Moving averages of the parameters, used for evaluation.
    pub ema: IndexMap<String, Tensor<f32>>,
    pub adam: AdamState,
    /// Iterations completed.
    pub iteration: u64,
}

impl TrainState {
    pub fn init(spec: &NetworkSpec, cfg: &TrainConfig) -> Result<Self> {
        let store = ParamStore::init(spec, cfg.seed)?;
        let adam = AdamState::new(&store, cfg.adam.clone());
        Ok(TrainState { ema: store.params.clone(), store, adam, iteration: 0 })
    }

    /// Moving-average parameters with the current running statistics.
    pub fn eval_store(&self) -> ParamStore<f32> {
        ParamStore { params: self.ema.clone(), buffers: self.store.buffers.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut s = String::from("iteration,loss,lr\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.lr));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("iteration,loss,lr") {
        return Err(Error::Format(format!("{}: missing `iteration,loss,lr` header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("{}: bad row `{l}`", path.display()));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Normalized, tumor-filtered slices from every case of a manifest.
pub fn load_training_pool(manifest: &Path) -> Result<Vec<Slice>> {
    let mut pool = Vec::new();
    for case in read_manifest(manifest)? {
        let (vol, labels) = load_case(&case)?;
        pool.extend(slice_and_filter(&normalize(&vol), &labels)?.slices);
    }
    if pool.is_empty() {
        return Err(Error::EmptyData(format!("{}: no slice contains tumor", manifest.display())));
    }
    Ok(pool)
}

/// Slice indices drawn (with replacement) by `worker` at `iteration`.
pub fn sample_batch(pool_len: usize, seed: u64, worker: usize, iteration: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(worker as u64));
    rng.set_stream(iteration);
    (0..n).map(|_| rng.random_range(0..pool_len)).collect()
}

/// Stacks slices into `(N, 4, H, W)` images and flat labels.
pub fn assemble_batch(pool: &[Slice], indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = &pool[*indices.first().ok_or_else(|| Error::Invalid("empty batch".into()))?];
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * first.image.numel());
    let mut labels = Vec::with_capacity(indices.len() * first.labels.len());
    for &i in indices {
        let s = &pool[i];
        if s.image.shape() != shape.as_slice() {
            return shape_err(format!("slice shapes differ: {:?} vs {:?}", s.image.shape(), shape));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    let mut full = vec![indices.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::new(&full, data)?, labels))
}

/// What one worker computed on its batch.
#[derive(Clone, Debug)]
pub struct WorkerResult {
    pub grads: GradMap,
    pub loss: f64,
    /// The loss produced no gradient (bootstrap with every pixel filtered).
    pub skip: bool,
    /// Batch statistics `(mean, variance)` per batch-norm layer.
    pub batch_stats: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Forward, loss and backward on one batch against a parameter snapshot.
pub fn worker_gradients(
    spec: &NetworkSpec,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    labels: &[u8],
    loss: LossKind,
    params: &LossParams,
) -> Result<WorkerResult> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let pass = forward(spec, store, &mut g, x, Mode::Train)?;
    let out = build_loss(&mut g, pass.logits, labels, loss, params)?;
    let value = g.value(out.loss).item() as f64;
    let mut grads = g.backward(out.loss)?;
    let mut map = GradMap::with_capacity(spec.params.len());
    for (info, v) in spec.params.iter().zip(&pass.params) {
        let n = info.shape.iter().product();
        map.insert(info.name.clone(), grads.take(*v).unwrap_or_else(|| vec![0.0; n]));
    }
    let batch_stats = pass
        .norms
        .iter()
        .map(|&v| g.batch_stats(v).map(|(m, s)| (m.to_vec(), s.to_vec())))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Invalid("batch norm ran without batch statistics".into()))?;
    Ok(WorkerResult { grads: map, loss: value, skip: out.skip_update, batch_stats })
}

/// Outcome of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    /// No update was applied because every worker's loss was gradient-free.
    pub skipped: bool,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub spec: NetworkSpec,
    pool: &'a [Slice],
    pub state: TrainState,
    pub history: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, pool: &'a [Slice]) -> Result<Self> {
        let spec = build_network(&cfg.net)?;
        let state = TrainState::init(&spec, &cfg)?;
        Self::resume(cfg, pool, state)
    }

    /// Continues from a saved state; the sampling stream is keyed by
    /// iteration, so the run proceeds as if never interrupted.
    pub fn resume(cfg: TrainConfig, pool: &'a [Slice], state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let spec = build_network(&cfg.net)?;
        state.store.check(&spec)?;
        if pool.is_empty() {
            return Err(Error::EmptyData("training pool is empty".into()));
        }
        let shape = pool[0].image.shape();
        if shape.len() != 3 || shape[0] != spec.in_channels {
            return shape_err(format!("slices of shape {shape:?} do not fit a {}-channel network", spec.in_channels));
        }
        if shape[1] % spec.spatial_multiple != 0 || shape[2] % spec.spatial_multiple != 0 {
            return shape_err(format!("slice extent {}x{} not divisible by {}", shape[1], shape[2], spec.spatial_multiple));
        }
        Ok(Trainer { cfg, spec, pool, state, history: Vec::new() })
    }

    fn run_worker(&self, worker: usize) -> Result<WorkerResult> {
        let it = self.state.iteration;
        let idx = sample_batch(self.pool.len(), self.cfg.seed, worker, it, self.cfg.batch_per_worker);
        let (images, labels) = assemble_batch(self.pool, &idx)?;
        worker_gradients(&self.spec, &self.state.store, &images, &labels, self.cfg.loss, &self.cfg.loss_params)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        let lr = lr_at(it, &self.cfg);
        let results: Vec<WorkerResult> = if self.cfg.workers == 1 {
            vec![self.run_worker(0)?]
        } else {
            let this = &*self;
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..this.cfg.workers).map(|w| s.spawn(move || this.run_worker(w))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                    .collect::<Result<Vec<_>>>()
            })?
        };
        let losses: Vec<f64> = results.iter().map(|r| r.loss).collect();
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged { iteration: it, losses });
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let skipped = results.iter().all(|r| r.skip);
        if !skipped {
            let maps: Vec<GradMap> = results.iter().map(|r| r.grads.clone()).collect();
            let grads = average_gradients(&maps)?;
            adam_step(&mut self.state.store, &grads, &mut self.state.adam, lr)?;
            let decay = ema_decay_at(self.state.adam.t, self.cfg.ema_decay);
            ema_update(&mut self.state.ema, &self.state.store.params, decay)?;
            self.state.store.fold_batch_stats(&self.spec, &results[0].batch_stats, BN_MOMENTUM)?;
        }
        self.state.iteration += 1;
        self.history.push(LossRecord { iteration: it, loss, lr });
        Ok(StepReport { iteration: it, loss, lr, skipped })
    }

    /// Steps until `max_iterations`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while self.state.iteration < self.cfg.max_iterations {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Trains from scratch on `pool` and returns the final state and loss trace.
pub fn train(cfg: TrainConfig, pool: &[Slice]) -> Result<(TrainState, Vec<LossRecord>)> {
    let mut t = Trainer::new(cfg, pool)?;
    t.run(|_, _| Ok(()))?;
    Ok((t.state, t.history))
}
