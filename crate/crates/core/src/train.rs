//! Optimizer, learning-rate schedule, loss log and the shared step loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Trainable, Var};

pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    AnswerGen,
    Contrastive,
    Joint,
    Instruction,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    #[default]
    FreezeLlm,
    Lora,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means epochs decide.
    pub max_steps: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub tuning: TuningMode,
    pub clip_norm: f64,
    pub log_every: usize,
    /// Leave the loop once this many steps have run, keeping the schedule
    /// of the full run so a resume picks it up; 0 runs to the end.
    pub stop_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_frac: 0.03,
            batch_size: 4,
            epochs: 3,
            max_steps: 0,
            seed: 0,
            loss_mode: LossMode::Instruction,
            tuning: TuningMode::FreezeLlm,
            clip_norm: 1.0,
            log_every: 1,
            stop_after: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside [0, 1)",
                self.warmup_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Step at which this invocation returns.
    pub fn end_step(&self, examples: usize) -> usize {
        let total = self.total_steps(examples);
        if self.stop_after > 0 {
            self.stop_after.min(total)
        } else {
            total
        }
    }

    /// Optimizer steps for a corpus of `examples` items.
    pub fn total_steps(&self, examples: usize) -> usize {
        let per_epoch = examples.div_ceil(self.batch_size);
        let steps = per_epoch * self.epochs;
        if self.max_steps > 0 {
            self.max_steps
        } else {
            steps
        }
    }
}

/// Linear warmup to `base_lr` over the first `warmup_frac · total` steps,
/// then cosine decay to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = warmup_frac * total;
    if step < warm {
        return base_lr * step / warm;
    }
    let span = total - warm;
    if span <= 0.0 {
        return base_lr;
    }
    let p = (step - warm) / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected adaptive moments; decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        let i = id.index();
        match (self.m.get(i), self.v.get(i)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    /// One update. Fails before touching anything if a gradient is not
    /// finite.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("adam", store.name(*id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| g.zeros_like());
            let v = self.v[i].get_or_insert_with(|| g.zeros_like());
            let p = store.get_mut(*id);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * (mh / (vh.sqrt() + eps) + weight_decay * *pv);
            }
        }
        Ok(())
    }

    /// Moments as `optim.m.<name>` / `optim.v.<name>` plus `optim.step`.
    pub fn export(&self, params: &ParamStore, out: &mut ParamStore) -> Result<()> {
        out.insert(format!("{OPTIM_PREFIX}step"), Tensor::scalar(self.step as f64))?;
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            if let (Some(m), Some(v)) = (m, v) {
                let name = params.name(ParamId(i));
                out.insert(format!("{OPTIM_PREFIX}m.{name}"), m.clone())?;
                out.insert(format!("{OPTIM_PREFIX}v.{name}"), v.clone())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`Adam::export`]; moments are matched by parameter name.
    pub fn import(cfg: AdamConfig, params: &ParamStore, saved: &ParamStore) -> Result<Self> {
        let mut opt = Self::new(cfg);
        let step = saved
            .id(&format!("{OPTIM_PREFIX}step"))
            .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        opt.step = saved.get(step).data()[0] as u64;
        opt.m = vec![None; params.len()];
        opt.v = vec![None; params.len()];
        for (id, name, value) in params.iter() {
            let find = |k: &str| saved.id(&format!("{OPTIM_PREFIX}{k}.{name}"));
            if let (Some(m), Some(v)) = (find("m"), find("v")) {
                if saved.get(m).shape() != value.shape() || saved.get(v).shape() != value.shape() {
                    return Err(Error::Checkpoint(format!("moment shape for {name}")));
                }
                opt.m[id.index()] = Some(saved.get(m).clone());
                opt.v[id.index()] = Some(saved.get(v).clone());
            }
        }
        Ok(opt)
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub task: String,
    pub timestamp: Option<u64>,
}

/// CSV loss curve: `step,lr,loss,task[,timestamp]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
    pub timestamps: bool,
}

impl LossLog {
    pub fn new(timestamps: bool) -> Self {
        Self {
            rows: Vec::new(),
            timestamps,
        }
    }

    pub fn push(&mut self, step: usize, lr: f64, loss: f64, task: &str) {
        let timestamp = self.timestamps.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        self.rows.push(LossRow {
            step,
            lr,
            loss,
            task: task.to_string(),
            timestamp,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,task");
        if self.timestamps {
            s.push_str(",timestamp");
        }
        s.push('\n');
        for r in &self.rows {
            // `{:?}` on f64 prints the shortest round-tripping form.
            let _ = write!(s, "{},{:?},{:?},{}", r.step, r.lr, r.loss, r.task);
            if let Some(t) = r.timestamp {
                let _ = write!(s, ",{t}");
            }
            s.push('\n');
        }
        s
    }

    /// Reads a log written by [`LossLog::write`]. Rows keep their
    /// timestamps only when `timestamps` is set.
    pub fn read(path: &Path, timestamps: bool) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(raw.as_slice());
        let mut rows = Vec::new();
        let bad = |what: &str| Error::Decode(format!("{}: bad {what}", path.display()));
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Decode(e.to_string()))?;
            if rec.len() < 4 {
                return Err(bad("row"));
            }
            let timestamp = match rec.get(4) {
                Some(t) if timestamps => Some(t.parse().map_err(|_| bad("timestamp"))?),
                None if timestamps => Some(0),
                _ => None,
            };
            rows.push(LossRow {
                step: rec[0].parse().map_err(|_| bad("step"))?,
                lr: rec[1].parse().map_err(|_| bad("lr"))?,
                loss: rec[2].parse().map_err(|_| bad("loss"))?,
                task: rec[3].to_string(),
                timestamp,
            });
        }
        Ok(Self { rows, timestamps })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// One optimizer step: builds the loss with `build`, backpropagates into
/// `trainable`, clips and applies Adam. Returns the loss value.
pub fn train_step<F>(
    store: &mut ParamStore,
    trainable: &Trainable,
    opt: &mut Adam,
    lr: f64,
    clip_norm: f64,
    build: F,
) -> Result<f64>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::with_trainable(trainable.clone());
    let loss = build(&mut g, store)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient("loss".into()));
    }
    let grads = g.backward(loss)?;
    let mut grads = grads.params(&g);
    if clip_norm > 0.0 {
        clip_global_norm(&mut grads, clip_norm);
    }
    opt.update(store, &grads, lr)?;
    Ok(value)
}

/// Deterministic epoch orders: a seeded shuffle per epoch.
pub fn epoch_order(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::hash::mix(seed, epoch as u64));
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng);
    v
}

/// Batches (as example indices) for step `step` given the epoch size.
pub fn batch_at(step: usize, n: usize, batch: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let epoch = step / per_epoch;
    let k = step % per_epoch;
    let order = epoch_order(n, epoch, seed);
    order[k * batch..((k + 1) * batch).min(n)].to_vec()
}
