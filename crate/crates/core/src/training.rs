//! Two-phase training: base training on base classes, then balanced
//! fine-tuning on a k-shot episode with a freezing policy.

use std::collections::BTreeMap;
use std::io::Write;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, FeatureRecord};
use crate::diffmath::{Matrix, ParamSet};
use crate::embeddings::{name_key, ClassKind, ClassRegistry};
use crate::error::{Error, Result};
use crate::head::{Head, LossTerm, TrainableSet};
use crate::util::{self, fmt_sig9};

pub const DEFAULT_LR: f64 = 0.02;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0001;
pub const DEFAULT_FINETUNE_LR: f64 = 0.001;
pub const DEFAULT_SHOTS: [usize; 5] = [1, 2, 3, 5, 10];
/// Fine-tuning runs this many steps per novel record before the divisor.
pub const FINETUNE_STEPS_PER_NOVEL_RECORD: usize = 500;
pub const DEFAULT_MILESTONES: [f64; 2] = [2.0 / 3.0, 5.0 / 6.0];
pub const DEFAULT_LR_DECAY: f64 = 0.1;

/// Momentum buffers, created lazily with zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    pub velocity: IndexMap<String, Matrix>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// Classic momentum with coupled weight decay:
/// `v ← μ v + g + wd p`, then `p ← p − lr v`. Only parameters named in
/// `grads` move.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptState, cfg: &SgdConfig) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        if v.shape() != p.shape() {
            return Err(Error::Shape {
                op: "sgd_step velocity",
                left: v.shape(),
                right: p.shape(),
            });
        }
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= cfg.lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Every batch slot draws uniformly from all records.
    Uniform,
    /// Every batch slot picks the base or novel set with probability 1/2,
    /// then a uniform record from that set.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Explicit step budget; fine-tuning derives one from the episode when absent.
    pub steps: Option<usize>,
    /// Scales the fine-tuning budget `500 × |novel records|` down to desk size.
    pub step_divisor: usize,
    pub batch_size: usize,
    /// Fractions of the budget at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub trainable: TrainableSet,
    pub sampling: Sampling,
}

impl TrainConfig {
    pub fn base_default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            steps: Some(600),
            step_divisor: 1,
            batch_size: 32,
            milestones: DEFAULT_MILESTONES.to_vec(),
            lr_decay: DEFAULT_LR_DECAY,
            trainable: TrainableSet::all(),
            sampling: Sampling::Uniform,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            sgd: SgdConfig {
                lr: DEFAULT_FINETUNE_LR,
                ..SgdConfig::default()
            },
            steps: None,
            step_divisor: 1,
            batch_size: 32,
            milestones: DEFAULT_MILESTONES.to_vec(),
            lr_decay: DEFAULT_LR_DECAY,
            trainable: TrainableSet::finetune_default(),
            sampling: Sampling::Balanced,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sgd.lr >= 0.0 && self.sgd.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.sgd.lr)));
        }
        if self.batch_size == 0 || self.step_divisor == 0 {
            return Err(Error::Config("batch size and step divisor must be at least 1".into()));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("milestones must be fractions in [0, 1]".into()));
        }
        Ok(())
    }

    /// Budget for a fine-tuning episode with `novel_records` novel records.
    pub fn finetune_steps(&self, novel_records: usize) -> usize {
        self.steps
            .unwrap_or_else(|| (FINETUNE_STEPS_PER_NOVEL_RECORD * novel_records).div_ceil(self.step_divisor))
    }

    /// Step-decayed learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|m| step >= (*m * total as f64).floor() as usize)
            .count();
        self.sgd.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub k: usize,
    /// Records per base class (background included); defaults to `k`.
    pub base_shots: Option<usize>,
    /// Supplied per run rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    pub shots: Vec<usize>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            k: 1,
            base_shots: None,
            seed: 0,
            shots: DEFAULT_SHOTS.to_vec(),
        }
    }
}

impl EpisodeConfig {
    pub fn base_count(&self) -> usize {
        self.base_shots.unwrap_or(self.k)
    }
}

/// A k-shot fine-tuning set: a balanced base subset plus the novel shots.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub k: usize,
    pub base: Vec<FeatureRecord>,
    pub novel: Vec<FeatureRecord>,
}

impl Episode {
    pub fn ids(&self) -> Vec<String> {
        self.base.iter().chain(&self.novel).map(|r| r.id.clone()).collect()
    }
}

fn group_by_class(records: &[FeatureRecord]) -> BTreeMap<String, Vec<&FeatureRecord>> {
    let mut out: BTreeMap<String, Vec<&FeatureRecord>> = BTreeMap::new();
    for r in records {
        out.entry(name_key(&r.label)).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    out
}

/// The first `count` records of a seeded per-class permutation. The
/// permutation ignores `count`, so episodes for larger k contain those for
/// smaller k.
fn take_class(
    groups: &BTreeMap<String, Vec<&FeatureRecord>>,
    class: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<FeatureRecord>> {
    let key = name_key(class);
    let pool = groups.get(&key).map(Vec::as_slice).unwrap_or(&[]);
    if pool.len() < count {
        return Err(Error::InsufficientRecords {
            class: class.to_string(),
            needed: count,
            available: pool.len(),
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut util::rng(seed, &format!("episode/{key}"), 0));
    Ok(order[..count].iter().map(|&i| pool[i].clone()).collect())
}

/// Samples exactly `k` records per novel class and `base_count` per base
/// class (background included), in registry order.
pub fn sample_episode(
    base_data: &[FeatureRecord],
    novel_data: &[FeatureRecord],
    registry: &ClassRegistry,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let base_groups = group_by_class(base_data);
    let novel_groups = group_by_class(novel_data);
    let mut base = Vec::new();
    let mut novel = Vec::new();
    for c in registry.entries() {
        match c.kind {
            ClassKind::Novel => novel.extend(take_class(&novel_groups, &c.name, cfg.k, cfg.seed)?),
            ClassKind::Base | ClassKind::Background => {
                base.extend(take_class(&base_groups, &c.name, cfg.base_count(), cfg.seed)?)
            }
        }
    }
    Ok(Episode { k: cfg.k, base, novel })
}

/// Infinite stream of index batches over two record sets. Each slot picks a
/// set with probability 1/2, then a uniform record within it. Indices
/// `0..base_len` are base records, the rest novel.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    base_len: usize,
    novel_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let batch = (0..self.batch_size)
            .map(|_| {
                if self.rng.random_bool(0.5) {
                    self.rng.random_range(0..self.base_len)
                } else {
                    self.base_len + self.rng.random_range(0..self.novel_len)
                }
            })
            .collect();
        Some(batch)
    }
}

pub fn balanced_batch_iter(episode: &Episode, batch_size: usize, seed: u64) -> Result<BalancedBatches> {
    balanced_indices(episode.base.len(), episode.novel.len(), batch_size, seed)
}

pub fn balanced_indices(base_len: usize, novel_len: usize, batch_size: usize, seed: u64) -> Result<BalancedBatches> {
    if base_len == 0 || novel_len == 0 {
        return Err(Error::Invalid("balanced sampling needs non-empty base and novel sets".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(BalancedBatches {
        base_len,
        novel_len,
        batch_size,
        rng: util::rng(seed, "balanced-batches", 0),
    })
}

/// Infinite stream of uniformly drawn index batches.
#[derive(Debug, Clone)]
pub struct UniformBatches {
    len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Iterator for UniformBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some((0..self.batch_size).map(|_| self.rng.random_range(0..self.len)).collect())
    }
}

pub fn uniform_batch_iter(len: usize, batch_size: usize, seed: u64) -> Result<UniformBatches> {
    if len == 0 || batch_size == 0 {
        return Err(Error::Invalid("uniform sampling needs records and a positive batch size".into()));
    }
    Ok(UniformBatches {
        len,
        batch_size,
        rng: util::rng(seed, "uniform-batches", 0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss_cls,loss_reg,lr")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                r.step,
                fmt_sig9(r.loss_cls),
                fmt_sig9(r.loss_reg),
                fmt_sig9(r.lr)
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

fn run_steps(
    head: &Head,
    records: &[&FeatureRecord],
    labels: &[usize],
    cfg: &TrainConfig,
    steps: usize,
    mut batches: impl Iterator<Item = Vec<usize>>,
) -> Result<(Head, LossTrace)> {
    cfg.validate()?;
    let mut head = head.clone();
    let mut state = OptState::default();
    let mut trace = LossTrace::default();
    let mut params = head.params().clone();
    for step in 0..steps {
        let idx = batches.next().expect("batch streams are infinite");
        let recs: Vec<&FeatureRecord> = idx.iter().map(|&i| records[i]).collect();
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch = Batch::new(&recs, &lab)?;
        let out = head.loss_and_grads(&batch, &cfg.trainable, LossTerm::Total)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss",
                row: step,
                col: 0,
            });
        }
        let lr = cfg.lr_at(step, steps);
        trace.rows.push(TraceRow {
            step,
            loss_cls: out.loss_cls,
            loss_reg: out.loss_reg,
            lr,
        });
        let grads: ParamSet = out
            .grads
            .into_iter()
            .filter(|(name, _)| cfg.trainable.contains(name))
            .collect();
        if grads.is_empty() {
            continue;
        }
        let sgd = SgdConfig { lr, ..cfg.sgd };
        sgd_step(&mut params, &grads, &mut state, &sgd)?;
        head.set_params(&grads.keys().map(|k| (k.clone(), params[k].clone())).collect())?;
    }
    Ok((head, trace))
}

/// First phase: every parameter trainable on base-class data, uniform
/// sampling unless configured otherwise.
pub fn base_train(head: &Head, base_data: &[FeatureRecord], cfg: &TrainConfig, seed: u64) -> Result<(Head, LossTrace)> {
    let registry = head.registry();
    let mut labels = Vec::with_capacity(base_data.len());
    for r in base_data {
        let idx = registry.index_of(&r.label)?;
        if registry.entry(idx).kind == ClassKind::Novel {
            return Err(Error::Invalid(format!("novel class `{}` in base training data", r.label)));
        }
        labels.push(idx);
    }
    for r in base_data {
        r.validate(head.config().d_in)?;
    }
    let records: Vec<&FeatureRecord> = base_data.iter().collect();
    let steps = cfg
        .steps
        .ok_or_else(|| Error::Config("base training needs an explicit step budget".into()))?;
    let batches = uniform_batch_iter(records.len(), cfg.batch_size, util::derive_seed(seed, "base-train", 0))?;
    run_steps(head, &records, &labels, cfg, steps, batches)
}

/// Second phase on an episode. Frozen parameters stay bit-identical.
pub fn finetune(head: &Head, episode: &Episode, cfg: &TrainConfig, seed: u64) -> Result<(Head, LossTrace)> {
    let registry = head.registry();
    let records: Vec<&FeatureRecord> = episode.base.iter().chain(&episode.novel).collect();
    let labels = records
        .iter()
        .map(|r| registry.index_of(&r.label))
        .collect::<Result<Vec<_>>>()?;
    for r in &records {
        r.validate(head.config().d_in)?;
    }
    let steps = cfg.finetune_steps(episode.novel.len());
    let seed = util::derive_seed(seed, "finetune", episode.k as u64);
    match cfg.sampling {
        Sampling::Balanced => {
            let batches = balanced_batch_iter(episode, cfg.batch_size, seed)?;
            run_steps(head, &records, &labels, cfg, steps, batches)
        }
        Sampling::Uniform => {
            let batches = uniform_batch_iter(records.len(), cfg.batch_size, seed)?;
            run_steps(head, &records, &labels, cfg, steps, batches)
        }
    }
}
