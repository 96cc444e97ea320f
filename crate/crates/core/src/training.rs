//! Loss, learning-rate schedule, Adam, content-level splits and the fit loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::CvReport;
use crate::network::{forward, forward_train, Mode, ModelConfig, ModelWeights, PredictionBundle, TrainPass};
use crate::patching::{extract_patches, PatchSet};
use crate::pointcloud::{normalize, LabeledSample};
use crate::seed;
use crate::tensor::{Gradients, Graph, Var};

const SHUFFLE_TAG: u64 = 0x5AFF1E;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the patch-wise term.
    pub alpha: f64,
    /// Weight of the global term.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidConfig("alpha + beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            eta_max: 0.001,
            eta_min: 0.0,
            t_max: 400,
            epochs: 400,
            batch_size: 4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t_max == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("t_max, epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine annealing; steps past `t_max` stay at `eta_min`.
pub fn cosine_lr(step: usize, cfg: &ScheduleConfig) -> f64 {
    let t = step.min(cfg.t_max) as f64 / cfg.t_max as f64;
    cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Differentiable batch loss on a graph.
///
/// `patch_scores` is `[C * K, 1]` cloud-major, `global` is `[C]` and `y`
/// holds one target per cloud. Both terms are averaged over the clouds.
pub fn loss(
    g: &mut Graph,
    patch_scores: Var,
    global: Var,
    y: &[f64],
    cfg: &LossConfig,
) -> Result<Var> {
    if y.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidConfig("targets must be >= 0".into()));
    }
    let c = y.len();
    if g.shape(global) != [c] {
        return Err(Error::shape(format!("global scores {:?} for {c} targets", g.shape(global))));
    }
    let rows = g.shape(patch_scores)[0];
    if !rows.is_multiple_of(c) {
        return Err(Error::shape(format!("{rows} patch scores for {c} clouds")));
    }
    let k = rows / c;
    let y_patch: Vec<f64> = y.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
    let yp = g.constant_from(&[rows, 1], y_patch)?;
    let yg = g.constant_from(&[c], y.to_vec())?;
    let dp = g.sub(patch_scores, yp)?;
    let sp = g.mul(dp, dp)?;
    let patch_term = g.mean(sp);
    let dg = g.sub(global, yg)?;
    let sg = g.mul(dg, dg)?;
    let global_term = g.mean(sg);
    let a = g.scale(patch_term, cfg.alpha);
    let b = g.scale(global_term, cfg.beta);
    g.add(a, b)
}

/// The loss value of a single prediction.
pub fn bundle_loss(bundle: &PredictionBundle, y: f64, cfg: &LossConfig) -> f64 {
    let k = bundle.patch_scores.len() as f64;
    let patch: f64 = bundle.patch_scores.iter().map(|s| (s - y).powi(2)).sum::<f64>() / k;
    cfg.alpha * patch + cfg.beta * (bundle.global_score - y).powi(2)
}

/// Adam with bias correction.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from `grads`.
    ///
    /// Updated values are rounded to single precision like all stored weights.
    pub fn step(&mut self, weights: &mut ModelWeights, grads: &Gradients, lr: f64) -> Result<()> {
        let mut all = Vec::new();
        for (name, t) in weights.params().iter() {
            if t.requires_grad() {
                let g = grads.param(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
                all.push((name.clone(), g));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in all {
            let t = weights.params_mut().get_mut(&name).expect("listed above");
            let n = t.len();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *p = (*p - upd) as f32 as f64;
            }
        }
        Ok(())
    }
}

/// Train and test sample indices for one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub fold_index: usize,
}

impl SplitPlan {
    /// Fails if any content id sits on both sides or an index is out of range.
    pub fn validate(&self, samples: &[LabeledSample]) -> Result<()> {
        let ids = |idx: &[usize]| -> Result<BTreeSet<&str>> {
            idx.iter()
                .map(|&i| {
                    samples
                        .get(i)
                        .map(|s| s.content_id.as_str())
                        .ok_or_else(|| Error::InvalidConfig(format!("sample index {i} out of range")))
                })
                .collect()
        };
        let train = ids(&self.train)?;
        let test = ids(&self.test)?;
        if let Some(c) = train.intersection(&test).next() {
            return Err(Error::LeakingSplit(c.to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum SplitScheme {
    LeaveOneContentOut,
    Fixed {
        train_contents: Vec<String>,
        test_contents: Vec<String>,
    },
}

pub fn make_splits(samples: &[LabeledSample], scheme: &SplitScheme) -> Result<Vec<SplitPlan>> {
    let contents: BTreeSet<&str> = samples.iter().map(|s| s.content_id.as_str()).collect();
    let side = |want: &BTreeSet<&str>| -> Vec<usize> {
        (0..samples.len())
            .filter(|&i| want.contains(samples[i].content_id.as_str()))
            .collect()
    };
    let plans = match scheme {
        SplitScheme::LeaveOneContentOut => {
            if contents.len() < 2 {
                return Err(Error::EmptyContent(format!("{} content(s) present", contents.len())));
            }
            contents
                .iter()
                .enumerate()
                .map(|(fold, held)| {
                    let test: BTreeSet<&str> = [*held].into();
                    let train: BTreeSet<&str> = contents.iter().copied().filter(|c| c != held).collect();
                    SplitPlan {
                        train: side(&train),
                        test: side(&test),
                        fold_index: fold,
                    }
                })
                .collect()
        }
        SplitScheme::Fixed {
            train_contents,
            test_contents,
        } => {
            let train: BTreeSet<&str> = train_contents.iter().map(String::as_str).collect();
            let test: BTreeSet<&str> = test_contents.iter().map(String::as_str).collect();
            if let Some(c) = train.intersection(&test).next() {
                return Err(Error::LeakingSplit(c.to_string()));
            }
            let plan = SplitPlan {
                train: side(&train),
                test: side(&test),
                fold_index: 0,
            };
            if plan.train.is_empty() || plan.test.is_empty() {
                return Err(Error::EmptyContent("fixed split leaves a side without samples".into()));
            }
            vec![plan]
        }
    };
    for p in &plans {
        p.validate(samples)?;
    }
    Ok(plans)
}

/// Min-max scaling of MOS labels fitted on a training fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosScaler {
    pub min: f64,
    pub max: f64,
}

impl MosScaler {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyPairs);
        }
        let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    fn span(&self) -> f64 {
        if self.max > self.min {
            self.max - self.min
        } else {
            1.0
        }
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.min) / self.span()
    }

    pub fn unscale(&self, s: f64) -> f64 {
        s * self.span() + self.min
    }
}

/// Normalizes every cloud and extracts its patches, in parallel.
///
/// With a cache directory, patch sets are read from and written to
/// `<dir>/<hash>.pstp`, keyed on the cloud contents and patch settings.
pub fn prepare_patches(
    samples: &[LabeledSample],
    config: &ModelConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<PatchSet>> {
    let pc = config.patch_config();
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    samples
        .par_iter()
        .map(|s| {
            let path = cache_dir.map(|d| d.join(cache_name(s, config)));
            if let Some(p) = &path {
                if p.exists() {
                    if let Ok(ps) = PatchSet::load(p) {
                        if ps.k() == pc.k && ps.np() == pc.np {
                            return Ok(ps);
                        }
                    }
                }
            }
            let ps = extract_patches(&normalize(&s.cloud), &pc)?;
            if let Some(p) = &path {
                ps.save(p)?;
            }
            Ok(ps)
        })
        .collect()
}

fn cache_name(s: &LabeledSample, config: &ModelConfig) -> PathBuf {
    let mut h = crc32fast::Hasher::new();
    for row in s.cloud.points() {
        for v in row {
            h.update(&v.to_le_bytes());
        }
    }
    h.update(&(config.k as u64).to_le_bytes());
    h.update(&(config.np as u64).to_le_bytes());
    h.update(&config.seed.to_le_bytes());
    PathBuf::from(format!("{:08x}_{}.pstp", h.finalize(), s.cloud.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={:.9e} loss={:.9e}", self.epoch, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    /// Set when a non-finite loss stopped training.
    pub diverged: bool,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// One line per epoch, prefixed by the seed.
    pub fn to_text(&self) -> String {
        let mut s = format!("seed={}\n", self.seed);
        for r in &self.records {
            s.push_str(&format!("{r}\n"));
        }
        if self.diverged {
            s.push_str("diverged: non-finite loss\n");
        }
        s
    }
}

pub struct FitOutput {
    pub weights: ModelWeights,
    pub log: TrainLog,
    pub scaler: MosScaler,
}

/// One optimization step on a minibatch; returns the pre-step loss.
pub fn train_step(
    weights: &mut ModelWeights,
    adam: &mut Adam,
    batch: &[&PatchSet],
    targets: &[f64],
    config: &ModelConfig,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<f64> {
    let TrainPass {
        mut graph,
        patch_scores,
        global,
        bn_stats,
        ..
    } = forward_train(batch, config, weights, config.seed)?;
    let l = loss(&mut graph, patch_scores, global, targets, loss_cfg)?;
    let value = graph.value(l)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = graph.backward(l)?;
    adam.step(weights, &grads, lr)?;
    TrainPass::fold_running_stats(&bn_stats, weights)?;
    Ok(value)
}

/// Trains from a fresh initialization on the split's training samples.
///
/// `on_epoch` sees every record with the weights after that epoch.
pub fn fit_patches(
    sets: &[PatchSet],
    labels: &[f64],
    train: &[usize],
    config: &ModelConfig,
    loss_cfg: &LossConfig,
    sched: &ScheduleConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelWeights) -> Result<()>,
) -> Result<FitOutput> {
    config.validate()?;
    loss_cfg.validate()?;
    sched.validate()?;
    if sets.len() != labels.len() {
        return Err(Error::LengthMismatch(sets.len(), labels.len()));
    }
    if train.is_empty() {
        return Err(Error::EmptyContent("training split is empty".into()));
    }
    if let Some(&i) = train.iter().find(|&&i| i >= sets.len()) {
        return Err(Error::InvalidConfig(format!("sample index {i} out of range")));
    }
    let scaler = MosScaler::fit(&train.iter().map(|&i| labels[i]).collect::<Vec<_>>())?;
    let mut weights = ModelWeights::init(config, seed)?;
    let mut adam = Adam::new();
    let mut log = TrainLog {
        seed,
        ..TrainLog::default()
    };
    let mut order = train.to_vec();
    'epochs: for epoch in 0..sched.epochs {
        let lr = cosine_lr(epoch, sched);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(seed::derive(seed, SHUFFLE_TAG), epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<&PatchSet> = chunk.iter().map(|&i| &sets[i]).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| scaler.scale(labels[i])).collect();
            let l = train_step(&mut weights, &mut adam, &batch, &y, config, loss_cfg, lr)?;
            if !l.is_finite() {
                log.diverged = true;
                log.records.push(EpochRecord { epoch, lr, loss: l });
                break 'epochs;
            }
            total += l * chunk.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: total / order.len() as f64,
        };
        log.records.push(rec);
        on_epoch(&rec, &weights)?;
    }
    Ok(FitOutput { weights, log, scaler })
}

/// Extracts patches and trains on `split.train`.
pub fn fit(
    samples: &[LabeledSample],
    config: &ModelConfig,
    loss_cfg: &LossConfig,
    sched: &ScheduleConfig,
    split: &SplitPlan,
    seed: u64,
) -> Result<FitOutput> {
    split.validate(samples)?;
    let sets = prepare_patches(samples, config, None)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    fit_patches(&sets, &labels, &split.train, config, loss_cfg, sched, seed, |_, _| Ok(()))
}

/// Eval-mode global scores mapped back to raw MOS units.
pub fn predict(
    sets: &[PatchSet],
    config: &ModelConfig,
    weights: &ModelWeights,
    scaler: &MosScaler,
) -> Result<Vec<f64>> {
    sets.iter()
        .map(|ps| Ok(scaler.unscale(forward(ps, config, weights, Mode::Eval)?.global_score)))
        .collect()
}

/// Trains one model per fold and pools the test predictions.
pub fn cross_validate(
    sets: &[PatchSet],
    labels: &[f64],
    plans: &[SplitPlan],
    config: &ModelConfig,
    loss_cfg: &LossConfig,
    sched: &ScheduleConfig,
    seed: u64,
) -> Result<CvReport> {
    let mut folds = Vec::with_capacity(plans.len());
    for plan in plans {
        let fit = fit_patches(sets, labels, &plan.train, config, loss_cfg, sched, seed, |_, _| Ok(()))?;
        let test: Vec<PatchSet> = plan.test.iter().map(|&i| sets[i].clone()).collect();
        let pred = predict(&test, config, &fit.weights, &fit.scaler)?;
        folds.push((plan.fold_index, pred.into_iter().zip(plan.test.iter().map(|&i| labels[i])).collect()));
    }
    CvReport::new(&folds)
}

/// The four component ablations of a base setup: no patch-wise loss term,
/// unit patch weights, structure branch only and texture branch only.
pub fn ablation_variants(config: &ModelConfig, loss_cfg: &LossConfig) -> Vec<(&'static str, ModelConfig, LossConfig)> {
    let with = |f: fn(&mut ModelConfig)| {
        let mut c = config.clone();
        f(&mut c);
        c
    };
    vec![
        ("no-patch-loss", config.clone(), LossConfig { alpha: 0.0, ..*loss_cfg }),
        ("no-lbe", with(|c| c.use_lbe_weights = false), *loss_cfg),
        ("no-tfe", with(|c| c.use_tfe = false), *loss_cfg),
        ("no-sfe", with(|c| c.use_sfe = false), *loss_cfg),
    ]
}
