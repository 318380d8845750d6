//! The two-phase training procedure: QST statistics, basis selection, the
//! dataset split, base training, meta-learner training, evaluation and
//! feature-distribution diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{qst_label, qst_order_key, Dataset};
use crate::jpeg::{classify_qst, Qst, QstClass};
use crate::model::{images_to_tensor, param_group, ArchConfig, ParamGroup, Route, Tap, TinyNet};
use crate::nn::{Adam, AdamConfig, Mode, Module, Need, NnError, SgdConfig, SgdNesterov, Tensor};
use crate::qabn::{basis_loss, BasisError, QstBasisSet};
use crate::qac::{qac, weighted_ce_loss_over, QacConfig, Reduction};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("base split is empty")]
    EmptyBaseSplit,
    #[error("meta split is empty")]
    EmptyMetaSplit,
    #[error("need {needed} distinct QSTs, found {found}")]
    InsufficientDistinctQsts { needed: usize, found: usize },
    #[error("group {label} has {count} samples, need at least {needed}")]
    InsufficientSamples { label: String, count: usize, needed: usize },
    #[error("training needs images of one size")]
    NonUniformImages,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisStrategy {
    #[default]
    Spread,
    TopFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QamInit {
    /// Fresh random weights.
    #[default]
    Fresh,
    /// Copy convolution, classifier and BN state from a trained baseline.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Base learning rate.
    pub alpha: f64,
    /// Inner-loop learning rate.
    pub beta: f64,
    /// Meta learning rate.
    pub gamma: f64,
    /// Base (and baseline) epochs.
    pub ite1: usize,
    /// Meta epochs.
    pub ite2: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub dampening: f64,
    /// Fractions of `ite1` after which the learning rate is multiplied by
    /// `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    /// Number of basis QSTs.
    pub m: usize,
    pub strategy: BasisStrategy,
    pub qac: QacConfig,
    pub reduction: Reduction,
    pub second_order: bool,
    /// Meta steps per epoch; defaults to one pass over the meta split.
    pub meta_steps_per_epoch: Option<usize>,
    pub init: QamInit,
    pub arch: ArchOverrides,
}

/// Width knobs of the reference network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchOverrides {
    pub width1: usize,
    pub width2: usize,
    pub meta_hidden: usize,
}

impl Default for ArchOverrides {
    fn default() -> Self {
        let a = ArchConfig::baseline(1);
        Self {
            width1: a.width1,
            width2: a.width2,
            meta_hidden: a.meta_hidden,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.001,
            gamma: 0.004,
            ite1: 40,
            ite2: 30,
            batch: 128,
            weight_decay: 5e-4,
            momentum: 0.9,
            dampening: 0.0,
            milestones: vec![0.3, 0.6, 0.8],
            lr_decay: 0.2,
            seed: 0,
            m: 4,
            strategy: BasisStrategy::Spread,
            qac: QacConfig::default(),
            reduction: Reduction::Mean,
            second_order: false,
            meta_steps_per_epoch: None,
            init: QamInit::Fresh,
            arch: ArchOverrides::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.gamma > 0.0) {
            return bad("alpha and gamma must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if self.batch == 0 || self.m == 0 {
            return bad("batch and m must be at least 1");
        }
        if !(self.qac.normalizer > 0.0) {
            return bad("QAC normalizer must be positive");
        }
        if self.milestones.iter().any(|f| !(0.0..=1.0).contains(f)) || !(self.lr_decay > 0.0) {
            return bad("milestones must lie in [0, 1] and lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.dampening) || self.weight_decay < 0.0 {
            return bad("momentum, dampening or weight decay out of range");
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| epoch >= (f * self.ite1 as f64).round() as usize)
            .count();
        self.alpha * self.lr_decay.powi(passed as i32)
    }

    pub fn arch(&self, classes: usize, bases: Option<usize>) -> ArchConfig {
        ArchConfig {
            width1: self.arch.width1,
            width2: self.arch.width2,
            meta_hidden: self.arch.meta_hidden,
            bases,
            ..ArchConfig::baseline(classes)
        }
    }

    fn sgd(&self) -> SgdNesterov {
        SgdNesterov::new(SgdConfig {
            lr: self.alpha,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            dampening: self.dampening,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistEntry {
    pub qst: Qst,
    pub label: String,
    pub class: Option<u8>,
    pub count: usize,
}

/// QST counts, ordered by count (desc) then QF (asc).
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct QstHistogram {
    pub entries: Vec<HistEntry>,
}

impl QstHistogram {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }
}

pub fn collect_qst_stats(ds: &Dataset) -> QstHistogram {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for r in &ds.records {
        *counts.entry(r.qst_id).or_default() += 1;
    }
    let mut entries: Vec<HistEntry> = counts
        .into_iter()
        .map(|(id, count)| {
            let qst = ds.qsts[id as usize];
            let class = match classify_qst(&qst) {
                QstClass::DefaultQf(qf) => Some(qf),
                QstClass::NonDefault => None,
            };
            HistEntry {
                qst,
                label: qst_label(&qst, id as usize),
                class,
                count,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.class.unwrap_or(u8::MAX).cmp(&b.class.unwrap_or(u8::MAX)))
    });
    QstHistogram { entries }
}

fn qst_l1(a: &Qst, b: &Qst) -> u32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x as i32 - y as i32).unsigned_abs()).sum()
}

fn min_pairwise<T: Copy>(items: &[T], dist: impl Fn(T, T) -> u32) -> u32 {
    let mut best = u32::MAX;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            best = best.min(dist(items[i], items[j]));
        }
    }
    best
}

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..=n - (k - cur.len()) {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f)
}

/// Picks `m` basis QSTs.
///
/// `Spread` considers QSTs that are scaled default tables. It maximizes the
/// minimum pairwise QF distance, then the QF range, then the most even
/// spacing (smallest largest gap), then the minimum pairwise L1 distance
/// between the tables themselves, then prefers higher QFs. The
/// result is ordered by descending QF. `TopFrequency` takes the `m` most
/// frequent QSTs, ties toward higher QF, in histogram order.
pub fn select_bases(hist: &QstHistogram, m: usize, strategy: BasisStrategy) -> Result<QstBasisSet, TrainError> {
    match strategy {
        BasisStrategy::TopFrequency => {
            if hist.entries.len() < m {
                return Err(TrainError::InsufficientDistinctQsts {
                    needed: m,
                    found: hist.entries.len(),
                });
            }
            let mut entries: Vec<&HistEntry> = hist.entries.iter().collect();
            entries.sort_by(|a, b| b.count.cmp(&a.count).then(b.class.cmp(&a.class)));
            Ok(QstBasisSet::new(entries[..m].iter().map(|e| e.qst).collect())?)
        }
        BasisStrategy::Spread => {
            let mut defaults: Vec<(u8, Qst)> = hist
                .entries
                .iter()
                .filter_map(|e| e.class.map(|qf| (qf, e.qst)))
                .collect();
            if defaults.len() < m || m == 0 {
                return Err(TrainError::InsufficientDistinctQsts {
                    needed: m,
                    found: defaults.len(),
                });
            }
            defaults.sort_by(|a, b| b.0.cmp(&a.0));
            type Key = (u32, u32, std::cmp::Reverse<u32>, u32, Vec<u8>);
            let mut best: Option<(Key, Vec<usize>)> = None;
            combinations(defaults.len(), m, &mut |idx| {
                let qfs: Vec<u8> = idx.iter().map(|&i| defaults[i].0).collect();
                let qsts: Vec<&Qst> = idx.iter().map(|&i| &defaults[i].1).collect();
                let min_qf = if m == 1 {
                    0
                } else {
                    min_pairwise(&qfs, |a, b| (a as i32 - b as i32).unsigned_abs())
                };
                let range = (qfs[0] - qfs[m - 1]) as u32;
                let max_gap = qfs.windows(2).map(|w| (w[0] - w[1]) as u32).max().unwrap_or(0);
                let min_l1 = if m == 1 { 0 } else { min_pairwise(&qsts, qst_l1) };
                let key = (min_qf, range, std::cmp::Reverse(max_gap), min_l1, qfs);
                if best.as_ref().is_none_or(|(k, _)| key > *k) {
                    best = Some((key, idx.to_vec()));
                }
            });
            let (_, idx) = best.expect("at least one combination");
            Ok(QstBasisSet::new(idx.iter().map(|&i| defaults[i].1).collect())?)
        }
    }
}

/// Record indices routed by exact QST match against the basis set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct DatasetSplit {
    pub base: Vec<usize>,
    pub base_index: Vec<usize>,
    pub meta: Vec<usize>,
}

pub fn split_dataset(ds: &Dataset, bases: &QstBasisSet) -> DatasetSplit {
    let route: Vec<Option<usize>> = ds.qsts.iter().map(|q| bases.index_of(q)).collect();
    let mut split = DatasetSplit::default();
    for (i, r) in ds.records.iter().enumerate() {
        match route[r.qst_id as usize] {
            Some(b) => {
                split.base.push(i);
                split.base_index.push(b);
            }
            None => split.meta.push(i),
        }
    }
    split
}

/// Per-epoch training record, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub loss: f64,
    pub l_inner: Option<f64>,
    pub l_out: Option<f64>,
    pub l_basis: Option<f64>,
    /// Running training accuracy per QST label.
    pub accuracy: BTreeMap<String, f64>,
    pub seconds: f64,
}

/// CSV with one accuracy column per QST in `labels` (blank when a QST was
/// not seen in that epoch).
pub fn metrics_csv(rows: &[EpochMetrics], labels: &[String]) -> String {
    let mut out = String::from("epoch,phase,lr,loss,l_inner,l_out,l_basis");
    for l in labels {
        write!(out, ",acc_{l}").unwrap();
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.phase,
            r.lr,
            r.loss,
            opt(r.l_inner),
            opt(r.l_out),
            opt(r.l_basis)
        )
        .unwrap();
        for l in labels {
            write!(out, ",{}", opt(r.accuracy.get(l).copied())).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Dataset view with precomputed per-QST weights and labels.
pub struct Batcher<'a> {
    pub ds: &'a Dataset,
    pub height: usize,
    pub width: usize,
    weights: Vec<f64>,
    labels: Vec<String>,
}

impl<'a> Batcher<'a> {
    pub fn new(ds: &'a Dataset, qac_cfg: &QacConfig) -> Result<Self, TrainError> {
        let (height, width) = ds.uniform_size().ok_or(TrainError::NonUniformImages)?;
        Ok(Self {
            ds,
            height,
            width,
            weights: ds.qsts.iter().map(|q| qac(q, qac_cfg)).collect(),
            labels: ds.qsts.iter().enumerate().map(|(i, q)| qst_label(q, i)).collect(),
        })
    }

    pub fn images(&self, idx: &[usize]) -> Tensor {
        images_to_tensor(
            idx.iter().map(|&i| self.ds.records[i].pixels.as_slice()),
            self.height,
            self.width,
        )
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.ds.records[i].label as usize).collect()
    }

    pub fn weights(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.weights[self.ds.records[i].qst_id as usize]).collect()
    }

    pub fn qsts(&self, idx: &[usize]) -> Vec<Qst> {
        idx.iter().map(|&i| *self.ds.qst(&self.ds.records[i])).collect()
    }

    pub fn qst_label_of(&self, i: usize) -> &str {
        &self.labels[self.ds.records[i].qst_id as usize]
    }

    /// Labels of every dictionary entry, best quality first.
    pub fn ordered_labels(&self) -> Vec<String> {
        let mut ids: Vec<usize> = (0..self.ds.qsts.len()).collect();
        ids.sort_by_key(|&i| (qst_order_key(&self.ds.qsts[i]), i));
        ids.into_iter().map(|i| self.labels[i].clone()).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Default)]
struct AccuracyTally(BTreeMap<String, (usize, usize)>);

impl AccuracyTally {
    fn add(&mut self, b: &Batcher, idx: &[usize], logits: &Tensor) {
        let k = logits.shape()[1];
        for (row, &i) in logits.data().chunks_exact(k).zip(idx) {
            let e = self.0.entry(b.qst_label_of(i).to_string()).or_default();
            e.0 += usize::from(argmax(row) == b.ds.records[i].label as usize);
            e.1 += 1;
        }
    }

    fn finish(self) -> BTreeMap<String, f64> {
        self.0.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect()
    }
}

/// Minibatch SGD over `indices`; `group` maps each record to a route, and
/// each batch is evaluated group by group with one shared normalization.
#[allow(clippy::too_many_arguments)]
fn sgd_epochs(
    net: &mut TinyNet,
    b: &Batcher,
    indices: &[usize],
    group: &dyn Fn(usize) -> Route,
    trainable: &dyn Fn(&str) -> bool,
    cfg: &TrainConfig,
    phase: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochMetrics>, TrainError> {
    let mut sgd = cfg.sgd();
    let mut order = indices.to_vec();
    let mut metrics = Vec::with_capacity(cfg.ite1);
    for epoch in 0..cfg.ite1 {
        let start = Instant::now();
        sgd.cfg.lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut tally = AccuracyTally::default();
        for chunk in order.chunks(cfg.batch) {
            let weights = b.weights(chunk);
            let divisor = match cfg.reduction {
                Reduction::Mean => weights.iter().sum(),
                Reduction::Sum => 1.0,
            };
            let mut groups: BTreeMap<RouteKey, Vec<usize>> = BTreeMap::new();
            for &i in chunk {
                groups.entry(RouteKey::of(&group(i))).or_default().push(i);
            }
            net.zero_grad();
            let mut batch_loss = 0.0;
            for (key, idx) in &groups {
                let logits = net.forward(&b.images(idx), &key.route(), Mode::Train)?;
                let (loss, dl) = weighted_ce_loss_over(&logits, &b.labels(idx), &b.weights(idx), divisor)?;
                net.backward(&dl, Need { params: true, input: false })?;
                batch_loss += loss;
                tally.add(b, idx, &logits);
            }
            sgd.step_module(net, &|n| trainable(n))?;
            loss_sum += batch_loss;
            batches += 1;
        }
        let m = EpochMetrics {
            epoch,
            phase: phase.to_string(),
            lr: sgd.cfg.lr,
            loss: loss_sum / batches.max(1) as f64,
            l_inner: None,
            l_out: None,
            l_basis: None,
            accuracy: tally.finish(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{phase} epoch {epoch}: loss {:.4} ({:.1}s)", m.loss, m.seconds);
        metrics.push(m);
    }
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RouteKey {
    Plain,
    Base(usize),
}

impl RouteKey {
    fn of(r: &Route) -> Self {
        match r {
            Route::Base(i) => RouteKey::Base(*i),
            _ => RouteKey::Plain,
        }
    }

    fn route(self) -> Route {
        match self {
            RouteKey::Plain => Route::Plain,
            RouteKey::Base(i) => Route::Base(i),
        }
    }
}

/// Trains a plain-BN model on every record.
pub fn base_train_baseline(
    net: &mut TinyNet,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochMetrics>, TrainError> {
    let b = Batcher::new(ds, &cfg.qac)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    sgd_epochs(
        net,
        &b,
        &all,
        &|_| Route::Plain,
        &|n| matches!(param_group(n), ParamGroup::Rem | ParamGroup::Bn),
        cfg,
        "baseline",
        rng,
    )
}

/// Base training: SGD on the base split only, each sample normalized by the
/// BN base of its QST; the meta-learner is not touched.
pub fn base_train(
    net: &mut TinyNet,
    ds: &Dataset,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochMetrics>, TrainError> {
    if split.base.is_empty() {
        return Err(TrainError::EmptyBaseSplit);
    }
    let b = Batcher::new(ds, &cfg.qac)?;
    let route_of: BTreeMap<usize, usize> = split.base.iter().copied().zip(split.base_index.iter().copied()).collect();
    sgd_epochs(
        net,
        &b,
        &split.base,
        &|i| Route::Base(route_of[&i]),
        &|n| matches!(param_group(n), ParamGroup::Rem | ParamGroup::Bnb),
        cfg,
        "base",
        rng,
    )
}

/// Loss and flat meta-learner gradient for one batch on the meta path.
fn meta_batch_grad(
    net: &mut TinyNet,
    b: &Batcher,
    idx: &[usize],
    reduction: Reduction,
    tally: Option<&mut AccuracyTally>,
) -> Result<(f64, Vec<f64>), TrainError> {
    let qsts = b.qsts(idx);
    let mut uniq: Vec<Qst> = qsts.clone();
    uniq.sort();
    uniq.dedup();
    let row_of: Vec<usize> = qsts.iter().map(|q| uniq.binary_search(q).expect("present")).collect();
    let meta = net.meta.as_mut().ok_or_else(|| NnError::ModeError("model has no meta-learner".into()))?;
    meta.zero_grad();
    let fu = meta.forward(&uniq)?;
    let m = meta.bases();
    let f: Vec<f64> = row_of.iter().flat_map(|&r| fu.data()[r * m..(r + 1) * m].to_vec()).collect();
    let logits = net.forward(&b.images(idx), &Route::Meta(f), Mode::Eval)?;
    let weights = b.weights(idx);
    let divisor = match reduction {
        Reduction::Mean => weights.iter().sum(),
        Reduction::Sum => 1.0,
    };
    let (loss, dl) = weighted_ce_loss_over(&logits, &b.labels(idx), &weights, divisor)?;
    if let Some(t) = tally {
        t.add(b, idx, &logits);
    }
    let out = net.backward(&dl, Need { params: false, input: false })?;
    let df = out.mixing.expect("meta route yields mixing gradients");
    let mut dfu = vec![0.0; uniq.len() * m];
    for (n, &r) in row_of.iter().enumerate() {
        for j in 0..m {
            dfu[r * m + j] += df.data()[n * m + j];
        }
    }
    let meta = net.meta.as_mut().expect("checked above");
    meta.backward(&Tensor::new(&[uniq.len(), m], dfu)?)?;
    Ok((loss, meta.flat_grads()))
}

fn basis_grad(net: &mut TinyNet, basis: &QstBasisSet) -> Result<(f64, Vec<f64>), TrainError> {
    let meta = net.meta.as_mut().ok_or_else(|| NnError::ModeError("model has no meta-learner".into()))?;
    meta.zero_grad();
    let f = meta.forward(basis.as_slice())?;
    let (loss, df) = basis_loss(&f);
    meta.backward(&df)?;
    Ok((loss, meta.flat_grads()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetaStepLosses {
    pub inner: f64,
    pub out: f64,
    pub basis: f64,
}

fn set_meta(net: &mut TinyNet, theta: &[f64]) -> Result<(), TrainError> {
    net.meta.as_mut().expect("checked by caller").set_flat_params(theta)?;
    Ok(())
}

/// Meta-learner gradient of `L_inner + L_out + L_basis` at the current
/// parameters, for an inner batch (all on one basis QST) and an outer batch
/// from the meta split. Parameters are restored before returning.
pub fn meta_gradient(
    net: &mut TinyNet,
    ds: &Dataset,
    basis: &QstBasisSet,
    inner: &[usize],
    outer: &[usize],
    cfg: &TrainConfig,
) -> Result<(MetaStepLosses, Vec<f64>), TrainError> {
    meta_gradient_impl(net, &Batcher::new(ds, &cfg.qac)?, basis, inner, outer, cfg, None)
}

/// One Adam update of the meta-learner. Backbone and BN bases stay frozen.
pub fn meta_train_step(
    net: &mut TinyNet,
    ds: &Dataset,
    basis: &QstBasisSet,
    inner: &[usize],
    outer: &[usize],
    cfg: &TrainConfig,
    adam: &mut Adam,
) -> Result<MetaStepLosses, TrainError> {
    meta_step_impl(net, &Batcher::new(ds, &cfg.qac)?, basis, inner, outer, cfg, adam, None)
}

#[allow(clippy::too_many_arguments)]
fn meta_step_impl(
    net: &mut TinyNet,
    b: &Batcher,
    basis: &QstBasisSet,
    inner: &[usize],
    outer: &[usize],
    cfg: &TrainConfig,
    adam: &mut Adam,
    tally: Option<&mut AccuracyTally>,
) -> Result<MetaStepLosses, TrainError> {
    let (losses, grad) = meta_gradient_impl(net, b, basis, inner, outer, cfg, tally)?;
    let meta = net.meta.as_mut().expect("checked in gradient");
    let mut theta = meta.flat_params();
    adam.step_with("meta", &mut theta, &grad)?;
    meta.set_flat_params(&theta)?;
    Ok(losses)
}

fn meta_gradient_impl(
    net: &mut TinyNet,
    b: &Batcher,
    basis: &QstBasisSet,
    inner: &[usize],
    outer: &[usize],
    cfg: &TrainConfig,
    mut tally: Option<&mut AccuracyTally>,
) -> Result<(MetaStepLosses, Vec<f64>), TrainError> {
    if inner.is_empty() {
        return Err(TrainError::EmptyBaseSplit);
    }
    if outer.is_empty() {
        return Err(TrainError::EmptyMetaSplit);
    }
    let theta = net
        .meta
        .as_mut()
        .ok_or_else(|| NnError::ModeError("model has no meta-learner".into()))?
        .flat_params();
    let (l_inner, g_inner) = meta_batch_grad(net, b, inner, cfg.reduction, tally.as_deref_mut())?;
    let theta_inner: Vec<f64> = theta.iter().zip(&g_inner).map(|(t, g)| t - cfg.beta * g).collect();
    set_meta(net, &theta_inner)?;
    let (l_out, mut g_out) = meta_batch_grad(net, b, outer, cfg.reduction, tally)?;
    if cfg.second_order && cfg.beta > 0.0 {
        // (I - beta H_inner) g_out, with H_inner v from central differences
        // of the inner gradient along v.
        let norm = g_out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let eps = 1e-4 / norm;
            let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&g_out).map(|(t, v)| t + sign * eps * v).collect() };
            set_meta(net, &shifted(1.0))?;
            let (_, gp) = meta_batch_grad(net, b, inner, cfg.reduction, None)?;
            set_meta(net, &shifted(-1.0))?;
            let (_, gm) = meta_batch_grad(net, b, inner, cfg.reduction, None)?;
            for ((g, p), m) in g_out.iter_mut().zip(&gp).zip(&gm) {
                *g -= cfg.beta * (p - m) / (2.0 * eps);
            }
        }
    }
    set_meta(net, &theta)?;
    let (l_basis, g_basis) = basis_grad(net, basis)?;
    let total = g_inner.iter().zip(&g_out).zip(&g_basis).map(|((a, b), c)| a + b + c).collect();
    Ok((
        MetaStepLosses {
            inner: l_inner,
            out: l_out,
            basis: l_basis,
        },
        total,
    ))
}

/// Cycles through a shuffled index list, reshuffling after each pass.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut c = Self { items, pos: 0 };
        c.items.shuffle(rng);
        c
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = n.min(self.items.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.items.len() {
                self.items.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Meta-learner training. Inner batches cycle round-robin over the bases.
pub fn meta_train(
    net: &mut TinyNet,
    ds: &Dataset,
    split: &DatasetSplit,
    basis: &QstBasisSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochMetrics>, TrainError> {
    if split.base.is_empty() {
        return Err(TrainError::EmptyBaseSplit);
    }
    if split.meta.is_empty() {
        return Err(TrainError::EmptyMetaSplit);
    }
    let b = Batcher::new(ds, &cfg.qac)?;
    let mut per_base: Vec<Vec<usize>> = vec![Vec::new(); basis.len()];
    for (&i, &k) in split.base.iter().zip(&split.base_index) {
        per_base[k].push(i);
    }
    let mut base_cyclers: Vec<Option<Cycler>> = per_base
        .into_iter()
        .map(|v| (!v.is_empty()).then(|| Cycler::new(v, rng)))
        .collect();
    let mut meta_cycler = Cycler::new(split.meta.clone(), rng);
    let steps = cfg
        .meta_steps_per_epoch
        .unwrap_or_else(|| split.meta.len().div_ceil(cfg.batch))
        .max(1);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.gamma,
        ..AdamConfig::default()
    });
    let mut next_base = 0usize;
    let mut metrics = Vec::with_capacity(cfg.ite2);
    for epoch in 0..cfg.ite2 {
        let start = Instant::now();
        let mut sums = [0.0; 3];
        let mut tally = AccuracyTally::default();
        for _ in 0..steps {
            let k = (0..basis.len())
                .map(|o| (next_base + o) % basis.len())
                .find(|&k| base_cyclers[k].is_some())
                .expect("base split is non-empty");
            next_base = k + 1;
            let inner = base_cyclers[k].as_mut().expect("non-empty").take(cfg.batch, rng);
            let outer = meta_cycler.take(cfg.batch, rng);
            let l = meta_step_impl(net, &b, basis, &inner, &outer, cfg, &mut adam, Some(&mut tally))?;
            sums[0] += l.inner;
            sums[1] += l.out;
            sums[2] += l.basis;
        }
        let avg = sums.map(|s| s / steps as f64);
        let m = EpochMetrics {
            epoch,
            phase: "meta".into(),
            lr: cfg.gamma,
            loss: avg.iter().sum(),
            l_inner: Some(avg[0]),
            l_out: Some(avg[1]),
            l_basis: Some(avg[2]),
            accuracy: tally.finish(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "meta epoch {epoch}: inner {:.4} out {:.4} basis {:.4} ({:.1}s)",
            avg[0],
            avg[1],
            avg[2],
            m.seconds
        );
        metrics.push(m);
    }
    Ok(metrics)
}

/// Everything a full QAM run produces.
#[derive(Debug, Clone)]
pub struct QamRun {
    pub model: TinyNet,
    pub histogram: QstHistogram,
    pub basis: QstBasisSet,
    pub split: DatasetSplit,
    pub metrics: Vec<EpochMetrics>,
}

/// Statistics, basis selection, split, base training and meta training.
/// With [`QamInit::Baseline`] a `baseline` model must be given.
pub fn train_qam(ds: &Dataset, cfg: &TrainConfig, baseline: Option<&TinyNet>) -> Result<QamRun, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let histogram = collect_qst_stats(ds);
    let basis = select_bases(&histogram, cfg.m, cfg.strategy)?;
    let split = split_dataset(ds, &basis);
    log::info!(
        "bases {:?}; base split {} / meta split {}",
        basis.as_slice(),
        split.base.len(),
        split.meta.len()
    );
    let mut model = match (cfg.init, baseline) {
        (QamInit::Fresh, _) => TinyNet::new(cfg.arch(ds.classes as usize, Some(cfg.m)), &mut rng),
        (QamInit::Baseline, Some(b)) => TinyNet::qam_from_baseline(b, cfg.m, &mut rng)?,
        (QamInit::Baseline, None) => {
            return Err(TrainError::BadConfig("baseline initialization needs a baseline model".into()))
        }
    };
    let mut metrics = base_train(&mut model, ds, &split, cfg, &mut rng)?;
    if cfg.ite2 > 0 {
        metrics.extend(meta_train(&mut model, ds, &split, &basis, cfg, &mut rng)?);
    }
    Ok(QamRun {
        model,
        histogram,
        basis,
        split,
        metrics,
    })
}

pub struct BaselineRun {
    pub model: TinyNet,
    pub metrics: Vec<EpochMetrics>,
}

pub fn train_baseline(ds: &Dataset, cfg: &TrainConfig) -> Result<BaselineRun, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TinyNet::new(cfg.arch(ds.classes as usize, None), &mut rng);
    let metrics = base_train_baseline(&mut model, ds, cfg, &mut rng)?;
    Ok(BaselineRun { model, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub label: String,
    pub qst: Qst,
    pub seen: bool,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Per-QST accuracy; averages are means over QST buckets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub avg_seen: Option<f64>,
    pub avg_unseen: Option<f64>,
    pub avg: Option<f64>,
}

impl EvalReport {
    pub fn row(&self, label: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("qst,seen,count,correct,accuracy\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.label, r.seen, r.count, r.correct, r.accuracy).unwrap();
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(out, "avg_seen,,,,{}", opt(self.avg_seen)).unwrap();
        writeln!(out, "avg_unseen,,,,{}", opt(self.avg_unseen)).unwrap();
        writeln!(out, "avg,,,,{}", opt(self.avg)).unwrap();
        out
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

const EVAL_CHUNK: usize = 256;

/// Route for evaluating `idx` with `net`: plain BN, or each sample's own QST
/// through the meta-learner.
fn eval_route(net: &TinyNet, b: &Batcher, idx: &[usize]) -> Result<Route, TrainError> {
    Ok(if net.is_qam() {
        Route::Meta(net.mixing_for(&b.qsts(idx))?)
    } else {
        Route::Plain
    })
}

/// Eval-mode accuracy per QST. `seen` lists the QSTs present in training.
pub fn evaluate(net: &TinyNet, ds: &Dataset, seen: &[Qst]) -> Result<EvalReport, TrainError> {
    let b = Batcher::new(ds, &QacConfig::disabled())?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let preds: Result<Vec<Vec<usize>>, TrainError> = all
        .par_chunks(EVAL_CHUNK)
        .map(|idx| {
            let logits = net.infer(&b.images(idx), &eval_route(net, &b, idx)?)?;
            Ok(logits.data().chunks_exact(logits.shape()[1]).map(argmax).collect())
        })
        .collect();
    let mut counts: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
    for (r, p) in ds.records.iter().zip(preds?.into_iter().flatten()) {
        let e = counts.entry(r.qst_id).or_default();
        e.0 += usize::from(p == r.label as usize);
        e.1 += 1;
    }
    let mut rows: Vec<EvalRow> = counts
        .into_iter()
        .map(|(id, (correct, count))| {
            let qst = ds.qsts[id as usize];
            EvalRow {
                label: qst_label(&qst, id as usize),
                qst,
                seen: seen.contains(&qst),
                count,
                correct,
                accuracy: correct as f64 / count as f64,
            }
        })
        .collect();
    rows.sort_by_key(|r| qst_order_key(&r.qst));
    Ok(EvalReport {
        avg_seen: mean(rows.iter().filter(|r| r.seen).map(|r| r.accuracy)),
        avg_unseen: mean(rows.iter().filter(|r| !r.seen).map(|r| r.accuracy)),
        avg: mean(rows.iter().map(|r| r.accuracy)),
        rows,
    })
}

/// Symmetric (Jeffreys) KL divergence between two 1-D Gaussians.
pub fn gaussian_sym_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    let d2 = (mu1 - mu2) * (mu1 - mu2);
    0.5 * (var1 / var2 + var2 / var1) - 1.0 + 0.5 * d2 * (1.0 / var1 + 1.0 / var2)
}

/// Jensen-Shannon divergence (nats) between two 1-D Gaussians, by Simpson
/// quadrature over ±12 standard deviations.
pub fn gaussian_js(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    let (s1, s2) = (var1.sqrt(), var2.sqrt());
    let lo = (mu1 - 12.0 * s1).min(mu2 - 12.0 * s2);
    let hi = (mu1 + 12.0 * s1).max(mu2 + 12.0 * s2);
    let pdf = |x: f64, mu: f64, var: f64| (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let term = |p: f64, m: f64| if p > 0.0 { p * (p / m).ln() } else { 0.0 };
    let f = |x: f64| {
        let (p, q) = (pdf(x, mu1, var1), pdf(x, mu2, var2));
        let m = 0.5 * (p + q);
        if m <= 0.0 {
            0.0
        } else {
            0.5 * (term(p, m) + term(q, m))
        }
    };
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (s * h / 3.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub site: usize,
    pub tap: Tap,
    pub labels: Vec<String>,
    pub qsts: Vec<Qst>,
    /// Channel-averaged symmetric KL, symmetric with zero diagonal.
    pub sym_kl: Vec<Vec<f64>>,
    pub js: Vec<Vec<f64>>,
}

impl GapReport {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn sym_kl_between(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.sym_kl[self.index(a)?][self.index(b)?])
    }
}

/// Per-channel Gaussian fits of one QST group.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Distances between per-QST feature distributions at a normalization site.
/// Groups need at least 32 samples.
pub fn measure_distribution_gap(
    net: &TinyNet,
    ds: &Dataset,
    site: usize,
    tap: Tap,
) -> Result<GapReport, TrainError> {
    const MIN_GROUP: usize = 32;
    let b = Batcher::new(ds, &QacConfig::disabled())?;
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        groups.entry(r.qst_id).or_default().push(i);
    }
    let mut ids: Vec<u16> = groups.keys().copied().collect();
    ids.sort_by_key(|&id| (qst_order_key(&ds.qsts[id as usize]), id));
    let mut moments = Vec::with_capacity(ids.len());
    for &id in &ids {
        let idx = &groups[&id];
        if idx.len() < MIN_GROUP {
            return Err(TrainError::InsufficientSamples {
                label: qst_label(&ds.qsts[id as usize], id as usize),
                count: idx.len(),
                needed: MIN_GROUP,
            });
        }
        let partial: Result<Vec<(Vec<f64>, Vec<f64>, usize)>, TrainError> = idx
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let feats = net.features(&b.images(chunk), &eval_route(net, &b, chunk)?, site, tap)?;
                let s = feats.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut sum = vec![0.0; c];
                let mut sq = vec![0.0; c];
                for (k, plane) in feats.data().chunks_exact(hw).enumerate() {
                    sum[k % c] += plane.iter().sum::<f64>();
                    sq[k % c] += plane.iter().map(|v| v * v).sum::<f64>();
                }
                Ok((sum, sq, s[0] * hw))
            })
            .collect();
        let partial = partial?;
        let c = partial[0].0.len();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for (s, q, k) in partial {
            for ch in 0..c {
                sum[ch] += s[ch];
                sq[ch] += q[ch];
            }
            n += k;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(1e-12))
            .collect();
        moments.push(ChannelMoments { mean, var });
    }
    let g = ids.len();
    let mut sym_kl = vec![vec![0.0; g]; g];
    let mut js = vec![vec![0.0; g]; g];
    for i in 0..g {
        for j in i + 1..g {
            let (a, b) = (&moments[i], &moments[j]);
            let c = a.mean.len() as f64;
            let kl: f64 = (0..a.mean.len())
                .map(|k| gaussian_sym_kl(a.mean[k], a.var[k], b.mean[k], b.var[k]))
                .sum::<f64>()
                / c;
            let jsd: f64 = (0..a.mean.len())
                .map(|k| gaussian_js(a.mean[k], a.var[k], b.mean[k], b.var[k]))
                .sum::<f64>()
                / c;
            sym_kl[i][j] = kl;
            sym_kl[j][i] = kl;
            js[i][j] = jsd;
            js[j][i] = jsd;
        }
    }
    Ok(GapReport {
        site,
        tap,
        labels: ids.iter().map(|&id| qst_label(&ds.qsts[id as usize], id as usize)).collect(),
        qsts: ids.iter().map(|&id| ds.qsts[id as usize]).collect(),
        sym_kl,
        js,
    })
}
