//! The reference CNN: conv3×3(16)–norm–ReLU–pool → conv3×3(32)–norm–ReLU–pool
//! → global average pool → linear. Each "norm" is either a plain BN or a
//! QABN site, and all QABN sites share one meta-learner.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jpeg::Qst;
use crate::nn::{
    BatchNorm2d, Checkpoint, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2, Mode, Module, Need,
    NnError, Relu, Tensor,
};
use crate::qabn::{MetaInput, MetaLearner, MetaOutput, QabnLayer};

pub const SITES: usize = 2;
const CHECKPOINT_FORMAT: &str = "qsam-tinynet";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint is missing {0}")]
    MissingBlob(String),
    #[error("blob {name} has shape {found:?}, expected {expected:?}")]
    BlobShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub classes: usize,
    pub in_channels: usize,
    pub width1: usize,
    pub width2: usize,
    /// `None` for plain BN, `Some(M)` for QABN sites with `M` bases.
    pub bases: Option<usize>,
    pub meta_hidden: usize,
    pub meta_input: MetaInput,
    pub meta_output: MetaOutput,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ArchConfig {
    pub fn baseline(classes: usize) -> Self {
        Self {
            classes,
            in_channels: 3,
            width1: 16,
            width2: 32,
            bases: None,
            meta_hidden: MetaLearner::DEFAULT_HIDDEN,
            meta_input: MetaInput::default(),
            meta_output: MetaOutput::default(),
            bn_momentum: BatchNorm2d::DEFAULT_MOMENTUM,
            bn_eps: BatchNorm2d::DEFAULT_EPS,
        }
    }

    pub fn qam(classes: usize, bases: usize) -> Self {
        Self {
            bases: Some(bases),
            ..Self::baseline(classes)
        }
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Plain(BatchNorm2d),
    Qabn(QabnLayer),
}

impl Norm {
    fn forward(&mut self, x: &Tensor, route: &Route, mode: Mode) -> Result<Tensor, NnError> {
        match (self, route) {
            (Norm::Plain(bn), Route::Plain) => bn.forward(x, mode),
            (Norm::Qabn(q), Route::Base(i)) => q.forward_base(x, *i, mode),
            (Norm::Qabn(q), Route::Meta(f)) => q.forward_meta(x, f),
            (_, r) => Err(route_mismatch(r)),
        }
    }

    fn infer(&self, x: &Tensor, route: &Route) -> Result<Tensor, NnError> {
        match (self, route) {
            (Norm::Plain(bn), Route::Plain) => bn.infer(x),
            (Norm::Qabn(q), Route::Base(i)) => q.infer_base(x, *i),
            (Norm::Qabn(q), Route::Meta(f)) => q.infer_meta(x, f),
            (_, r) => Err(route_mismatch(r)),
        }
    }

    fn standardize(&self, x: &Tensor, route: &Route) -> Result<Tensor, NnError> {
        match (self, route) {
            (Norm::Plain(bn), Route::Plain) => bn.standardize(x),
            (Norm::Qabn(q), Route::Base(i)) => q.standardize_base(x, *i),
            (Norm::Qabn(q), Route::Meta(f)) => q.standardize_meta(x, f),
            (_, r) => Err(route_mismatch(r)),
        }
    }

    fn backward(&mut self, dy: &Tensor, params: bool) -> Result<(Tensor, Option<Tensor>), NnError> {
        match self {
            Norm::Plain(bn) => Ok((bn.backward(dy, params)?, None)),
            Norm::Qabn(q) => q.backward(dy, params),
        }
    }
}

fn route_mismatch(route: &Route) -> NnError {
    NnError::ModeError(format!("route {route:?} does not match the normalization layers"))
}

/// How samples pass through the normalization sites.
#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    /// Plain BN (baseline model).
    Plain,
    /// Only BN base `i` at every QABN site.
    Base(usize),
    /// Mixture of all bases: one `M`-vector, or `N×M` per sample.
    Meta(Vec<f64>),
}

/// Where to read features at a normalization site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Input,
    /// Standardized by the running statistics, before the affine map.
    Normalized,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Convolution and classifier weights.
    Rem,
    /// Plain BN affine parameters.
    Bn,
    /// QABN base affine parameters.
    Bnb,
    Meta,
    /// Running statistics (not trainable).
    Buffer,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.ends_with("running_mean") || name.ends_with("running_var") {
        ParamGroup::Buffer
    } else if name.starts_with("meta.") {
        ParamGroup::Meta
    } else if name.starts_with("qabn.") {
        ParamGroup::Bnb
    } else if name.starts_with("bn.") {
        ParamGroup::Bn
    } else {
        ParamGroup::Rem
    }
}

#[derive(Debug, Clone, Default)]
pub struct BackwardOutput {
    pub input: Option<Tensor>,
    /// `∂L/∂f` summed over sites, `[N, M]`, after a meta-route forward.
    pub mixing: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TinyNet {
    pub arch: ArchConfig,
    pub conv1: Conv2d,
    pub norms: [Norm; SITES],
    pub conv2: Conv2d,
    pub fc: Linear,
    pub meta: Option<MetaLearner>,
    relus: [Relu; SITES],
    pools: [MaxPool2; SITES],
    gap: GlobalAvgPool,
}

fn make_bn(channels: usize, arch: &ArchConfig) -> BatchNorm2d {
    let mut bn = BatchNorm2d::new(channels);
    bn.momentum = arch.bn_momentum;
    bn.eps = arch.bn_eps;
    bn
}

impl TinyNet {
    pub fn new<R: Rng>(arch: ArchConfig, rng: &mut R) -> Self {
        let conv1 = Conv2d::init(arch.in_channels, arch.width1, 3, 1, 1, rng);
        let conv2 = Conv2d::init(arch.width1, arch.width2, 3, 1, 1, rng);
        let fc = Linear::init(arch.width2, arch.classes, rng);
        let widths = [arch.width1, arch.width2];
        let (norms, meta) = match arch.bases {
            None => (widths.map(|c| Norm::Plain(make_bn(c, &arch))), None),
            Some(m) => {
                let mut site = 0;
                let norms = widths.map(|c| {
                    let q = QabnLayer::init_from_baseline(&make_bn(c, &arch), m, site);
                    site += 1;
                    Norm::Qabn(q)
                });
                (norms, Some(Self::make_meta(&arch, m, rng)))
            }
        };
        Self {
            arch,
            conv1,
            norms,
            conv2,
            fc,
            meta,
            relus: Default::default(),
            pools: Default::default(),
            gap: GlobalAvgPool::new(),
        }
    }

    fn make_meta<R: Rng>(arch: &ArchConfig, m: usize, rng: &mut R) -> MetaLearner {
        let mut meta = MetaLearner::new(m, arch.meta_hidden, rng);
        meta.input = arch.meta_input;
        meta.output = arch.meta_output;
        meta
    }

    /// A QAM model whose convolution and classifier weights are copied from a
    /// trained baseline and whose every BN base copies the matching baseline BN.
    pub fn qam_from_baseline<R: Rng>(baseline: &TinyNet, bases: usize, rng: &mut R) -> Result<Self, NnError> {
        let mut arch = baseline.arch;
        arch.bases = Some(bases);
        let mut site = 0;
        let norms = baseline.norms.clone().map(|n| {
            let out = match n {
                Norm::Plain(bn) => Ok(Norm::Qabn(QabnLayer::init_from_baseline(&bn, bases, site))),
                Norm::Qabn(_) => Err(NnError::ModeError("source model is not a baseline".into())),
            };
            site += 1;
            out
        });
        let [a, b] = norms;
        Ok(Self {
            arch,
            conv1: baseline.conv1.clone(),
            norms: [a?, b?],
            conv2: baseline.conv2.clone(),
            fc: baseline.fc.clone(),
            meta: Some(Self::make_meta(&arch, bases, rng)),
            relus: Default::default(),
            pools: Default::default(),
            gap: GlobalAvgPool::new(),
        })
    }

    pub fn is_qam(&self) -> bool {
        self.arch.bases.is_some()
    }

    pub fn bases(&self) -> Option<usize> {
        self.arch.bases
    }

    /// Mixing vectors for each sample's QST, `N×M`, evaluating the
    /// meta-learner once per distinct QST.
    pub fn mixing_for(&self, qsts: &[Qst]) -> Result<Vec<f64>, NnError> {
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| NnError::ModeError("model has no meta-learner".into()))?;
        let mut memo: BTreeMap<Qst, Vec<f64>> = BTreeMap::new();
        let mut out = Vec::with_capacity(qsts.len() * meta.bases());
        for q in qsts {
            let f = memo.entry(*q).or_insert_with(|| meta.infer(q));
            out.extend_from_slice(f);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor, route: &Route, mode: Mode) -> Result<Tensor, NnError> {
        let h = self.conv1.forward(x)?;
        let h = self.norms[0].forward(&h, route, mode)?;
        let h = self.relus[0].forward(&h);
        let h = self.pools[0].forward(&h)?;
        let h = self.conv2.forward(&h)?;
        let h = self.norms[1].forward(&h, route, mode)?;
        let h = self.relus[1].forward(&h);
        let h = self.pools[1].forward(&h)?;
        let h = self.gap.forward(&h)?;
        self.fc.forward(&h)
    }

    /// Backward pass after [`TinyNet::forward`]. `need.params` accumulates
    /// gradients for convolution, classifier and (base-path) normalization
    /// parameters; `need.input` returns `∂L/∂x`.
    pub fn backward(&mut self, dlogits: &Tensor, need: Need) -> Result<BackwardOutput, NnError> {
        let d = self.fc.backward(dlogits, need.params)?;
        let d = self.gap.backward(&d)?;
        let d = self.pools[1].backward(&d)?;
        let d = self.relus[1].backward(&d)?;
        let (d, df2) = self.norms[1].backward(&d, need.params)?;
        let d = self.conv2.backward_with(&d, Need { params: need.params, input: true })?;
        let d = d.expect("input gradient requested");
        let d = self.pools[0].backward(&d)?;
        let d = self.relus[0].backward(&d)?;
        let (d, df1) = self.norms[0].backward(&d, need.params)?;
        let input = if need.params || need.input {
            self.conv1.backward_with(&d, need)?
        } else {
            None
        };
        let mixing = match (df1, df2) {
            (Some(a), Some(b)) => Some(crate::nn::add(&a, &b)?),
            _ => None,
        };
        Ok(BackwardOutput { input, mixing })
    }

    /// Logits without caching or statistic updates (eval semantics).
    pub fn infer(&self, x: &Tensor, route: &Route) -> Result<Tensor, NnError> {
        let h = self.conv1.infer(x)?;
        let h = self.norms[0].infer(&h, route)?;
        let h = MaxPool2::infer(&Relu::infer(&h))?;
        let h = self.conv2.infer(&h)?;
        let h = self.norms[1].infer(&h, route)?;
        let h = MaxPool2::infer(&Relu::infer(&h))?;
        self.fc.infer(&GlobalAvgPool::infer(&h)?)
    }

    /// Features entering or leaving normalization site `site` (eval semantics).
    pub fn features(&self, x: &Tensor, route: &Route, site: usize, tap: Tap) -> Result<Tensor, NnError> {
        if site >= SITES {
            return Err(NnError::IndexOutOfRange(format!("site {site} of {SITES}")));
        }
        let mut h = self.conv1.infer(x)?;
        for k in 0..=site {
            if k > 0 {
                h = MaxPool2::infer(&Relu::infer(&h))?;
                h = self.conv2.infer(&h)?;
            }
            if k == site && tap == Tap::Input {
                return Ok(h);
            }
            if k == site && tap == Tap::Normalized {
                return self.norms[k].standardize(&h, route);
            }
            h = self.norms[k].infer(&h, route)?;
        }
        Ok(h)
    }

    /// Names of every tensor, in visit order.
    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn checksum(&mut self, group: ParamGroup) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        self.visit_params(&mut |n, t| {
            if param_group(n) == group {
                h = (h ^ t.checksum()).wrapping_mul(0x0100_0000_01b3);
            }
        });
        h
    }

    /// All tensors as a checkpoint; `extra` is stored in the manifest.
    pub fn to_checkpoint(&mut self, extra: serde_json::Value) -> Checkpoint {
        let manifest = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "arch": self.arch,
            "extra": extra,
        });
        let mut blobs = Vec::new();
        self.visit_params(&mut |n, t| {
            let mut copy = Tensor::new(t.shape(), t.data().to_vec()).expect("same shape");
            copy.zero_grad();
            blobs.push((n.to_string(), copy));
        });
        Checkpoint {
            manifest: manifest.to_string(),
            blobs,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value), ModelError> {
        let manifest: serde_json::Value =
            serde_json::from_str(&ck.manifest).map_err(|e| ModelError::Manifest(e.to_string()))?;
        if manifest["format"] != CHECKPOINT_FORMAT {
            return Err(ModelError::Manifest(format!("unknown format {}", manifest["format"])));
        }
        let arch: ArchConfig = serde_json::from_value(manifest["arch"].clone())
            .map_err(|e| ModelError::Manifest(e.to_string()))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = TinyNet::new(arch, &mut rng);
        let mut failure = None;
        net.visit_params(&mut |n, t| {
            if failure.is_some() {
                return;
            }
            match ck.get(n) {
                None => failure = Some(ModelError::MissingBlob(n.to_string())),
                Some(src) if src.shape() != t.shape() => {
                    failure = Some(ModelError::BlobShape {
                        name: n.to_string(),
                        found: src.shape().to_vec(),
                        expected: t.shape().to_vec(),
                    })
                }
                Some(src) => t.data_mut().copy_from_slice(src.data()),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok((net, manifest["extra"].clone())),
        }
    }
}



impl Module for TinyNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_params(&mut |n, t| f(&format!("conv1.{n}"), t));
        self.conv2.visit_params(&mut |n, t| f(&format!("conv2.{n}"), t));
        self.fc.visit_params(&mut |n, t| f(&format!("fc.{n}"), t));
        for (k, norm) in self.norms.iter_mut().enumerate() {
            match norm {
                Norm::Plain(bn) => bn.visit_params(&mut |n, t| f(&format!("bn.{k}.{n}"), t)),
                Norm::Qabn(q) => q.visit_params(&mut |n, t| f(&format!("qabn.{k}.{n}"), t)),
            }
        }
        if let Some(meta) = self.meta.as_mut() {
            meta.visit_params(&mut |n, t| f(&format!("meta.{n}"), t));
        }
    }
}

/// A model bound to one route, so generic layer tooling (gradient checks)
/// can drive it.
pub struct Routed<'a> {
    pub net: &'a mut TinyNet,
    pub route: Route,
}

impl Module for Routed<'_> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.net.visit_params(f)
    }
}

impl Layer for Routed<'_> {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        self.net.forward(x, &self.route, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        Ok(self
            .net
            .backward(dy, Need::ALL)?
            .input
            .expect("input gradient requested"))
    }
}

/// Scale applied to 8-bit pixels before the first convolution.
pub const PIXEL_CENTER: f64 = 127.5;
pub const PIXEL_SCALE: f64 = 1.0 / 64.0;

/// Interleaved RGB images of one size → `[N, 3, H, W]`.
pub fn images_to_tensor<'a, I>(images: I, height: usize, width: usize) -> Tensor
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let plane = height * width;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        assert_eq!(img.len(), plane * 3, "image size mismatch");
        let start = data.len();
        data.resize(start + 3 * plane, 0.0);
        for (p, px) in img.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[start + c * plane + p] = (px[c] as f64 - PIXEL_CENTER) * PIXEL_SCALE;
            }
        }
        n += 1;
    }
    Tensor::new(&[n, 3, height, width], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::scale_default_table;
    use crate::nn::{finite_difference_check, read_checkpoint, write_checkpoint};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::collections::BTreeSet;

    fn input(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(&[n, 3, 8, 8], (0..n * 192).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    fn small(bases: Option<usize>) -> ArchConfig {
        ArchConfig {
            width1: 4,
            width2: 6,
            bases,
            meta_hidden: 8,
            ..ArchConfig::baseline(3)
        }
    }

    #[test]
    fn shapes_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = TinyNet::new(ArchConfig::qam(4, 2), &mut rng);
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let y = net.forward(&x, &Route::Base(1), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        let names = net.param_names();
        for n in ["conv1.weight", "conv2.weight", "fc.bias", "qabn.0.base.1.gamma", "qabn.1.base.0.running_var", "meta.fc2.weight"] {
            assert!(names.iter().any(|m| m == n), "{n} missing");
        }
        assert!(net.forward(&x, &Route::Plain, Mode::Train).is_err());
    }

    #[test]
    fn parameter_partition_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = TinyNet::new(ArchConfig::qam(4, 3), &mut rng);
        let mut trainable = BTreeSet::new();
        net.visit_params(&mut |n, t| {
            if t.requires_grad() {
                trainable.insert(n.to_string());
            }
        });
        let by = |g| trainable.iter().filter(|n| param_group(n) == g).cloned().collect::<BTreeSet<_>>();
        let (bnb, rem, meta) = (by(ParamGroup::Bnb), by(ParamGroup::Rem), by(ParamGroup::Meta));
        assert!(bnb.is_disjoint(&rem) && bnb.is_disjoint(&meta) && rem.is_disjoint(&meta));
        let union: BTreeSet<_> = bnb.union(&rem).chain(meta.iter()).cloned().collect();
        assert_eq!(union, trainable);
        assert_eq!(bnb.len(), 2 * 3 * 2);
        assert_eq!(meta.len(), 4);
        assert!(by(ParamGroup::Bn).is_empty());
    }

    #[test]
    fn gradient_check_plain_and_base() {
        for (arch, route) in [(small(None), Route::Plain), (small(Some(2)), Route::Base(1))] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut net = TinyNet::new(arch, &mut rng);
            let x = input(3, 4);
            let mut routed = Routed { net: &mut net, route };
            let r = finite_difference_check(&mut routed, &x, Mode::Train, 1e-4, 50, 5);
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn mixing_gradient_sums_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = TinyNet::new(small(Some(3)), &mut rng);
        if let Norm::Qabn(q) = &mut net.norms[0] {
            q.bases[1].gamma.data_mut().iter_mut().for_each(|v| *v = 1.5);
            q.bases[2].running_mean.data_mut().iter_mut().for_each(|v| *v = 0.3);
        }
        if let Norm::Qabn(q) = &mut net.norms[1] {
            q.bases[0].beta.data_mut().iter_mut().for_each(|v| *v = -0.2);
        }
        let x = input(2, 7);
        let f = vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1];
        let probe = Normal::new(0.0, 1.0).unwrap();
        let r: Vec<f64> = (0..6).map(|_| probe.sample(&mut rng)).collect();
        let loss = |net: &TinyNet, f: &[f64]| -> f64 {
            net.infer(&x, &Route::Meta(f.to_vec())).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        net.forward(&x, &Route::Meta(f.clone()), Mode::Eval).unwrap();
        let out = net
            .backward(&Tensor::new(&[2, 3], r.clone()).unwrap(), Need { params: false, input: false })
            .unwrap();
        let df = out.mixing.unwrap();
        assert!(out.input.is_none());
        for i in 0..f.len() {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp[i] += 1e-5;
            fm[i] -= 1e-5;
            let num = (loss(&net, &fp) - loss(&net, &fm)) / 2e-5;
            let rel = (num - df.data()[i]).abs() / num.abs().max(1e-4);
            assert!(rel < 1e-4, "{i}: {num} vs {}", df.data()[i]);
        }
    }

    #[test]
    fn infer_matches_eval_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = TinyNet::new(small(Some(2)), &mut rng);
        let x = input(4, 9);
        net.forward(&x, &Route::Base(0), Mode::Train).unwrap();
        let f = Route::Meta(vec![0.25, 0.75]);
        let a = net.forward(&x, &f, Mode::Eval).unwrap();
        let b = net.infer(&x, &f).unwrap();
        assert_eq!(a.data(), b.data());
        let feats = net.features(&x, &f, 1, Tap::Input).unwrap();
        assert_eq!(feats.shape(), &[4, 6, 4, 4]);
    }

    #[test]
    fn shared_meta_learner_moves_every_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = TinyNet::new(small(Some(2)), &mut rng);
        if let Norm::Qabn(q) = &mut net.norms[0] {
            q.bases[1].gamma.data_mut().fill(2.0);
        }
        if let Norm::Qabn(q) = &mut net.norms[1] {
            q.bases[1].beta.data_mut().fill(0.5);
        }
        let qst = scale_default_table(40).unwrap();
        let x = input(1, 11);
        let before = net.mixing_for(&[qst]).unwrap();
        let f0 = |net: &TinyNet, site| {
            net.features(&x, &Route::Meta(net.mixing_for(&[qst]).unwrap()), site, Tap::Output).unwrap()
        };
        let (s0, s1) = (f0(&net, 0), f0(&net, 1));
        net.meta.as_mut().unwrap().fc2.bias.data_mut()[1] += 1.0;
        let after = net.mixing_for(&[qst]).unwrap();
        assert!(after[1] > before[1]);
        assert_ne!(f0(&net, 0).data(), s0.data());
        assert_ne!(f0(&net, 1).data(), s1.data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = TinyNet::new(small(Some(2)), &mut rng);
        net.forward(&input(3, 13), &Route::Base(0), Mode::Train).unwrap();
        let ck = net.to_checkpoint(serde_json::json!({"note": 1}));
        let back = read_checkpoint(&write_checkpoint(&ck)).unwrap();
        let (mut net2, extra) = TinyNet::from_checkpoint(&back).unwrap();
        assert_eq!(extra["note"], 1);
        assert!(net2.to_checkpoint(extra).bit_eq(&ck));
        let x = input(2, 14);
        let f = Route::Meta(vec![0.5, 0.5]);
        assert_eq!(net.infer(&x, &f).unwrap().data(), net2.infer(&x, &f).unwrap().data());
    }

    #[test]
    fn qam_from_baseline_matches_on_any_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut base = TinyNet::new(small(None), &mut rng);
        base.forward(&input(4, 16), &Route::Plain, Mode::Train).unwrap();
        let qam = TinyNet::qam_from_baseline(&base, 3, &mut rng).unwrap();
        let x = input(2, 17);
        let a = base.infer(&x, &Route::Plain).unwrap();
        let b = qam.infer(&x, &Route::Meta(vec![0.1, 0.6, 0.3])).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_layout() {
        let img: Vec<u8> = vec![255, 0, 128, 0, 0, 0];
        let t = images_to_tensor([img.as_slice()], 1, 2);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data()[0], (255.0 - PIXEL_CENTER) * PIXEL_SCALE);
        assert_eq!(t.data()[2], (0.0 - PIXEL_CENTER) * PIXEL_SCALE);
        assert_eq!(t.data()[4], (128.0 - PIXEL_CENTER) * PIXEL_SCALE);
    }
}
