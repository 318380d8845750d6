//! Quantization-aware batch normalization: parallel BN bases per site, mixed
//! by a QST-conditioned weight vector from one shared meta-learner.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jpeg::Qst;
use crate::nn::{BatchNorm2d, Linear, Mode, Module, NnError, Relu, Tensor};

pub const QST_FEATURES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaInput {
    /// Each step `s` becomes `1/s`.
    #[default]
    Reciprocal,
    /// Each step `s` becomes `s/255`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOutput {
    #[default]
    Softmax,
    /// Unnormalized mixing weights (ablation only).
    Linear,
}

/// Reciprocal encoding, channel 0 then channel 1, row-major.
pub fn qst_to_feature(q: &Qst) -> [f64; QST_FEATURES] {
    encode_qst(q, MetaInput::Reciprocal)
}

pub fn encode_qst(q: &Qst, input: MetaInput) -> [f64; QST_FEATURES] {
    let mut out = [0.0; QST_FEATURES];
    for (o, s) in out.iter_mut().zip(q.iter()) {
        *o = match input {
            MetaInput::Reciprocal => 1.0 / s as f64,
            MetaInput::Raw => s as f64 / 255.0,
        };
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BasisError {
    #[error("basis set is empty")]
    Empty,
    #[error("basis QSTs {0} and {1} are identical")]
    Duplicate(usize, usize),
}

/// Ordered, pairwise-distinct basis QSTs; position `i` is BN base `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QstBasisSet {
    bases: Vec<Qst>,
}

impl QstBasisSet {
    pub fn new(bases: Vec<Qst>) -> Result<Self, BasisError> {
        if bases.is_empty() {
            return Err(BasisError::Empty);
        }
        for i in 0..bases.len() {
            for j in i + 1..bases.len() {
                if bases[i] == bases[j] {
                    return Err(BasisError::Duplicate(i, j));
                }
            }
        }
        Ok(Self { bases })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Qst> {
        self.bases.get(i)
    }

    pub fn as_slice(&self) -> &[Qst] {
        &self.bases
    }

    pub fn index_of(&self, q: &Qst) -> Option<usize> {
        self.bases.iter().position(|b| b == q)
    }
}

#[derive(Debug, Clone)]
struct MetaCache {
    rows: usize,
    out: Vec<f64>,
}

/// MLP `128 → hidden → M` with ReLU and (by default) a softmax output.
#[derive(Debug, Clone)]
pub struct MetaLearner {
    pub fc1: Linear,
    pub fc2: Linear,
    pub input: MetaInput,
    pub output: MetaOutput,
    relu: Relu,
    cache: Option<MetaCache>,
}

impl MetaLearner {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new<R: Rng>(bases: usize, hidden: usize, rng: &mut R) -> Self {
        Self::from_layers(
            Linear::init(QST_FEATURES, hidden, rng),
            Linear::init(hidden, bases, rng),
        )
        .expect("consistent widths")
    }

    pub fn from_layers(fc1: Linear, fc2: Linear) -> Result<Self, NnError> {
        if fc1.inputs() != QST_FEATURES || fc2.inputs() != fc1.outputs() || fc2.outputs() == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "meta-learner widths {}→{}→{}→{}",
                fc1.inputs(),
                fc1.outputs(),
                fc2.inputs(),
                fc2.outputs()
            )));
        }
        Ok(Self {
            fc1,
            fc2,
            input: MetaInput::default(),
            output: MetaOutput::default(),
            relu: Relu::new(),
            cache: None,
        })
    }

    pub fn bases(&self) -> usize {
        self.fc2.outputs()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.outputs()
    }

    fn encode(&self, qsts: &[Qst]) -> Tensor {
        let data = qsts.iter().flat_map(|q| encode_qst(q, self.input)).collect();
        Tensor::new(&[qsts.len(), QST_FEATURES], data).expect("sized")
    }

    fn activate(&self, z: &mut [f64]) {
        if self.output == MetaOutput::Linear {
            return;
        }
        for row in z.chunks_exact_mut(self.bases()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
    }

    /// Mixing vectors for a batch of QSTs, `[len, M]`, cached for backward.
    pub fn forward(&mut self, qsts: &[Qst]) -> Result<Tensor, NnError> {
        let x = self.encode(qsts);
        let h = self.fc1.forward(&x)?;
        let h = self.relu.forward(&h);
        let mut z = self.fc2.forward(&h)?.into_data();
        self.activate(&mut z);
        self.cache = Some(MetaCache {
            rows: qsts.len(),
            out: z.clone(),
        });
        Tensor::new(&[qsts.len(), self.bases()], z)
    }

    pub fn infer_batch(&self, qsts: &[Qst]) -> Result<Tensor, NnError> {
        let x = self.encode(qsts);
        let h = Relu::infer(&self.fc1.infer(&x)?);
        let mut z = self.fc2.infer(&h)?.into_data();
        self.activate(&mut z);
        Tensor::new(&[qsts.len(), self.bases()], z)
    }

    /// The mixing vector for one QST.
    pub fn infer(&self, q: &Qst) -> Vec<f64> {
        self.infer_batch(std::slice::from_ref(q))
            .expect("fixed widths")
            .into_data()
    }

    /// Accumulates parameter gradients from `∂L/∂f`, shaped like the last
    /// forward output.
    pub fn backward(&mut self, df: &Tensor) -> Result<(), NnError> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| NnError::ModeError("meta-learner".into()))?;
        let m = self.bases();
        if df.shape() != [cache.rows, m] {
            return Err(NnError::ShapeMismatch("meta-learner upstream gradient".into()));
        }
        let mut dz = df.data().to_vec();
        if self.output == MetaOutput::Softmax {
            for (d, f) in dz.chunks_exact_mut(m).zip(cache.out.chunks_exact(m)) {
                let dot: f64 = d.iter().zip(f).map(|(a, b)| a * b).sum();
                for (dv, fv) in d.iter_mut().zip(f) {
                    *dv = fv * (*dv - dot);
                }
            }
        }
        let dz = Tensor::new(&[cache.rows, m], dz)?;
        let dh = self.fc2.backward(&dz, true)?;
        let dh = self.relu.backward(&dh)?;
        self.fc1.backward(&dh, true)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.fc1.weight.numel() + self.fc1.bias.numel() + self.fc2.weight.numel() + self.fc2.bias.numel()
    }

    /// Parameters flattened in visit order.
    pub fn flat_params(&mut self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::ShapeMismatch("flat meta-learner parameter length".into()));
        }
        let mut at = 0;
        self.visit_params(&mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        Ok(())
    }

    pub fn flat_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, t| out.extend_from_slice(t.grad().expect("param")));
        out
    }
}

impl Module for MetaLearner {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_params(&mut |n, t| f(&format!("fc1.{n}"), t));
        self.fc2.visit_params(&mut |n, t| f(&format!("fc2.{n}"), t));
    }
}

#[derive(Debug, Clone)]
enum QabnCache {
    Base(usize),
    Meta { x: Tensor, f: Vec<f64> },
}

/// One normalization site with `M` BN bases.
#[derive(Debug, Clone)]
pub struct QabnLayer {
    pub bases: Vec<BatchNorm2d>,
    pub site: usize,
    cache: Option<QabnCache>,
}

impl QabnLayer {
    pub fn new(channels: usize, m: usize, site: usize) -> Self {
        assert!(m >= 1, "a QABN site needs at least one base");
        Self {
            bases: (0..m).map(|_| BatchNorm2d::new(channels)).collect(),
            site,
            cache: None,
        }
    }

    /// Every base is a deep copy of `bn`.
    pub fn init_from_baseline(bn: &BatchNorm2d, m: usize, site: usize) -> Self {
        assert!(m >= 1, "a QABN site needs at least one base");
        Self {
            bases: (0..m).map(|_| bn.snapshot()).collect(),
            site,
            cache: None,
        }
    }

    pub fn m(&self) -> usize {
        self.bases.len()
    }

    pub fn channels(&self) -> usize {
        self.bases[0].channels()
    }

    fn check_index(&self, i: usize) -> Result<(), NnError> {
        if i >= self.m() {
            return Err(NnError::IndexOutOfRange(format!(
                "base {i} at site {} with {} bases",
                self.site,
                self.m()
            )));
        }
        Ok(())
    }

    pub fn forward_base(&mut self, x: &Tensor, i: usize, mode: Mode) -> Result<Tensor, NnError> {
        self.check_index(i)?;
        let y = self.bases[i].forward(x, mode)?;
        self.cache = Some(QabnCache::Base(i));
        Ok(y)
    }

    pub fn infer_base(&self, x: &Tensor, i: usize) -> Result<Tensor, NnError> {
        self.check_index(i)?;
        self.bases[i].infer(x)
    }

    /// Expands a shared `M`-vector or validates a per-sample `N×M` block.
    fn mixing(&self, n: usize, f: &[f64]) -> Result<Vec<f64>, NnError> {
        let m = self.m();
        if f.len() == m {
            Ok(f.repeat(n))
        } else if f.len() == n * m {
            Ok(f.to_vec())
        } else {
            Err(NnError::ShapeMismatch(format!(
                "mixing weights of length {} for batch {n} and {m} bases",
                f.len()
            )))
        }
    }

    fn mix(&self, x: &Tensor, f: &[f64], affine: bool) -> Result<Tensor, NnError> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels() {
            return Err(NnError::ShapeMismatch(format!(
                "QABN site {} expects [N, {}, H, W], got {:?}",
                self.site,
                self.channels(),
                x.shape()
            )));
        }
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let m = self.m();
        // (mean, 1/std, gamma, beta) per base and channel
        let stats: Vec<[f64; 4]> = self
            .bases
            .iter()
            .flat_map(|b| {
                (0..c).map(move |ch| {
                    [
                        b.running_mean.data()[ch],
                        1.0 / (b.running_var.data()[ch] + b.eps).sqrt(),
                        if affine { b.gamma.data()[ch] } else { 1.0 },
                        if affine { b.beta.data()[ch] } else { 0.0 },
                    ]
                })
            })
            .collect();
        let mut y = vec![0.0; x.numel()];
        let xd = x.data();
        for ni in 0..n {
            let fw = &f[ni * m..(ni + 1) * m];
            for ch in 0..c {
                let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                for (o, &v) in y[r.clone()].iter_mut().zip(&xd[r]) {
                    let mut acc = 0.0;
                    for (i, w) in fw.iter().enumerate() {
                        let [mu, inv, g, b] = stats[i * c + ch];
                        acc += w * (g * ((v - mu) * inv) + b);
                    }
                    *o = acc;
                }
            }
        }
        Tensor::new(s, y)
    }

    /// `Σ_i f_i · BN_i(x)` with every base on its running statistics.
    /// `f` is one `M`-vector shared by the batch or one per sample.
    pub fn forward_meta(&mut self, x: &Tensor, f: &[f64]) -> Result<Tensor, NnError> {
        let f = self.mixing(x.shape().first().copied().unwrap_or(0), f)?;
        let y = self.mix(x, &f, true)?;
        self.cache = Some(QabnCache::Meta { x: x.clone(), f });
        Ok(y)
    }

    pub fn infer_meta(&self, x: &Tensor, f: &[f64]) -> Result<Tensor, NnError> {
        let f = self.mixing(x.shape().first().copied().unwrap_or(0), f)?;
        self.mix(x, &f, true)
    }

    /// Meta-path mixture of the standardized features, before each base's
    /// affine map: `Σ_i f_i (x - μ_i) / σ_i`.
    pub fn standardize_meta(&self, x: &Tensor, f: &[f64]) -> Result<Tensor, NnError> {
        let f = self.mixing(x.shape().first().copied().unwrap_or(0), f)?;
        self.mix(x, &f, false)
    }

    pub fn standardize_base(&self, x: &Tensor, i: usize) -> Result<Tensor, NnError> {
        self.check_index(i)?;
        self.bases[i].standardize(x)
    }

    /// Returns `∂L/∂x` and, after a meta forward, `∂L/∂f` as `[N, M]`.
    /// Base-path parameter gradients accumulate when `param_grads` is set;
    /// the meta path never produces gradients for the bases.
    pub fn backward(&mut self, dy: &Tensor, param_grads: bool) -> Result<(Tensor, Option<Tensor>), NnError> {
        match self.cache.as_ref().ok_or_else(|| NnError::ModeError(format!("qabn site {}", self.site)))? {
            QabnCache::Base(i) => {
                let i = *i;
                Ok((self.bases[i].backward(dy, param_grads)?, None))
            }
            QabnCache::Meta { x, f } => {
                if dy.shape() != x.shape() {
                    return Err(NnError::ShapeMismatch("QABN upstream gradient shape".into()));
                }
                let s = x.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = self.m();
                let mut dx = vec![0.0; x.numel()];
                let mut df = vec![0.0; n * m];
                let (xd, dyd) = (x.data(), dy.data());
                for ni in 0..n {
                    for ch in 0..c {
                        let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                        let (mut s0, mut s1) = (0.0, 0.0);
                        for (&d, &v) in dyd[r.clone()].iter().zip(&xd[r.clone()]) {
                            s0 += d;
                            s1 += d * v;
                        }
                        let mut slope = 0.0;
                        for (i, b) in self.bases.iter().enumerate() {
                            let inv = 1.0 / (b.running_var.data()[ch] + b.eps).sqrt();
                            let a = b.gamma.data()[ch] * inv;
                            slope += f[ni * m + i] * a;
                            df[ni * m + i] += a * (s1 - b.running_mean.data()[ch] * s0) + b.beta.data()[ch] * s0;
                        }
                        for (o, &d) in dx[r.clone()].iter_mut().zip(&dyd[r]) {
                            *o = slope * d;
                        }
                    }
                }
                Ok((Tensor::new(s, dx)?, Some(Tensor::new(&[n, m], df)?)))
            }
        }
    }

    pub fn snapshot(&self) -> Self {
        Self {
            bases: self.bases.iter().map(BatchNorm2d::snapshot).collect(),
            site: self.site,
            cache: None,
        }
    }
}

impl Module for QabnLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.bases.iter_mut().enumerate() {
            b.visit_params(&mut |n, t| f(&format!("base.{i}.{n}"), t));
        }
    }
}

/// `‖f − onehot(k)‖₁` summed over the basis QSTs, with its gradient with
/// respect to each mixing vector (subgradient 0 at ties).
pub fn basis_loss(f: &Tensor) -> (f64, Tensor) {
    let m = f.shape()[1];
    let mut loss = 0.0;
    let mut grad = vec![0.0; f.numel()];
    for (k, (row, g)) in f.data().chunks_exact(m).zip(grad.chunks_exact_mut(m)).enumerate() {
        for (i, (&v, gv)) in row.iter().zip(g.iter_mut()).enumerate() {
            let d = v - if i == k { 1.0 } else { 0.0 };
            loss += d.abs();
            *gv = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    (loss, Tensor::new(f.shape(), grad).expect("same shape"))
}
