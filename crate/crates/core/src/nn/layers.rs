use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::{gemm, shape_err, Layer, Mode, Module, NnError, Tensor};

fn no_cache(layer: &str) -> NnError {
    NnError::ModeError(layer.to_string())
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<(), NnError> {
    if t.shape().len() != rank {
        return Err(shape_err(format!(
            "{what} expects rank {rank}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn expect_same(a: &Tensor, b: &Tensor, what: &str) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Need {
    pub params: bool,
    pub input: bool,
}

impl Need {
    pub const ALL: Need = Need {
        params: true,
        input: true,
    };
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, NnError> {
        expect_rank(&weight, 2, "linear weight")?;
        if bias.shape() != [weight.shape()[0]] {
            return Err(shape_err("linear bias length differs from output width"));
        }
        let mut weight = weight;
        let mut bias = bias;
        weight.requires_grad = true;
        weight.grad.get_or_insert_with(|| vec![0.0; weight.data.len()]);
        bias.requires_grad = true;
        bias.grad.get_or_insert_with(|| vec![0.0; bias.data.len()]);
        Ok(Self {
            weight,
            bias,
            input: None,
        })
    }

    /// Uniform(±1/√fan_in) initialization for weights and bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new(-bound, bound);
        let w = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        let b = (0..outputs).map(|_| dist.sample(rng)).collect();
        Self::new(
            Tensor::param(&[outputs, inputs], w).expect("sized"),
            Tensor::param(&[outputs], b).expect("sized"),
        )
        .expect("consistent shapes")
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        expect_rank(x, 2, "linear input")?;
        let (n, i, o) = (x.shape()[0], self.inputs(), self.outputs());
        if x.shape()[1] != i {
            return Err(shape_err(format!("linear expects {i} inputs, got {}", x.shape()[1])));
        }
        let mut y = vec![0.0; n * o];
        for row in y.chunks_exact_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            n, i, o, 1.0, x.data(), i as isize, 1, self.weight.data(), 1, i as isize, 1.0, &mut y,
            o as isize, 1,
        );
        Tensor::new(&[n, o], y)
    }

    pub fn backward(&mut self, dy: &Tensor, param_grads: bool) -> Result<Tensor, NnError> {
        let x = self.input.as_ref().ok_or_else(|| no_cache("linear"))?;
        let (n, i, o) = (x.shape()[0], self.inputs(), self.outputs());
        if dy.shape() != [n, o] {
            return Err(shape_err("linear upstream gradient shape"));
        }
        if param_grads {
            let gw = self.weight.grad.as_mut().expect("param");
            gemm(
                o, n, i, 1.0, dy.data(), 1, o as isize, x.data(), i as isize, 1, 1.0, gw,
                i as isize, 1,
            );
            let gb = self.bias.grad.as_mut().expect("param");
            for row in dy.data().chunks_exact(o) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![0.0; n * i];
        gemm(
            n, o, i, 1.0, dy.data(), o as isize, 1, self.weight.data(), i as isize, 1, 0.0,
            &mut dx, i as isize, 1,
        );
        Tensor::new(&[n, i], dx)
    }
}

impl Module for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor, NnError> {
        Linear::forward(self, x)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        Linear::backward(self, dy, true)
    }
}

#[derive(Debug, Clone)]
struct ConvCache {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    /// Per sample, `[C·k·k, OH·OW]` patch matrices, concatenated.
    cols: Vec<f64>,
}

/// Samples per partial weight gradient.
const GRAD_CHUNK: usize = 8;

/// 2-D convolution over NCHW input with square kernels and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Result<Self, NnError> {
        expect_rank(&weight, 4, "conv weight")?;
        if weight.shape()[2] != weight.shape()[3] {
            return Err(shape_err("conv kernels must be square"));
        }
        if stride == 0 {
            return Err(shape_err("conv stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(shape_err("conv bias length differs from output channels"));
            }
        }
        let mut weight = weight;
        weight.requires_grad = true;
        weight.grad.get_or_insert_with(|| vec![0.0; weight.data.len()]);
        let bias = bias.map(|mut b| {
            b.requires_grad = true;
            b.grad.get_or_insert_with(|| vec![0.0; b.data.len()]);
            b
        });
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            cache: None,
        })
    }

    /// He-normal initialization, no bias.
    pub fn init<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| dist.sample(rng))
            .collect();
        Self::new(
            Tensor::param(&[out_ch, in_ch, kernel, kernel], w).expect("sized"),
            None,
            stride,
            pad,
        )
        .expect("consistent shapes")
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let k = self.dims().2;
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(shape_err("conv input smaller than kernel"));
        }
        Ok((
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        ))
    }

    fn im2col(&self, x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let k = self.dims().2;
        let p = oh * ow;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.dims().2;
        let p = oh * ow;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<ConvCache>), NnError> {
        expect_rank(x, 4, "conv input")?;
        let (o, c, k) = self.dims();
        let s = x.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        if s[1] != c {
            return Err(shape_err(format!("conv expects {c} channels, got {}", s[1])));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let p = oh * ow;
        let ckk = c * k * k;
        let mut y = vec![0.0; n * o * p];
        let mut cols = if keep { vec![0.0; n * ckk * p] } else { Vec::new() };
        let xs = x.data();
        let one = |ni: usize, yn: &mut [f64], col: &mut [f64]| {
            self.im2col(&xs[ni * c * h * w..(ni + 1) * c * h * w], c, h, w, oh, ow, col);
            if let Some(b) = &self.bias {
                for (oc, chunk) in yn.chunks_exact_mut(p).enumerate() {
                    chunk.fill(b.data()[oc]);
                }
            }
            gemm(
                o, ckk, p, 1.0, self.weight.data(), ckk as isize, 1, col, p as isize, 1, 1.0, yn,
                p as isize, 1,
            );
        };
        if keep {
            y.par_chunks_mut(o * p)
                .zip(cols.par_chunks_mut(ckk * p))
                .enumerate()
                .for_each(|(ni, (yn, col))| one(ni, yn, col));
        } else {
            y.par_chunks_mut(o * p)
                .enumerate()
                .for_each_init(|| vec![0.0; ckk * p], |col, (ni, yn)| one(ni, yn, col));
        }
        let cache = keep.then_some(ConvCache {
            in_shape: [n, c, h, w],
            out_hw: (oh, ow),
            cols,
        });
        Ok((Tensor::new(&[n, o, oh, ow], y)?, cache))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let (y, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.run(x, false)?.0)
    }

    pub fn backward_with(&mut self, dy: &Tensor, need: Need) -> Result<Option<Tensor>, NnError> {
        let cache = self.cache.as_ref().ok_or_else(|| no_cache("conv2d"))?;
        let (o, c, k) = self.dims();
        let [n, _, h, w] = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let p = oh * ow;
        let ckk = c * k * k;
        if dy.shape() != [n, o, oh, ow] {
            return Err(shape_err("conv upstream gradient shape"));
        }
        if need.params {
            // Fixed-size sample chunks reduced in order keep the sum
            // independent of the thread count.
            let partials: Vec<Vec<f64>> = (0..n.div_ceil(GRAD_CHUNK))
                .into_par_iter()
                .map(|chunk| {
                    let mut g = vec![0.0; o * ckk];
                    for ni in chunk * GRAD_CHUNK..((chunk + 1) * GRAD_CHUNK).min(n) {
                        let col = &cache.cols[ni * ckk * p..(ni + 1) * ckk * p];
                        let dyn_ = &dy.data()[ni * o * p..(ni + 1) * o * p];
                        gemm(
                            o, p, ckk, 1.0, dyn_, p as isize, 1, col, 1, p as isize, 1.0, &mut g,
                            ckk as isize, 1,
                        );
                    }
                    g
                })
                .collect();
            let gw = self.weight.grad.as_mut().expect("param");
            for g in &partials {
                for (a, b) in gw.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if let Some(b) = self.bias.as_mut() {
                let gb = b.grad.as_mut().expect("param");
                for ni in 0..n {
                    for (oc, chunk) in dy.data()[ni * o * p..(ni + 1) * o * p]
                        .chunks_exact(p)
                        .enumerate()
                    {
                        gb[oc] += chunk.iter().sum::<f64>();
                    }
                }
            }
        }
        if !need.input {
            return Ok(None);
        }
        let mut dx = vec![0.0; n * c * h * w];
        let weight = self.weight.data();
        dx.par_chunks_mut(c * h * w)
            .enumerate()
            .for_each_init(
                || vec![0.0; ckk * p],
                |dcol, (ni, dxn)| {
                    let dyn_ = &dy.data()[ni * o * p..(ni + 1) * o * p];
                    gemm(
                        ckk, o, p, 1.0, weight, 1, ckk as isize, dyn_, p as isize, 1, 0.0, dcol,
                        p as isize, 1,
                    );
                    self.col2im(dcol, c, h, w, oh, ow, dxn);
                },
            );
        Ok(Some(Tensor::new(&[n, c, h, w], dx)?))
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f("bias", b);
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor, NnError> {
        Conv2d::forward(self, x)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.backward_with(dy, Need::ALL)?.expect("input gradient requested"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = Self::infer(x);
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        y
    }

    pub fn infer(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.grad = None;
        y.requires_grad = false;
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let mask = self.mask.as_ref().ok_or_else(|| no_cache("relu"))?;
        if mask.len() != dy.numel() {
            return Err(shape_err("relu upstream gradient shape"));
        }
        let data = dy
            .data()
            .iter()
            .zip(mask)
            .map(|(&d, &m)| if m { d } else { 0.0 })
            .collect();
        Tensor::new(dy.shape(), data)
    }
}

impl Module for Relu {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor, NnError> {
        Ok(Relu::forward(self, x))
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        Relu::backward(self, dy)
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    fn run(x: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
        expect_rank(x, 4, "max_pool2 input")?;
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut y = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; y.len()];
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    y[o] = xd[best];
                    arg[o] = best;
                }
            }
        }
        Ok((Tensor::new(&[n, c, oh, ow], y)?, arg))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let (y, arg) = Self::run(x)?;
        self.cache = Some((arg, x.shape().to_vec()));
        Ok(y)
    }

    pub fn infer(x: &Tensor) -> Result<Tensor, NnError> {
        Ok(Self::run(x)?.0)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let (arg, in_shape) = self.cache.as_ref().ok_or_else(|| no_cache("max_pool2"))?;
        if dy.numel() != arg.len() {
            return Err(shape_err("max_pool2 upstream gradient shape"));
        }
        let mut dx = Tensor::zeros(in_shape);
        for (&i, &d) in arg.iter().zip(dy.data()) {
            dx.data[i] += d;
        }
        Ok(dx)
    }
}

impl Module for MaxPool2 {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

impl Layer for MaxPool2 {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor, NnError> {
        MaxPool2::forward(self, x)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        MaxPool2::backward(self, dy)
    }
}

/// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(x: &Tensor) -> Result<Tensor, NnError> {
        expect_rank(x, 4, "global_avg_pool input")?;
        let s = x.shape();
        let hw = s[2] * s[3];
        let y = x
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        Tensor::new(&[s[0], s[1]], y)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = Self::infer(x)?;
        self.in_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let s = self
            .in_shape
            .as_ref()
            .ok_or_else(|| no_cache("global_avg_pool"))?;
        if dy.shape() != [s[0], s[1]] {
            return Err(shape_err("global_avg_pool upstream gradient shape"));
        }
        let hw = s[2] * s[3];
        let mut dx = Tensor::zeros(s);
        for (chunk, &d) in dx.data.chunks_exact_mut(hw).zip(dy.data()) {
            chunk.fill(d / hw as f64);
        }
        Ok(dx)
    }
}

impl Module for GlobalAvgPool {
    fn visit_params(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor, NnError> {
        GlobalAvgPool::forward(self, x)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        GlobalAvgPool::backward(self, dy)
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

/// Batch normalization over NCHW features. Holds the affine parameters and
/// the running statistics; one instance is one "BN state".
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("sized"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("sized"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Copy of the parameters and statistics with the forward cache dropped.
    pub fn snapshot(&self) -> Self {
        let mut s = self.clone();
        s.cache = None;
        s
    }

    /// Bitwise equality of parameters and running statistics.
    pub fn same_state(&self, other: &Self) -> bool {
        self.gamma.data() == other.gamma.data()
            && self.beta.data() == other.beta.data()
            && self.running_mean.data() == other.running_mean.data()
            && self.running_var.data() == other.running_var.data()
            && self.momentum == other.momentum
            && self.eps == other.eps
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize), NnError> {
        expect_rank(x, 4, "batch_norm2d input")?;
        let s = x.shape();
        if s[1] != self.channels() {
            return Err(shape_err(format!(
                "batch_norm2d expects {} channels, got {}",
                self.channels(),
                s[1]
            )));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let (n, c, hw) = self.check(x)?;
        let count = n * hw;
        if mode == Mode::Train && count < 2 {
            return Err(shape_err("batch_norm2d train mode needs more than one value per channel"));
        }
        let xd = x.data();
        let mut inv_std = vec![0.0; c];
        let mut mean = vec![0.0; c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        s += xd[(ni * c + ch) * hw..(ni * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut v = 0.0;
                    for ni in 0..n {
                        v += xd[(ni * c + ch) * hw..(ni * c + ch + 1) * hw]
                            .iter()
                            .map(|x| (x - mu) * (x - mu))
                            .sum::<f64>();
                    }
                    let var = v / count as f64;
                    mean[ch] = mu;
                    inv_std[ch] = 1.0 / (var + self.eps).sqrt();
                    let unbiased = v / (count - 1) as f64;
                    let m = self.momentum;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - m) * *rm + m * mu;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - m) * *rv + m * unbiased;
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    mean[ch] = self.running_mean.data()[ch];
                    inv_std[ch] = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
                }
            }
        }
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        let (g, b) = (self.gamma.data(), self.beta.data());
        for ni in 0..n {
            for ch in 0..c {
                let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                for ((xh, yv), &xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xd[r]) {
                    *xh = (xv - mean[ch]) * inv_std[ch];
                    *yv = g[ch] * *xh + b[ch];
                }
            }
        }
        self.cache = Some(BnCache {
            mode,
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        });
        Tensor::new(x.shape(), y)
    }

    /// Eval-mode output without touching the cache.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.eval_affine(x, true)
    }

    /// `(x - running_mean) / sqrt(running_var + eps)`, without the affine map.
    pub fn standardize(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.eval_affine(x, false)
    }

    fn eval_affine(&self, x: &Tensor, affine: bool) -> Result<Tensor, NnError> {
        let (n, c, hw) = self.check(x)?;
        let mut y = x.data().to_vec();
        for ch in 0..c {
            let inv = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
            let (mu, g, b) = if affine {
                (self.running_mean.data()[ch], self.gamma.data()[ch], self.beta.data()[ch])
            } else {
                (self.running_mean.data()[ch], 1.0, 0.0)
            };
            for ni in 0..n {
                for v in &mut y[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                    *v = g * ((*v - mu) * inv) + b;
                }
            }
        }
        Tensor::new(x.shape(), y)
    }

    pub fn backward(&mut self, dy: &Tensor, param_grads: bool) -> Result<Tensor, NnError> {
        let cache = self.cache.as_ref().ok_or_else(|| no_cache("batch_norm2d"))?;
        if dy.shape() != cache.shape.as_slice() {
            return Err(shape_err("batch_norm2d upstream gradient shape"));
        }
        let s = &cache.shape;
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let count = (n * hw) as f64;
        let dyd = dy.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ch in 0..c {
                let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                for (&d, &xh) in dyd[r.clone()].iter().zip(&cache.xhat[r]) {
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                }
            }
        }
        let g = self.gamma.data();
        let mut dx = vec![0.0; dyd.len()];
        for ni in 0..n {
            for ch in 0..c {
                let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                let scale = g[ch] * cache.inv_std[ch];
                match cache.mode {
                    Mode::Train => {
                        let (sb, sg) = (dbeta[ch] / count, dgamma[ch] / count);
                        for ((o, &d), &xh) in dx[r.clone()].iter_mut().zip(&dyd[r.clone()]).zip(&cache.xhat[r]) {
                            *o = scale * (d - sb - xh * sg);
                        }
                    }
                    Mode::Eval => {
                        for (o, &d) in dx[r.clone()].iter_mut().zip(&dyd[r]) {
                            *o = scale * d;
                        }
                    }
                }
            }
        }
        if param_grads {
            self.gamma.accumulate_grad(&dgamma)?;
            self.beta.accumulate_grad(&dbeta)?;
        }
        Tensor::new(s, dx)
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        BatchNorm2d::forward(self, x, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        BatchNorm2d::backward(self, dy, true)
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    expect_same(a, b, "add")?;
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), d)
}

/// Gradients of `a + b` with respect to both operands.
pub fn add_backward(dy: &Tensor) -> (Tensor, Tensor) {
    (dy.clone(), dy.clone())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    expect_same(a, b, "mul")?;
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape(), d)
}

/// Gradients of `a ⊙ b` with respect to both operands.
pub fn mul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor), NnError> {
    expect_same(a, dy, "mul_backward")?;
    Ok((mul(dy, b)?, mul(dy, a)?))
}
