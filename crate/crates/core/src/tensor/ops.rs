//! Forward operations. Each op validates shapes explicitly, computes the
//! result, and records its parents for the backward pass.

use std::rc::Rc;

use super::linalg::{for_each_disjoint, gemm};
use super::{f, grad_enabled, numel, Element, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<E: Element> {
    Leaf,
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Div(Tensor<E>, Tensor<E>),
    Maximum(Tensor<E>, Tensor<E>),
    Affine { x: Tensor<E>, mul: E },
    Relu(Tensor<E>),
    Gelu(Tensor<E>),
    Sigmoid(Tensor<E>),
    Softplus(Tensor<E>),
    Exp(Tensor<E>),
    Ln(Tensor<E>),
    Abs(Tensor<E>),
    Sqrt(Tensor<E>),
    Tanh(Tensor<E>),
    Sin(Tensor<E>),
    Cos(Tensor<E>),
    AddBias { x: Tensor<E>, bias: Tensor<E> },
    Matmul { a: Tensor<E>, b: Tensor<E>, batch: usize, m: usize, k: usize, n: usize },
    Conv2d { x: Tensor<E>, w: Tensor<E>, bias: Option<Tensor<E>>, stride: usize, pad: usize },
    Upsample2x(Tensor<E>),
    Softmax { x: Tensor<E>, axis: usize },
    LayerNorm { x: Tensor<E>, gamma: Tensor<E>, beta: Tensor<E>, axis: usize, eps: E },
    BatchNorm {
        x: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        mean: Vec<E>,
        inv_std: Vec<E>,
        /// Whether `mean`/`inv_std` are this batch's own statistics (their
        /// dependence on `x` then enters the backward pass).
        training: bool,
    },
    Reshape(Tensor<E>),
    Permute { x: Tensor<E>, perm: Vec<usize> },
    Concat { xs: Vec<Tensor<E>>, axis: usize },
    Narrow { x: Tensor<E>, axis: usize, start: usize, len: usize },
    SumAxis { x: Tensor<E>, axis: usize },
    MeanAxis { x: Tensor<E>, axis: usize },
    SumAll(Tensor<E>),
    MeanAll(Tensor<E>),
    CrossEntropy {
        logits: Tensor<E>,
        labels: Rc<Vec<u32>>,
        weights: Vec<E>,
        ignore: u32,
        weight_total: E,
    },
    MergePanels {
        preds: Tensor<E>,
        conf: Option<Tensor<E>>,
        batch: usize,
        interval: usize,
        stride: usize,
    },
}

impl<E: Element> Op<E> {
    pub(crate) fn parents(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Maximum(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Abs(x)
            | Op::Sqrt(x)
            | Op::Tanh(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Softmax { x, .. }
            | Op::Upsample2x(x) => vec![x.clone()],
            Op::AddBias { x, bias } => vec![x.clone(), bias.clone()],
            Op::Matmul { a, b, .. } => vec![a.clone(), b.clone()],
            Op::Conv2d { x, w, bias, .. } => {
                let mut p = vec![x.clone(), w.clone()];
                if let Some(b) = bias {
                    p.push(b.clone());
                }
                p
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::Concat { xs, .. } => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
            Op::MergePanels { preds, conf, .. } => {
                let mut p = vec![preds.clone()];
                if let Some(c) = conf {
                    p.push(c.clone());
                }
                p
            }
        }
    }
}

/// Decompose `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

pub(crate) fn gelu_forward<E: Element>(x: E) -> E {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c: E = f(0.797_884_560_802_865_4);
    let a: E = f(0.044715);
    let half: E = f(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

pub(crate) fn gelu_grad<E: Element>(x: E) -> E {
    let c: E = f(0.797_884_560_802_865_4);
    let a: E = f(0.044715);
    let half: E = f(0.5);
    let three: E = f(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + three * a * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

pub(crate) fn sigmoid_forward<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn softplus_forward<E: Element>(x: E) -> E {
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = if x > E::zero() { x } else { E::zero() };
    m + (-x.abs()).exp().ln_1p()
}

impl<E: Element> Tensor<E> {
    fn binary(
        &self,
        rhs: &Tensor<E>,
        name: &str,
        eval: impl Fn(E, E) -> E,
        op: impl FnOnce(Tensor<E>, Tensor<E>) -> Op<E>,
    ) -> Result<Tensor<E>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape_mismatch(name, self.shape(), rhs.shape()));
        }
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| eval(x, y)).collect()
        };
        Ok(Tensor::make(
            self.shape().to_vec(),
            data,
            op(self.clone(), rhs.clone()),
            self.requires_grad() || rhs.requires_grad(),
        ))
    }

    fn unary(
        &self,
        eval: impl Fn(E) -> E,
        op: impl FnOnce(Tensor<E>) -> Op<E>,
    ) -> Tensor<E> {
        let data = self.data().iter().map(|&x| eval(x)).collect();
        Tensor::make(self.shape().to_vec(), data, op(self.clone()), self.requires_grad())
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div)
    }

    /// Elementwise maximum. At ties the gradient is routed to the left operand.
    pub fn maximum(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, "maximum", |a, b| if a >= b { a } else { b }, Op::Maximum)
    }

    /// y = x * mul + add.
    pub fn affine(&self, mul: E, add: E) -> Tensor<E> {
        self.unary(|x| x * mul + add, |x| Op::Affine { x, mul })
    }

    pub fn scale(&self, k: E) -> Tensor<E> {
        self.affine(k, E::zero())
    }

    pub fn neg(&self) -> Tensor<E> {
        self.affine(-E::one(), E::zero())
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        self.affine(E::one(), c)
    }

    /// Rectifier; the subgradient at 0 is taken as 0 (left limit).
    pub fn relu(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| if x > E::zero() { x } else { E::zero() }, Op::Relu))
    }

    /// Tanh-form gaussian error linear unit.
    pub fn gelu(&self) -> Result<Tensor<E>> {
        Ok(self.unary(gelu_forward, Op::Gelu))
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        Ok(self.unary(sigmoid_forward, Op::Sigmoid))
    }

    pub fn softplus(&self) -> Result<Tensor<E>> {
        Ok(self.unary(softplus_forward, Op::Softplus))
    }

    pub fn exp(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| x.exp(), Op::Exp))
    }

    pub fn ln(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| x.ln(), Op::Ln))
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| x.abs(), Op::Abs))
    }

    pub fn sqrt(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| x.sqrt(), Op::Sqrt))
    }

    pub fn tanh(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| x.tanh(), Op::Tanh))
    }

    pub fn sin(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| x.sin(), Op::Sin))
    }

    pub fn cos(&self) -> Result<Tensor<E>> {
        Ok(self.unary(|x| x.cos(), Op::Cos))
    }

    pub fn square(&self) -> Result<Tensor<E>> {
        self.mul(self)
    }

    /// Add `bias` to every trailing block of `self`. `bias.shape` must be a
    /// proper suffix of `self.shape`: linear biases ([D] onto [N, D]) and
    /// positional embeddings ([T, D] onto [B, T, D]) both use this.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.shape();
        let b = bias.shape();
        if b.is_empty() || b.len() >= s.len() || &s[s.len() - b.len()..] != b {
            return Err(Error::shape_mismatch("add_bias", s, b));
        }
        let block = bias.numel();
        let data = {
            let x = self.data();
            let bv = bias.data();
            let mut out = Vec::with_capacity(x.len());
            for chunk in x.chunks(block) {
                out.extend(chunk.iter().zip(bv.iter()).map(|(&a, &c)| a + c));
            }
            out
        };
        Ok(Tensor::make(
            s.to_vec(),
            data,
            Op::AddBias { x: self.clone(), bias: bias.clone() },
            self.requires_grad() || bias.requires_grad(),
        ))
    }

    /// Matrix product. Supports [m,k]x[k,n] and batched [b,m,k]x[b,k,n].
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(Error::shape_mismatch("matmul", sa, sb));
                }
                (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(Error::shape_mismatch("matmul", sa, sb));
                }
                (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(Error::shape_mismatch("matmul", sa, sb)),
        };
        let mut out = vec![E::zero(); batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..batch {
                gemm(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(Tensor::make(
            out_shape,
            out,
            Op::Matmul { a: self.clone(), b: rhs.clone(), batch, m, k, n },
            self.requires_grad() || rhs.requires_grad(),
        ))
    }

    /// 2-D convolution with zero padding: x [B,Cin,H,W], w [Cout,Cin,kh,kw].
    pub fn conv2d(
        &self,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape_mismatch("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {:?} larger than padded input {:?}",
                ws, xs
            )));
        }
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(Error::shape_mismatch("conv2d bias", bt.shape(), &[cout]));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let mut out = vec![E::zero(); b * cout * oh * ow];
        {
            let x_ref = self.data();
            let x: &[E] = &x_ref;
            let w_ref = w.data();
            let wv: &[E] = &w_ref;
            let bv = bias.map(|t| t.to_vec());
            let heavy = b * cout * oh * ow * kdim >= (1 << 18);
            for_each_disjoint(&mut out, cout * oh * ow, b, heavy, |bi, chunk| {
                let mut col = vec![E::zero(); kdim * oh * ow];
                im2col(
                    &x[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut col,
                );
                gemm(wv, &col, cout, kdim, oh * ow, chunk);
                if let Some(ref bvals) = bv {
                    for (co, row) in chunk.chunks_mut(oh * ow).enumerate() {
                        let bc = bvals[co];
                        for v in row.iter_mut() {
                            *v = *v + bc;
                        }
                    }
                }
            });
        }
        let requires = self.requires_grad()
            || w.requires_grad()
            || bias.map(|t| t.requires_grad()).unwrap_or(false);
        Ok(Tensor::make(
            vec![b, cout, oh, ow],
            out,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                bias: bias.cloned(),
                stride,
                pad,
            },
            requires,
        ))
    }

    /// Nearest-neighbour 2x upsampling of a [B,C,H,W] map.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample_nearest2x: want 4-d input, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![E::zero(); b * c * 4 * h * w];
        {
            let x = self.data();
            for bc in 0..b * c {
                let src = &x[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let v = src[y * w + xx];
                        let base = 2 * y * 2 * w + 2 * xx;
                        dst[base] = v;
                        dst[base + 1] = v;
                        dst[base + 2 * w] = v;
                        dst[base + 2 * w + 1] = v;
                    }
                }
            }
        }
        Ok(Tensor::make(
            vec![b, c, 2 * h, 2 * w],
            out,
            Op::Upsample2x(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        check_axis(self.shape(), axis, "softmax")?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + j;
                    let mut mx = x[idx(0)];
                    for l in 1..len {
                        if x[idx(l)] > mx {
                            mx = x[idx(l)];
                        }
                    }
                    let mut denom = E::zero();
                    for l in 0..len {
                        let e = (x[idx(l)] - mx).exp();
                        out[idx(l)] = e;
                        denom = denom + e;
                    }
                    for l in 0..len {
                        out[idx(l)] = out[idx(l)] / denom;
                    }
                }
            }
        }
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::Softmax { x: self.clone(), axis },
            self.requires_grad(),
        ))
    }

    /// Layer normalization along `axis` with learnable `gamma`/`beta` of
    /// length `shape[axis]`. Uses the biased variance.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        axis: usize,
        eps: E,
    ) -> Result<Tensor<E>> {
        check_axis(self.shape(), axis, "layer_norm")?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        if gamma.shape() != [len] || beta.shape() != [len] {
            return Err(Error::shape_mismatch("layer_norm", self.shape(), gamma.shape()));
        }
        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            let g = gamma.data();
            let bt = beta.data();
            let ln: E = f(len as f64);
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + j;
                    let mut mean = E::zero();
                    for l in 0..len {
                        mean = mean + x[idx(l)];
                    }
                    mean = mean / ln;
                    let mut var = E::zero();
                    for l in 0..len {
                        let d = x[idx(l)] - mean;
                        var = var + d * d;
                    }
                    var = var / ln;
                    let inv = E::one() / (var + eps).sqrt();
                    for l in 0..len {
                        out[idx(l)] = (x[idx(l)] - mean) * inv * g[l] + bt[l];
                    }
                }
            }
        }
        let requires = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                axis,
                eps,
            },
            requires,
        ))
    }

    /// Batch normalization of a [B,C,H,W] map with the given per-channel
    /// statistics. With `training` set, `mean`/`var` must be this input's
    /// own biased batch statistics (see [`Tensor::channel_stats`]) and the
    /// backward pass differentiates through them; otherwise they are
    /// treated as constants (running statistics in eval mode). Callers own
    /// the running buffers; see `nn::BatchNorm2d`.
    pub fn batch_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        mean: &[E],
        var: &[E],
        eps: E,
        training: bool,
    ) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("batch_norm: want 4-d input, got {s:?}")));
        }
        let c = s[1];
        if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::shape_mismatch("batch_norm", s, gamma.shape()));
        }
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let (b, hw) = (s[0], s[2] * s[3]);
        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            let g = gamma.data();
            let bt = beta.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let (m, is, gc, bc) = (mean[ci], inv_std[ci], g[ci], bt[ci]);
                    for i in 0..hw {
                        out[base + i] = (x[base + i] - m) * is * gc + bc;
                    }
                }
            }
        }
        let requires = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Tensor::make(
            s.to_vec(),
            out,
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: mean.to_vec(),
                inv_std,
                training,
            },
            requires,
        ))
    }

    /// Per-channel mean and biased/unbiased variance over (B,H,W) of a
    /// [B,C,H,W] map, accumulated in f64. Forward helper for batch norm.
    pub fn channel_stats(&self) -> Result<(Vec<E>, Vec<E>, Vec<E>)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("channel_stats: want 4-d input, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let n = (b * hw) as f64;
        let x = self.data();
        let mut mean = vec![E::zero(); c];
        let mut var_b = vec![E::zero(); c];
        let mut var_u = vec![E::zero(); c];
        for ci in 0..c {
            let mut acc = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    acc += x[base + i].to_f64x();
                }
            }
            let m = acc / n;
            let mut sq = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    let d = x[base + i].to_f64x() - m;
                    sq += d * d;
                }
            }
            mean[ci] = f(m);
            var_b[ci] = f(sq / n);
            var_u[ci] = f(if n > 1.0 { sq / (n - 1.0) } else { 0.0 });
        }
        Ok((mean, var_b, var_u))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::make(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
            self.requires_grad(),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || !perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: invalid permutation {perm:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(&self.data(), s, perm);
        Ok(Tensor::make(
            out_shape,
            data,
            Op::Permute { x: self.clone(), perm: perm.to_vec() },
            self.requires_grad(),
        ))
    }

    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: no tensors".into()));
        }
        let first = parts[0].shape().to_vec();
        check_axis(&first, axis, "concat")?;
        let mut axis_total = 0;
        for t in parts {
            let s = t.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape_mismatch("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for t in parts {
                let len = t.shape()[axis];
                let d = t.data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let requires = parts.iter().any(|t| t.requires_grad());
        Ok(Tensor::make(
            out_shape,
            out,
            Op::Concat { xs: parts.iter().map(|t| (*t).clone()).collect(), axis },
            requires,
        ))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        check_axis(s, axis, "narrow")?;
        if start + len > s[axis] {
            return Err(Error::Shape(format!(
                "narrow: range {start}..{} out of bounds for axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = axis_extents(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::make(
            out_shape,
            out,
            Op::Narrow { x: self.clone(), axis, start, len },
            self.requires_grad(),
        ))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        check_axis(self.shape(), axis, "sum_axis")?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let mut out = vec![E::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for j in 0..inner {
                        out[o * inner + j] = out[o * inner + j] + x[base + j];
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::make(shape, out, Op::SumAxis { x: self.clone(), axis }, self.requires_grad()))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        check_axis(self.shape(), axis, "mean_axis")?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let scale: E = f(1.0 / len as f64);
        let mut out = vec![E::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for j in 0..inner {
                        out[o * inner + j] = out[o * inner + j] + x[base + j];
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::make(shape, out, Op::MeanAxis { x: self.clone(), axis }, self.requires_grad()))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let total = self.data().iter().fold(E::zero(), |acc, &v| acc + v);
        Ok(Tensor::make(vec![], vec![total], Op::SumAll(self.clone()), self.requires_grad()))
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        if self.numel() == 0 {
            return Err(Error::Shape("mean_all: empty tensor".into()));
        }
        let total = self.data().iter().fold(E::zero(), |acc, &v| acc + v);
        let m = total * f(1.0 / self.numel() as f64);
        Ok(Tensor::make(vec![], vec![m], Op::MeanAll(self.clone()), self.requires_grad()))
    }

    /// Class-weighted cross entropy over [M,K] logits with integer labels.
    /// Rows labelled `ignore` contribute nothing; the loss is normalized by
    /// the total weight of the remaining rows.
    pub fn cross_entropy(
        &self,
        labels: &Rc<Vec<u32>>,
        class_weights: &[E],
        ignore: u32,
    ) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("cross_entropy: want [M,K] logits, got {s:?}")));
        }
        let (m, k) = (s[0], s[1]);
        if labels.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy: {m} rows vs {} labels",
                labels.len()
            )));
        }
        if class_weights.len() != k {
            return Err(Error::Shape(format!(
                "cross_entropy: {k} classes vs {} weights",
                class_weights.len()
            )));
        }
        let mut weight_total = 0.0f64;
        let mut loss = 0.0f64;
        {
            let x = self.data();
            for (i, &y) in labels.iter().enumerate() {
                if y == ignore {
                    continue;
                }
                if y as usize >= k {
                    return Err(Error::Data(format!(
                        "cross_entropy: label {y} out of range for {k} classes"
                    )));
                }
                let row = &x[i * k..(i + 1) * k];
                let mx = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
                let lse = row
                    .iter()
                    .map(|&v| (v - mx).to_f64x().exp())
                    .sum::<f64>()
                    .ln()
                    + mx.to_f64x();
                let w = class_weights[y as usize].to_f64x();
                loss += w * (lse - row[y as usize].to_f64x());
                weight_total += w;
            }
        }
        if weight_total <= 0.0 {
            return Err(Error::Data("cross_entropy: no labelled pixels".into()));
        }
        Ok(Tensor::make(
            vec![],
            vec![f(loss / weight_total)],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: Rc::clone(labels),
                weights: class_weights.to_vec(),
                ignore,
                weight_total: f(weight_total),
            },
            self.requires_grad(),
        ))
    }

    /// Blend per-panel maps back onto the equirectangular grid.
    ///
    /// `self` is [batch*n, C, H, interval] with panel `p` of scene `b` stored
    /// at index `b*n + p`; panel `p` covers ERP columns `(p*stride + j) mod
    /// W_e`. `conf`, when given, is a positive [batch*n, 1, H, interval]
    /// weight map. Every ERP pixel is covered by `interval/stride` panels;
    /// the output is the weight-normalized sum, accumulated in f64 over
    /// ascending panel index.
    pub fn merge_panels(
        &self,
        conf: Option<&Tensor<E>>,
        batch: usize,
        interval: usize,
        stride: usize,
    ) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 || s[3] != interval {
            return Err(Error::Shape(format!(
                "merge_panels: want [batch*n, C, H, {interval}] predictions, got {s:?}"
            )));
        }
        if batch == 0 || s[0] % batch != 0 {
            return Err(Error::Config(format!(
                "merge_panels: {} panels do not split into batch {batch}",
                s[0]
            )));
        }
        let n = s[0] / batch;
        if stride == 0 || interval % stride != 0 {
            return Err(Error::Config(format!(
                "merge_panels: stride {stride} must divide interval {interval}"
            )));
        }
        let we = n * stride;
        if interval > we {
            return Err(Error::Config(format!(
                "merge_panels: interval {interval} exceeds ERP width {we}"
            )));
        }
        let (c, h) = (s[1], s[2]);
        if let Some(cf) = conf {
            if cf.shape() != [batch * n, 1, h, interval] {
                return Err(Error::shape_mismatch(
                    "merge_panels confidences",
                    cf.shape(),
                    &[batch * n, 1, h, interval],
                ));
            }
        }
        let mut out = vec![E::zero(); batch * c * h * we];
        {
            let preds = self.data();
            let conf_data = conf.map(|t| t.data());
            let mut num = vec![0.0f64; c * h * we];
            let mut den = vec![0.0f64; h * we];
            for b in 0..batch {
                num.fill(0.0);
                den.fill(0.0);
                for p in 0..n {
                    let panel = (b * n + p) * c * h * interval;
                    let conf_base = (b * n + p) * h * interval;
                    for j in 0..interval {
                        let x = (p * stride + j) % we;
                        for y in 0..h {
                            let w = match &conf_data {
                                Some(cd) => {
                                    let wv = cd[conf_base + y * interval + j].to_f64x();
                                    if !(wv > 0.0) || !wv.is_finite() {
                                        return Err(Error::Merge(format!(
                                            "non-positive confidence {wv} at panel {p}, pixel ({y},{j})"
                                        )));
                                    }
                                    wv
                                }
                                None => 1.0,
                            };
                            den[y * we + x] += w;
                            for ci in 0..c {
                                num[(ci * h + y) * we + x] +=
                                    w * preds[panel + (ci * h + y) * interval + j].to_f64x();
                            }
                        }
                    }
                }
                for y in 0..h {
                    for x in 0..we {
                        let d = den[y * we + x];
                        if d <= 0.0 {
                            return Err(Error::Merge(format!(
                                "zero total weight at pixel ({y},{x})"
                            )));
                        }
                        for ci in 0..c {
                            out[((b * c + ci) * h + y) * we + x] =
                                f(num[(ci * h + y) * we + x] / d);
                        }
                    }
                }
            }
        }
        let requires =
            self.requires_grad() || conf.map(|t| t.requires_grad()).unwrap_or(false);
        Ok(Tensor::make(
            vec![batch, c, h, we],
            out,
            Op::MergePanels {
                preds: self.clone(),
                conf: conf.cloned(),
                batch,
                interval,
                stride,
            },
            requires,
        ))
    }
}

/// Multi-head scaled dot-product attention without projections:
/// per head `softmax(Q K^T / sqrt(d_head)) V`, heads re-concatenated.
/// Inputs are [T, D] or batched [B, T, D]; D must divide by `heads`.
pub fn scaled_dot_product_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    heads: usize,
) -> Result<Tensor<E>> {
    let s = q.shape().to_vec();
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape_mismatch("attention", q.shape(), k.shape()));
    }
    let (batch, t, d, batched) = match s.len() {
        2 => (1, s[0], s[1], false),
        3 => (s[0], s[1], s[2], true),
        _ => return Err(Error::Shape(format!("attention: want [T,D] or [B,T,D], got {s:?}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention: {heads} heads do not divide dim {d}"
        )));
    }
    let dh = d / heads;
    let split = |x: &Tensor<E>| -> Result<Tensor<E>> {
        // [B,T,D] -> [B*heads, T, dh]
        x.reshape(&[batch, t, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * heads, t, dh])
    };
    let qh = split(q)?;
    let kh = split(k)?;
    let vh = split(v)?;
    let kt = kh.permute(&[0, 2, 1])?;
    let scores = qh.matmul(&kt)?.scale(f(1.0 / (dh as f64).sqrt()));
    let attn = scores.softmax(2)?;
    let ctx = attn.matmul(&vh)?; // [B*heads, T, dh]
    let merged = ctx
        .reshape(&[batch, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, t, d])?;
    if batched {
        Ok(merged)
    } else {
        merged.reshape(&[t, d])
    }
}

pub(crate) fn permute_data<E: Element>(x: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        return x.to_vec();
    }
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        let mut src = 0;
        for (i, &c) in counter.iter().enumerate() {
            src += c * in_strides[perm[i]];
        }
        out.push(x[src]);
        for i in (0..rank).rev() {
            counter[i] += 1;
            if counter[i] < out_shape[i] {
                break;
            }
            counter[i] = 0;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    debug_assert_eq!(col.len(), cin * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(E::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_accumulate<E: Element>(
    col: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [E],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    let mut row = 0usize;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let p = iy as usize * w + ix as usize;
                        plane[p] = plane[p] + src[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// `true` when graph recording would keep this op alive (used by tests).
pub fn recording() -> bool {
    grad_enabled()
}
