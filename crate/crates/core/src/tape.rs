//! Reverse-mode autodiff on a Wengert tape.
//!
//! Builders run the forward computation eagerly and record one node per op;
//! node indices are the topological order. [`GradTape::backward`] walks the
//! tape once in reverse, accumulating gradients additively (so fan-out just
//! works: d(x+x)/dx = 2).
//!
//! One tape per forward pass, single-owner. Parameters live outside the tape
//! and enter through [`GradTape::leaf`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::spectral::{self, DftTables};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Cached per-row statistics for norm backward passes.
#[derive(Debug)]
struct NormStats<T> {
    mean: Vec<T>,
    invstd: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    /// x[N, rest..] + p[1, rest..], broadcast over the leading axis.
    AddBroadcast { x: Var, p: Var },
    Scale { x: Var, c: f64 },
    MulElem { a: Var, b: Var },
    SumAll { x: Var },
    SliceChannels { x: Var, start: usize, len: usize },
    Conv2d { x: Var, k: Var, bias: Option<Var>, dims: ConvDims },
    /// `dims` describes the matching forward conv: this op's input plays the
    /// conv output role and vice versa. Kernel layout [Cin, Cout, kh, kw].
    ConvT2d { x: Var, k: Var, bias: Option<Var>, dims: ConvDims },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, axis: usize, stats: NormStats<T> },
    /// `stats` holds the statistics actually used: batch stats in train mode,
    /// a snapshot of the running stats in eval mode.
    BatchNorm { x: Var, gamma: Var, beta: Var, train: bool, stats: NormStats<T> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, softmax: Tensor<T> },
    GlobalAvgPool { x: Var },
    MatmulBatched { a: Var, b: Var },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    SoftmaxLast { x: Var },
    /// Haar subband concat: [N,C,H,W] -> [N,4C,H/2,W/2], channel blocks
    /// ordered LL, LH, HL, HH. Orthonormal, so backward is the inverse map.
    DwtConcat { x: Var },
    /// Real part of the unnormalized 2D DFT over the spatial axes. The map is
    /// self-adjoint, so backward applies the same transform.
    FourierMixReal { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients returned by [`GradTape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` did not require grad or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Activation/compute accounting for one recorded forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct TapeProfile {
    /// Elements of every materialized intermediate: non-leaf node values plus
    /// operator-internal scratch (the DFT's real/imaginary plane buffers).
    pub activation_elems: usize,
    /// Multiply-accumulate count of the matmul-like ops (conv, linear,
    /// attention, DFT). Elementwise ops and biases are not counted.
    pub mult_adds: usize,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let req = match &op {
            Op::Leaf => false,
            Op::Add { a, b } | Op::MulElem { a, b } | Op::MatmulBatched { a, b } => {
                self.requires(*a) || self.requires(*b)
            }
            Op::AddBroadcast { x, p } => self.requires(*x) || self.requires(*p),
            Op::Scale { x, .. }
            | Op::SumAll { x }
            | Op::SliceChannels { x, .. }
            | Op::Gelu { x }
            | Op::GlobalAvgPool { x }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::SoftmaxLast { x }
            | Op::DwtConcat { x }
            | Op::FourierMixReal { x } => self.requires(*x),
            Op::Conv2d { x, k, bias, .. } | Op::ConvT2d { x, k, bias, .. } => {
                self.requires(*x) || self.requires(*k) || bias.map(|b| self.requires(b)).unwrap_or(false)
            }
            Op::Linear { x, w, b } => {
                self.requires(*x) || self.requires(*w) || b.map(|b| self.requires(b)).unwrap_or(false)
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                self.requires(*x) || self.requires(*gamma) || self.requires(*beta)
            }
            Op::SoftmaxCrossEntropy { logits, .. } => self.requires(*logits),
        };
        self.push(value, op, req)
    }

    // ---- builders -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push_op(value, Op::Add { a, b }))
    }

    /// x[N, rest..] + p[1, rest..]: the same parameter added to every batch row.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(p));
        let ok = tp.rank() == tx.rank()
            && tp.shape().first() == Some(&1)
            && tp.shape()[1..] == tx.shape()[1..]
            && tx.rank() >= 1;
        if !ok {
            return Err(Error::shape("add_broadcast", format!("{:?} + {:?}", tx.shape(), tp.shape())));
        }
        let row = tp.numel();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_exact_mut(row) {
            for (o, &pv) in chunk.iter_mut().zip(tp.data()) {
                *o += pv;
            }
        }
        let value = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push_op(value, Op::AddBroadcast { x, p }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.value(x).map(|v| v * cv);
        self.push_op(value, Op::Scale { x, c })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul_elem", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push_op(value, Op::MulElem { a, b }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push_op(Tensor::scalar(acc), Op::SumAll { x })
    }

    /// Channels [start, start+len) of an [N,C,...] tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 || start + len > tx.shape()[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("channels [{start}, {}) of shape {:?}", start + len, tx.shape()),
            ));
        }
        let n = tx.shape()[0];
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut shape = tx.shape().to_vec();
        shape[1] = len;
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let src = &tx.data()[(b * c + start) * inner..(b * c + start + len) * inner];
            data.extend_from_slice(src);
        }
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(value, Op::SliceChannels { x, start, len }))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 4 || tk.rank() != 4 {
            return Err(Error::shape("conv2d", format!("x {:?}, k {:?} (need rank 4)", tx.shape(), tk.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, cg, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(Error::shape("conv2d", format!("groups {groups} must divide C={c} and O={o}")));
        }
        if cg != c / groups {
            return Err(Error::shape("conv2d", format!("kernel expects {cg} in-channels per group, input has {}", c / groups)));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} stride {stride} too large for padded {h}x{w}")));
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs out channels {o}", tb.shape())));
            }
        }
        let dims = ConvDims { n, c_in: c, h, w, c_out: o, kh, kw, stride, pad, groups };
        let (ho, wo) = (dims.out_h(), dims.out_w());
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        kernels::conv2d_fwd(tx.data(), tk.data(), out.data_mut(), dims);
        if let Some(b) = bias {
            kernels::add_channel_bias(out.data_mut(), self.value(b).data(), n, o, ho * wo);
        }
        Ok(self.push_op(out, Op::Conv2d { x, k, bias, dims }))
    }

    /// Transposed conv, kernel [Cin, Cout, kh, kw]:
    /// out spatial = (in − 1)·stride − 2·pad + k. Adjoint of the matching conv.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 4 || tk.rank() != 4 {
            return Err(Error::shape("conv_transpose2d", format!("x {:?}, k {:?}", tx.shape(), tk.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (kc, o, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kc != c {
            return Err(Error::shape("conv_transpose2d", format!("kernel in-channels {kc} vs input C={c}")));
        }
        if stride == 0 || (h - 1) * stride + kh < 2 * pad + 1 {
            return Err(Error::shape("conv_transpose2d", format!("degenerate output for {h}x{w}, k{kh} s{stride} p{pad}")));
        }
        let ho = (h - 1) * stride + kh - 2 * pad;
        let wo = (w - 1) * stride + kw - 2 * pad;
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [o] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?} vs out channels {o}", tb.shape())));
            }
        }
        // Geometry of the conv this op is the adjoint of.
        let dims = ConvDims { n, c_in: o, h: ho, w: wo, c_out: c, kh, kw, stride, pad, groups: 1 };
        debug_assert_eq!((dims.out_h(), dims.out_w()), (h, w));
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        kernels::conv2d_bwd_x(tx.data(), tk.data(), out.data_mut(), dims);
        if let Some(b) = bias {
            kernels::add_channel_bias(out.data_mut(), self.value(b).data(), n, o, ho * wo);
        }
        Ok(self.push_op(out, Op::ConvT2d { x, k, bias, dims }))
    }

    /// Affine map along the last axis: x[..., Din] · w[Din, Dout] + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() < 1 || tw.rank() != 2 {
            return Err(Error::shape("linear", format!("x {:?}, w {:?}", tx.shape(), tw.shape())));
        }
        let din = *tx.shape().last().unwrap();
        if tw.shape()[0] != din {
            return Err(Error::shape("linear", format!("x last dim {din} vs w rows {}", tw.shape()[0])));
        }
        let dout = tw.shape()[1];
        if let Some(bv) = b {
            if self.value(bv).shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} vs Dout {dout}", self.value(bv).shape())));
            }
        }
        let rows = tx.numel() / din;
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut data = vec![T::ZERO; rows * dout];
        kernels::matmul(tx.data(), tw.data(), &mut data, rows, din, dout);
        if let Some(bv) = b {
            let tb = self.value(bv);
            for row in data.chunks_exact_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(tb.data()) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(value, Op::Linear { x, w, b }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push_op(value, Op::Gelu { x })
    }

    /// Normalize over one axis (mean 0, var 1, then per-position affine with
    /// gamma/beta of length shape[axis]).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::shape("layer_norm", format!("axis {axis} of rank {}", tx.rank())));
        }
        let l = tx.shape()[axis];
        if l == 0 {
            return Err(Error::shape("layer_norm", "normalized axis has length 0"));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [l] || tb.shape() != [l] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs axis length {l}", tg.shape(), tb.shape()),
            ));
        }
        let (inner, rows) = axis_geometry(tx.shape(), axis);
        let mut out = vec![T::ZERO; tx.numel()];
        let mut mean = vec![T::ZERO; rows];
        let mut invstd = vec![T::ZERO; rows];
        let inv_l = T::from_f64(1.0 / l as f64);
        let eps = T::from_f64(NORM_EPS);
        let xd = tx.data();
        let (gd, bd) = (tg.data().to_vec(), tb.data().to_vec());
        for r in 0..rows {
            let base = row_base(r, l, inner);
            let mut m = T::ZERO;
            for j in 0..l {
                m += xd[base + j * inner];
            }
            m *= inv_l;
            let mut v = T::ZERO;
            for j in 0..l {
                let d = xd[base + j * inner] - m;
                v += d * d;
            }
            v *= inv_l;
            let inv = T::ONE / (v + eps).sqrt();
            mean[r] = m;
            invstd[r] = inv;
            for j in 0..l {
                let xhat = (xd[base + j * inner] - m) * inv;
                out[base + j * inner] = gd[j] * xhat + bd[j];
            }
        }
        let value = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(value, Op::LayerNorm { x, gamma, beta, axis, stats: NormStats { mean, invstd } }))
    }

    /// Batch norm over (N, H, W) per channel of an [N,C,H,W] tensor.
    ///
    /// Train mode uses batch statistics and folds them into the running stats
    /// in place (biased variance, momentum 0.1 by convention of the caller);
    /// eval mode normalizes with the running stats and touches nothing.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        momentum: f64,
        train: bool,
    ) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(Error::shape("batch_norm", format!("need [N,C,H,W], got {:?}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if n * h * w == 0 {
            return Err(Error::shape("batch_norm", "normalized axis has length 0"));
        }
        for (name, var) in [("gamma", gamma), ("beta", beta)] {
            if self.value(var).shape() != [c] {
                return Err(Error::shape("batch_norm", format!("{name} {:?} vs C={c}", self.value(var).shape())));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("running stats must be [{c}]")));
        }
        let count = n * h * w;
        let inv_count = T::from_f64(1.0 / count as f64);
        let eps = T::from_f64(NORM_EPS);
        let hw = h * w;
        let xd = tx.data();
        let (mut mean, mut invstd) = (vec![T::ZERO; c], vec![T::ZERO; c]);
        if train {
            let mom = T::from_f64(momentum);
            let keep = T::from_f64(1.0 - momentum);
            for ch in 0..c {
                let mut m = T::ZERO;
                for b in 0..n {
                    let plane = &xd[(b * c + ch) * hw..][..hw];
                    for &v in plane {
                        m += v;
                    }
                }
                m *= inv_count;
                let mut var = T::ZERO;
                for b in 0..n {
                    let plane = &xd[(b * c + ch) * hw..][..hw];
                    for &v in plane {
                        let d = v - m;
                        var += d * d;
                    }
                }
                var *= inv_count;
                mean[ch] = m;
                invstd[ch] = T::ONE / (var + eps).sqrt();
                running_mean.data_mut()[ch] = keep * running_mean.data()[ch] + mom * m;
                running_var.data_mut()[ch] = keep * running_var.data()[ch] + mom * var;
            }
        } else {
            for ch in 0..c {
                mean[ch] = running_mean.data()[ch];
                invstd[ch] = T::ONE / (running_var.data()[ch] + eps).sqrt();
            }
        }
        let (gd, bd) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = vec![T::ZERO; tx.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (m, inv, g, be) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                for i in 0..hw {
                    out[base + i] = g * ((xd[base + i] - m) * inv) + be;
                }
            }
        }
        let value = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(value, Op::BatchNorm { x, gamma, beta, train, stats: NormStats { mean, invstd } }))
    }

    /// Mean over the batch of −log softmax(logits)[label]; max-subtraction
    /// stabilized. Returns a rank-0 scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {:?}", tl.shape())));
        }
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{n} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vec![T::ZERO; n * k];
        let mut loss = 0.0f64;
        for (row, (&label, prow)) in tl.data().chunks_exact(k).zip(labels.iter().zip(probs.chunks_exact_mut(k))) {
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut denom = T::ZERO;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - mx).exp();
                denom += *p;
            }
            let inv = T::ONE / denom;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            loss -= prow[label].to_f64().ln();
        }
        loss /= n as f64;
        let softmax = Tensor::from_vec(&[n, k], probs)?;
        let value = Tensor::scalar(T::from_f64(loss));
        Ok(self.push_op(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), softmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(Error::shape("global_avg_pool", format!("need [N,C,H,W], got {:?}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if h * w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut data = Vec::with_capacity(n * c);
        for plane in tx.data().chunks_exact(h * w) {
            let mut acc = T::ZERO;
            for &v in plane {
                acc += v;
            }
            data.push(acc * inv);
        }
        let value = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push_op(value, Op::GlobalAvgPool { x }))
    }

    /// out[b.., m, n] = a[b.., m, k] · bm[b.., k, n]; leading dims must match.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ra = ta.rank();
        if ra < 2 || tb.rank() != ra || ta.shape()[..ra - 2] != tb.shape()[..ra - 2] {
            return Err(Error::shape("matmul_batched", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k) = (ta.shape()[ra - 2], ta.shape()[ra - 1]);
        let (kb, n) = (tb.shape()[ra - 2], tb.shape()[ra - 1]);
        if k != kb {
            return Err(Error::shape("matmul_batched", format!("inner dims {k} vs {kb}")));
        }
        let batch: usize = ta.shape()[..ra - 2].iter().product();
        let mut data = vec![T::ZERO; batch * m * n];
        kernels::matmul_batched(ta.data(), tb.data(), &mut data, batch, m, k, n);
        let mut shape = ta.shape()[..ra - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(value, Op::MatmulBatched { a, b }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {:?} for rank {r}", perm)));
        }
        let value = permute_copy(tx, perm)?;
        Ok(self.push_op(value, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape { x }))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(Error::shape("softmax_last", "rank-0 input"));
        }
        let l = *tx.shape().last().unwrap();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(l) {
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.max(v);
            }
            let mut denom = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                denom += *v;
            }
            let inv = T::ONE / denom;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push_op(value, Op::SoftmaxLast { x }))
    }

    /// One Haar level, subbands concatenated on the channel axis:
    /// [N,C,H,W] -> [N,4C,H/2,W/2] ordered LL, LH, HL, HH.
    pub fn dwt_concat(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(Error::shape("dwt_concat", format!("need [N,C,H,W], got {:?}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("dwt_concat", format!("spatial dims {h}x{w} must be even (pad first)")));
        }
        let (hh, ww) = (h / 2, w / 2);
        let mut out = vec![T::ZERO; n * 4 * c * hh * ww];
        for b in 0..n {
            for ch in 0..c {
                let plane = &tx.data()[(b * c + ch) * h * w..][..h * w];
                let mut sub = [
                    vec![T::ZERO; hh * ww],
                    vec![T::ZERO; hh * ww],
                    vec![T::ZERO; hh * ww],
                    vec![T::ZERO; hh * ww],
                ];
                spectral::haar_plane_fwd(plane, w, &mut sub);
                for (s, buf) in sub.iter().enumerate() {
                    let dst = (b * 4 * c + s * c + ch) * hh * ww;
                    out[dst..dst + hh * ww].copy_from_slice(buf);
                }
            }
        }
        let value = Tensor::from_vec(&[n, 4 * c, hh, ww], out)?;
        Ok(self.push_op(value, Op::DwtConcat { x }))
    }

    /// Real part of the unnormalized spatial 2D DFT, per channel.
    pub fn fourier_mix(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(Error::shape("fourier_mix", format!("need [N,C,H,W], got {:?}", tx.shape())));
        }
        let (h, w) = (tx.shape()[2], tx.shape()[3]);
        if h == 0 || w == 0 {
            return Err(Error::shape("fourier_mix", "empty spatial extent"));
        }
        let tables = DftTables::new(h, w);
        let mut out = vec![T::ZERO; tx.numel()];
        for (oplane, xplane) in out.chunks_exact_mut(h * w).zip(tx.data().chunks_exact(h * w)) {
            let (re, _im) = spectral::dft2_plane(xplane, h, w, &tables);
            oplane.copy_from_slice(&re);
        }
        let value = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(value, Op::FourierMixReal { x }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes nothing; the tape can
    /// still be read afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let dy = grads[idx].take().unwrap();
            self.backprop_node(idx, &dy, &mut grads);
            // Interior grads are dropped once consumed; leaves keep theirs.
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, upd: &mut dyn FnMut(&mut Tensor<T>)| {
            if !self.requires(v) {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.value(v).shape()));
            }
            upd(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(grads, v, &mut |g| {
                        for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                            *o += d;
                        }
                    });
                }
            }
            Op::AddBroadcast { x, p } => {
                acc(grads, *x, &mut |g| {
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                });
                let row = self.value(*p).numel();
                acc(grads, *p, &mut |g| {
                    for chunk in dy.data().chunks_exact(row) {
                        for (o, &d) in g.data_mut().iter_mut().zip(chunk) {
                            *o += d;
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                let cv = T::from_f64(*c);
                acc(grads, *x, &mut |g| {
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += cv * d;
                    }
                });
            }
            Op::MulElem { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, &mut |g| {
                    for ((o, &d), &bv) in g.data_mut().iter_mut().zip(dy.data()).zip(tb.data()) {
                        *o += d * bv;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for ((o, &d), &av) in g.data_mut().iter_mut().zip(dy.data()).zip(ta.data()) {
                        *o += d * av;
                    }
                });
            }
            Op::SumAll { x } => {
                let d = dy.item();
                acc(grads, *x, &mut |g| {
                    for o in g.data_mut() {
                        *o += d;
                    }
                });
            }
            Op::SliceChannels { x, start, len } => {
                let tx = self.value(*x);
                let (n, c) = (tx.shape()[0], tx.shape()[1]);
                let inner: usize = tx.shape()[2..].iter().product();
                acc(grads, *x, &mut |g| {
                    for b in 0..n {
                        let dst = &mut g.data_mut()[(b * c + start) * inner..(b * c + start + len) * inner];
                        let src = &dy.data()[b * len * inner..(b + 1) * len * inner];
                        for (o, &d) in dst.iter_mut().zip(src) {
                            *o += d;
                        }
                    }
                });
            }
            Op::Conv2d { x, k, bias, dims } => {
                let d = *dims;
                let (tx, tk) = (self.value(*x), self.value(*k));
                acc(grads, *x, &mut |g| kernels::conv2d_bwd_x(dy.data(), tk.data(), g.data_mut(), d));
                acc(grads, *k, &mut |g| kernels::conv2d_bwd_k(tx.data(), dy.data(), g.data_mut(), d));
                if let Some(b) = bias {
                    acc(grads, *b, &mut |g| {
                        kernels::channel_bias_grad(dy.data(), g.data_mut(), d.n, d.c_out, d.out_h() * d.out_w());
                    });
                }
            }
            Op::ConvT2d { x, k, bias, dims } => {
                // Forward was conv2d_bwd_x, so dx is a plain conv of dy and dk
                // the usual kernel grad with the roles of x and y swapped.
                let d = *dims;
                let (tx, tk) = (self.value(*x), self.value(*k));
                acc(grads, *x, &mut |g| kernels::conv2d_fwd(dy.data(), tk.data(), g.data_mut(), d));
                acc(grads, *k, &mut |g| kernels::conv2d_bwd_k(dy.data(), tx.data(), g.data_mut(), d));
                if let Some(b) = bias {
                    let o = self.value(*b).numel();
                    let s = dy.numel() / (d.n * o);
                    acc(grads, *b, &mut |g| kernels::channel_bias_grad(dy.data(), g.data_mut(), d.n, o, s));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let din = *tx.shape().last().unwrap();
                let dout = tw.shape()[1];
                let rows = tx.numel() / din;
                acc(grads, *x, &mut |g| {
                    let wt = transpose(tw.data(), din, dout);
                    kernels::matmul(dy.data(), &wt, g.data_mut(), rows, dout, din);
                });
                acc(grads, *w, &mut |g| {
                    let xt = transpose(tx.data(), rows, din);
                    kernels::matmul(&xt, dy.data(), g.data_mut(), din, rows, dout);
                });
                if let Some(bv) = b {
                    acc(grads, *bv, &mut |g| {
                        for row in dy.data().chunks_exact(dout) {
                            for (o, &d) in g.data_mut().iter_mut().zip(row) {
                                *o += d;
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                let tx = self.value(*x);
                acc(grads, *x, &mut |g| {
                    for ((o, &d), &xv) in g.data_mut().iter_mut().zip(dy.data()).zip(tx.data()) {
                        *o += d * gelu_grad_scalar(xv);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, axis, stats } => {
                let tx = self.value(*x);
                let l = tx.shape()[*axis];
                let (inner, rows) = axis_geometry(tx.shape(), *axis);
                let gd = self.value(*gamma).data().to_vec();
                let inv_l = T::from_f64(1.0 / l as f64);
                acc(grads, *x, &mut |g| {
                    for r in 0..rows {
                        let base = row_base(r, l, inner);
                        let (m, inv) = (stats.mean[r], stats.invstd[r]);
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for j in 0..l {
                            let xhat = (tx.data()[base + j * inner] - m) * inv;
                            let dxhat = dy.data()[base + j * inner] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        sum_dxhat *= inv_l;
                        sum_dxhat_xhat *= inv_l;
                        for j in 0..l {
                            let xhat = (tx.data()[base + j * inner] - m) * inv;
                            let dxhat = dy.data()[base + j * inner] * gd[j];
                            g.data_mut()[base + j * inner] += inv * (dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                });
                acc(grads, *gamma, &mut |g| {
                    for r in 0..rows {
                        let base = row_base(r, l, inner);
                        let (m, inv) = (stats.mean[r], stats.invstd[r]);
                        for j in 0..l {
                            let xhat = (tx.data()[base + j * inner] - m) * inv;
                            g.data_mut()[j] += dy.data()[base + j * inner] * xhat;
                        }
                    }
                });
                acc(grads, *beta, &mut |g| {
                    for r in 0..rows {
                        let base = row_base(r, l, inner);
                        for j in 0..l {
                            g.data_mut()[j] += dy.data()[base + j * inner];
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, train, stats } => {
                let tx = self.value(*x);
                let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let hw = h * w;
                let gd = self.value(*gamma).data().to_vec();
                let inv_count = T::from_f64(1.0 / (n * hw) as f64);
                acc(grads, *x, &mut |g| {
                    for ch in 0..c {
                        let (m, inv, ga) = (stats.mean[ch], stats.invstd[ch], gd[ch]);
                        if *train {
                            // Batch statistics depend on x, so the full rule.
                            let mut sum_dy = T::ZERO;
                            let mut sum_dy_xhat = T::ZERO;
                            for b in 0..n {
                                let base = (b * c + ch) * hw;
                                for i in 0..hw {
                                    let d = dy.data()[base + i];
                                    sum_dy += d;
                                    sum_dy_xhat += d * (tx.data()[base + i] - m) * inv;
                                }
                            }
                            sum_dy *= inv_count;
                            sum_dy_xhat *= inv_count;
                            for b in 0..n {
                                let base = (b * c + ch) * hw;
                                for i in 0..hw {
                                    let xhat = (tx.data()[base + i] - m) * inv;
                                    let d = dy.data()[base + i];
                                    g.data_mut()[base + i] += ga * inv * (d - sum_dy - xhat * sum_dy_xhat);
                                }
                            }
                        } else {
                            // Running stats are constants.
                            let k = ga * inv;
                            for b in 0..n {
                                let base = (b * c + ch) * hw;
                                for i in 0..hw {
                                    g.data_mut()[base + i] += k * dy.data()[base + i];
                                }
                            }
                        }
                    }
                });
                acc(grads, *gamma, &mut |g| {
                    for ch in 0..c {
                        let (m, inv) = (stats.mean[ch], stats.invstd[ch]);
                        let mut s = T::ZERO;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for i in 0..hw {
                                s += dy.data()[base + i] * (tx.data()[base + i] - m) * inv;
                            }
                        }
                        g.data_mut()[ch] += s;
                    }
                });
                acc(grads, *beta, &mut |g| {
                    for ch in 0..c {
                        let mut s = T::ZERO;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for i in 0..hw {
                                s += dy.data()[base + i];
                            }
                        }
                        g.data_mut()[ch] += s;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, softmax } => {
                let (n, k) = (softmax.shape()[0], softmax.shape()[1]);
                let scale = dy.item() * T::from_f64(1.0 / n as f64);
                acc(grads, *logits, &mut |g| {
                    for ((grow, prow), &label) in
                        g.data_mut().chunks_exact_mut(k).zip(softmax.data().chunks_exact(k)).zip(labels)
                    {
                        for (j, (o, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == label { T::ONE } else { T::ZERO };
                            *o += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let tx = self.value(*x);
                let (h, w) = (tx.shape()[2], tx.shape()[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                acc(grads, *x, &mut |g| {
                    for (plane, &d) in g.data_mut().chunks_exact_mut(h * w).zip(dy.data()) {
                        let dv = d * inv;
                        for o in plane {
                            *o += dv;
                        }
                    }
                });
            }
            Op::MatmulBatched { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ra = ta.rank();
                let (m, k) = (ta.shape()[ra - 2], ta.shape()[ra - 1]);
                let n = tb.shape()[ra - 1];
                let batch: usize = ta.shape()[..ra - 2].iter().product();
                acc(grads, *a, &mut |g| {
                    for ((ga, dyb), bb) in g
                        .data_mut()
                        .chunks_exact_mut(m * k)
                        .zip(dy.data().chunks_exact(m * n))
                        .zip(tb.data().chunks_exact(k * n))
                    {
                        let bt = transpose(bb, k, n);
                        kernels::matmul(dyb, &bt, ga, m, n, k);
                    }
                });
                acc(grads, *b, &mut |g| {
                    for ((gb, dyb), ab) in g
                        .data_mut()
                        .chunks_exact_mut(k * n)
                        .zip(dy.data().chunks_exact(m * n))
                        .zip(ta.data().chunks_exact(m * k))
                    {
                        let at = transpose(ab, m, k);
                        kernels::matmul(&at, dyb, gb, k, m, n);
                    }
                });
                let _ = batch;
            }
            Op::Permute { x, perm } => {
                acc(grads, *x, &mut |g| {
                    let inv = invert_perm(perm);
                    let back = permute_copy(dy, &inv).expect("inverse permute");
                    for (o, &d) in g.data_mut().iter_mut().zip(back.data()) {
                        *o += d;
                    }
                });
            }
            Op::Reshape { x } => {
                acc(grads, *x, &mut |g| {
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                });
            }
            Op::SoftmaxLast { x } => {
                let s = &node.value;
                let l = *s.shape().last().unwrap();
                acc(grads, *x, &mut |g| {
                    for ((grow, srow), drow) in g
                        .data_mut()
                        .chunks_exact_mut(l)
                        .zip(s.data().chunks_exact(l))
                        .zip(dy.data().chunks_exact(l))
                    {
                        let mut dot = T::ZERO;
                        for (&sv, &dv) in srow.iter().zip(drow) {
                            dot += sv * dv;
                        }
                        for ((o, &sv), &dv) in grow.iter_mut().zip(srow).zip(drow) {
                            *o += sv * (dv - dot);
                        }
                    }
                });
            }
            Op::DwtConcat { x } => {
                let tx = self.value(*x);
                let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (hh, ww) = (h / 2, w / 2);
                acc(grads, *x, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let sub: [&[T]; 4] = std::array::from_fn(|s| {
                                &dy.data()[(b * 4 * c + s * c + ch) * hh * ww..][..hh * ww]
                            });
                            let mut plane = vec![T::ZERO; h * w];
                            spectral::haar_plane_inv(&sub, w, &mut plane);
                            let dst = &mut g.data_mut()[(b * c + ch) * h * w..][..h * w];
                            for (o, &d) in dst.iter_mut().zip(&plane) {
                                *o += d;
                            }
                        }
                    }
                });
            }
            Op::FourierMixReal { x } => {
                let tx = self.value(*x);
                let (h, w) = (tx.shape()[2], tx.shape()[3]);
                let tables = DftTables::new(h, w);
                acc(grads, *x, &mut |g| {
                    for (gplane, dplane) in g.data_mut().chunks_exact_mut(h * w).zip(dy.data().chunks_exact(h * w)) {
                        let back = spectral::cos_mix_plane(dplane, h, w, &tables);
                        for (o, &d) in gplane.iter_mut().zip(&back) {
                            *o += d;
                        }
                    }
                });
            }
        }
    }

    /// Activation/compute accounting over everything recorded so far.
    pub fn profile(&self) -> TapeProfile {
        let mut p = TapeProfile::default();
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            p.activation_elems += node.value.numel();
            p.mult_adds += self.op_mult_adds(node);
            if let Op::FourierMixReal { .. } = node.op {
                // Pass-1 real/imag planes plus the full real/imag spectrum.
                p.activation_elems += 4 * node.value.numel();
            }
        }
        p
    }

    fn op_mult_adds(&self, node: &Node<T>) -> usize {
        match &node.op {
            Op::Conv2d { dims, .. } => {
                dims.n * dims.c_out * dims.out_h() * dims.out_w() * (dims.c_in / dims.groups) * dims.kh * dims.kw
            }
            Op::ConvT2d { dims, .. } => {
                // Same MAC count as the conv it is the adjoint of.
                dims.n * dims.c_out * dims.out_h() * dims.out_w() * dims.c_in * dims.kh * dims.kw
            }
            Op::Linear { x, w, .. } => {
                let din = self.value(*w).shape()[0];
                let dout = self.value(*w).shape()[1];
                (self.value(*x).numel() / din) * din * dout
            }
            Op::MatmulBatched { a, b } => {
                let ta = self.value(*a);
                let ra = ta.rank();
                let k = ta.shape()[ra - 1];
                (ta.numel() / k) * k * self.value(*b).shape()[ra - 1]
            }
            Op::FourierMixReal { x } => {
                let tx = self.value(*x);
                let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                // Two pass-1 matmuls [H,W]x[W,W], four pass-2 [H,H]x[H,W].
                n * c * (2 * h * w * w + 4 * h * h * w)
            }
            _ => 0,
        }
    }
}

// ---- shared scalar math --------------------------------------------------

/// tanh-form GELU; exact erf is not needed at these tolerances.
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// For an axis of length L: elements of row r live at
/// row_base(r, L, inner) + j*inner for j in 0..L.
fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize) {
    let inner: usize = shape[axis + 1..].iter().product();
    let rows = shape.iter().product::<usize>() / shape[axis];
    (inner, rows)
}

fn row_base(r: usize, l: usize, inner: usize) -> usize {
    let pre = r / inner;
    let pos = r % inner;
    pre * l * inner + pos
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_copy<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = t.strides();
    // Stride in the input for each output axis.
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::ZERO; t.numel()];
    let r = out_shape.len();
    let mut coords = vec![0usize; r];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = t.data()[src];
        // Odometer increment over output coords, keeping src in sync.
        for ax in (0..r).rev() {
            coords[ax] += 1;
            src += gather[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            src -= gather[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fanout_accumulates_exactly() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        let mut tape = GradTape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[4, 2]), true);
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 0, 1]).unwrap();
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_large_margin_loss_vanishes() {
        let mut tape = GradTape::<f64>::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 2], vec![50.0, 0.0]).unwrap(), false);
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut tape = GradTape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 2]), false);
        assert!(tape.softmax_cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), false);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let w = tape.leaf(eye, false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
    }

    #[test]
    fn layer_norm_constant_row_is_beta() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 4], 3.0), false);
        let g = tape.leaf(Tensor::full(&[4], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.layer_norm(x, g, b, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "constant input must normalize to 0 before affine, got {v}");
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 0]), false);
        let g = tape.leaf(Tensor::zeros(&[0]), false);
        let b = tape.leaf(Tensor::zeros(&[0]), false);
        assert!(tape.layer_norm(x, g, b, 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.1, -2.0, 5.0, 1.0, 1.0, 1.0]).unwrap(), false);
        let s = tape.softmax_last(x).unwrap();
        for row in tape.value(s).data().chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), false);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn global_avg_pool_constant() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 4], 2.5), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(y_shape(&tape, y), vec![2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    fn y_shape(tape: &GradTape<f64>, v: Var) -> Vec<usize> {
        tape.value(v).shape().to_vec()
    }
}
