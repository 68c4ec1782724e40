//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node order is already a topological
//! order and `backward` is a single reverse sweep.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, NnError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Running mean/variance of a batch-norm layer, borrowed mutably for train-mode updates.
pub struct RunningStats<'a> {
    pub mean: &'a mut [f64],
    pub var: &'a mut [f64],
    pub momentum: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Conv1d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        layout: (usize, usize, usize),
        mode: Mode,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<Option<usize>>,
        classes: usize,
        count: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
    KlToVar {
        logvar: Var,
        var_target: f64,
    },
    Reparam {
        mean: Var,
        logvar: Var,
        eps: Vec<f64>,
    },
    GradReverse {
        x: Var,
        lambda: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    ci: usize,
    len: usize,
    co: usize,
    kw: usize,
    out_len: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: values, op provenance and (after `backward`) gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(String, ParamId, Var)>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(op))
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `[n, C]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return dim_err(format!("softmax expects [n, C], got {:?}", logits.shape()));
    }
    let c = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can be reused for the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.bindings.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, _, v)) = self
            .bindings
            .iter()
            .find(|(k, i, _)| *i == id && k == store.key())
        {
            return v;
        }
        let entry = store.entry(id);
        let v = self.leaf(entry.value.clone(), entry.trainable);
        self.bindings.push((store.key().to_string(), id, v));
        v
    }

    /// Gradients of every bound parameter of `store` from the last `backward`.
    pub fn grads_for(&self, store: &ParamStore) -> Grads {
        let mut grads = Grads::zeros_like(store);
        for (key, id, v) in &self.bindings {
            if key == store.key() {
                if let Some(g) = self.grad(*v) {
                    grads.set(*id, g.to_vec());
                }
            }
        }
        grads
    }

    /// `x[n,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return dim_err(format!("linear: x {xs:?}, W {ws:?}, b {bs:?}"));
        }
        let (n, fan_in, fan_out) = (xs[0], ws[0], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * fan_out];
        for i in 0..n {
            let row = &mut out[i * fan_out..(i + 1) * fan_out];
            row.copy_from_slice(bd);
            for k in 0..fan_in {
                let a = xd[i * fan_in + k];
                if a == 0.0 {
                    continue;
                }
                let wrow = &wd[k * fan_out..(k + 1) * fan_out];
                for (o, wv) in row.iter_mut().zip(wrow) {
                    *o += a * wv;
                }
            }
        }
        let value = Tensor::new(vec![n, fan_out], out)?;
        check_finite("linear", &value)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                n,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    /// Valid (unpadded) cross-correlation of `x[n,ci,L]` with `k[co,ci,kw]`.
    pub fn conv1d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[1] != ks[1] {
            return dim_err(format!("conv1d: x {xs:?}, kernels {ks:?}"));
        }
        if stride == 0 {
            return Err(NnError::Config("conv1d stride must be >= 1".into()));
        }
        let (n, ci, len, co, kw) = (xs[0], xs[1], xs[2], ks[0], ks[2]);
        if kw == 0 || kw > len {
            return dim_err(format!("conv1d: kernel width {kw} exceeds length {len}"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [co] {
                return dim_err("conv1d: bias shape");
            }
        }
        let out_len = (len - kw) / stride + 1;
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let mut out = vec![0.0; n * co * out_len];
        for s in 0..n {
            for o in 0..co {
                let y = &mut out[(s * co + o) * out_len..(s * co + o + 1) * out_len];
                if let Some(b) = bias {
                    y.fill(self.nodes[b.0].value.data()[o]);
                }
                for c in 0..ci {
                    let xrow = &xd[(s * ci + c) * len..(s * ci + c + 1) * len];
                    for j in 0..kw {
                        let kv = kd[(o * ci + c) * kw + j];
                        if stride == 1 {
                            for (yt, xv) in y.iter_mut().zip(&xrow[j..j + out_len]) {
                                *yt += kv * xv;
                            }
                        } else {
                            for (t, yt) in y.iter_mut().enumerate() {
                                *yt += kv * xrow[t * stride + j];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, co, out_len], out)?;
        check_finite("conv1d", &value)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                k,
                bias,
                stride,
                dims: ConvDims {
                    n,
                    ci,
                    len,
                    co,
                    kw,
                    out_len,
                },
            },
            rg,
        ))
    }

    /// Batch normalization over the batch (and length) axes of `[n,c]` or `[n,c,L]`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, l) = match xs.as_slice() {
            [n, c] => (*n, *c, 1),
            [n, c, l] => (*n, *c, *l),
            _ => return dim_err(format!("batchnorm: unsupported shape {xs:?}")),
        };
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || stats.mean.len() != c
            || stats.var.len() != c
        {
            return dim_err("batchnorm: parameter shape");
        }
        if mode == Mode::Train && n < 2 {
            return Err(NnError::Config(
                "batchnorm needs batch size >= 2 in train mode".into(),
            ));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let m = (n * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        mean[ch] += xd[base..base + l].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        var[ch] += xd[base..base + l]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mean[ch];
                    stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * var[ch];
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(stats.mean);
                var.copy_from_slice(stats.var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                for i in base..base + l {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        check_finite("batchnorm", &value)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout: (n, c, l),
                mode,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        check_finite("sigmoid", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sigmoid(x), rg))
    }

    /// Max pooling over the last axis of `[n,c,L]`; ties resolve to the first index.
    pub fn maxpool1d(&mut self, x: Var, width: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return dim_err(format!("maxpool1d expects [n,c,L], got {xs:?}"));
        }
        if stride == 0 {
            return Err(NnError::Config("maxpool1d stride must be >= 1".into()));
        }
        let (n, c, len) = (xs[0], xs[1], xs[2]);
        if width == 0 || width > len {
            return dim_err(format!("maxpool1d: width {width} exceeds length {len}"));
        }
        let out_len = (len - width) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_len);
        let mut argmax = Vec::with_capacity(n * c * out_len);
        for row in 0..n * c {
            let base = row * len;
            for t in 0..out_len {
                let start = base + t * stride;
                let mut best = start;
                for i in start + 1..start + width {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![n, c, out_len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// Mean softmax cross-entropy over every row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let labels: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
        self.softmax_cross_entropy_masked(logits, &labels)
    }

    /// Mean softmax cross-entropy over the rows whose label is `Some`.
    pub fn softmax_cross_entropy_masked(
        &mut self,
        logits: Var,
        labels: &[Option<usize>],
    ) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return dim_err(format!(
                "cross-entropy: logits {ls:?} for {} labels",
                labels.len()
            ));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().flatten().find(|&&l| l >= classes) {
            return Err(NnError::Label {
                label: bad,
                classes,
            });
        }
        let count = labels.iter().flatten().count();
        if count == 0 {
            return Err(NnError::Usage("cross-entropy over zero labeled rows".into()));
        }
        let probs = softmax_rows(self.value(logits))?.into_data();
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for (i, label) in labels.iter().enumerate() {
            if let Some(y) = label {
                let row = &ld[i * classes..(i + 1) * classes];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[*y];
            }
        }
        let value = Tensor::scalar(total / count as f64);
        check_finite("softmax_cross_entropy", &value)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
                count,
            },
            rg,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.value(a), self.value(b));
        if ad.shape() != bd.shape() {
            return dim_err(format!("mse: {:?} vs {:?}", ad.shape(), bd.shape()));
        }
        let n = ad.numel().max(1) as f64;
        let s: f64 = ad
            .data()
            .iter()
            .zip(bd.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(s / n);
        check_finite("mse", &value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b }, rg))
    }

    /// Mean squared value, i.e. `mse(a, 0)`.
    pub fn mse_to_zero(&mut self, a: Var) -> Result<Var> {
        let zeros = Tensor::zeros(self.value(a).shape());
        let z = self.constant(zeros);
        self.mse(a, z)
    }

    /// Mean over elements of `KL(N(·, exp(logvar)) || N(·, var_target))` restricted to the variance term.
    pub fn gaussian_kl_to_var(&mut self, logvar: Var, var_target: f64) -> Result<Var> {
        if !(var_target > 0.0) || !var_target.is_finite() {
            return Err(NnError::Config(format!(
                "var_target must be positive, got {var_target}"
            )));
        }
        let t = self.value(logvar);
        let n = t.numel().max(1) as f64;
        let ln_t = var_target.ln();
        let s: f64 = t
            .data()
            .iter()
            .map(|&lv| 0.5 * ((lv.exp()) / var_target - 1.0 - (lv - ln_t)))
            .sum();
        let value = Tensor::scalar(s / n);
        check_finite("gaussian_kl_to_var", &value)?;
        let rg = self.rg(&[logvar]);
        Ok(self.push(value, Op::KlToVar { logvar, var_target }, rg))
    }

    /// `mean + exp(logvar / 2) * eps` with externally supplied noise.
    pub fn reparam(&mut self, mean: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        let (m, lv) = (self.value(mean), self.value(logvar));
        if m.shape() != lv.shape() || m.shape() != eps.shape() {
            return dim_err(format!(
                "reparam: mean {:?}, logvar {:?}, eps {:?}",
                m.shape(),
                lv.shape(),
                eps.shape()
            ));
        }
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((mu, l), e)| mu + (0.5 * l).exp() * e)
            .collect();
        let value = Tensor::new(m.shape().to_vec(), data)?;
        check_finite("reparam", &value)?;
        let rg = self.rg(&[mean, logvar]);
        Ok(self.push(
            value,
            Op::Reparam {
                mean,
                logvar,
                eps: eps.into_data(),
            },
            rg,
        ))
    }

    /// Reparameterized sample drawing standard normal noise from `rng` in row-major order.
    pub fn reparam_sample<R: Rng + ?Sized>(
        &mut self,
        mean: Var,
        logvar: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = self.value(mean).shape().to_vec();
        let n: usize = shape.iter().product();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        self.reparam(mean, logvar, Tensor::new(shape, eps)?)
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(NnError::Config(format!(
                "gradient reversal lambda must be >= 0, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GradReverse { x, lambda }, rg))
    }

    /// `Σ weight · term` over scalar terms, summed left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item()?;
        }
        let value = Tensor::scalar(total);
        check_finite("weighted_sum", &value)?;
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(value, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Gathers rows of the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return dim_err(format!("select_rows: row {r} of {n}"));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let mut data = Vec::new();
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Propagates gradients from the scalar `loss` to every reachable node.
    ///
    /// Previous gradients are discarded first, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NnError::Usage(
                "backward on a tensor with no differentiable inputs".into(),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Contributions are computed against immutable node data, then accumulated.
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Linear {
                x,
                w,
                b,
                n,
                fan_in,
                fan_out,
            } => {
                let (xd, wd) = (val(x), val(w));
                if needs(x) {
                    let mut dx = vec![0.0; n * fan_in];
                    for s in 0..n {
                        let gy = &g[s * fan_out..(s + 1) * fan_out];
                        for k in 0..fan_in {
                            let wrow = &wd[k * fan_out..(k + 1) * fan_out];
                            dx[s * fan_in + k] = gy.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    out.push((x, dx));
                }
                if needs(w) {
                    let mut dw = vec![0.0; fan_in * fan_out];
                    for s in 0..n {
                        let gy = &g[s * fan_out..(s + 1) * fan_out];
                        for k in 0..fan_in {
                            let a = xd[s * fan_in + k];
                            if a == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[k * fan_out..(k + 1) * fan_out];
                            for (d, gv) in drow.iter_mut().zip(gy) {
                                *d += a * gv;
                            }
                        }
                    }
                    out.push((w, dw));
                }
                if needs(b) {
                    let mut db = vec![0.0; fan_out];
                    for gy in g.chunks(fan_out) {
                        db.iter_mut().zip(gy).for_each(|(d, v)| *d += v);
                    }
                    out.push((b, db));
                }
            }
            &Op::Conv1d {
                x,
                k,
                bias,
                stride,
                dims,
            } => {
                let ConvDims {
                    n,
                    ci,
                    len,
                    co,
                    kw,
                    out_len,
                } = dims;
                let (xd, kd) = (val(x), val(k));
                let need_x = needs(x);
                let need_k = needs(k);
                let mut dx = if need_x { vec![0.0; n * ci * len] } else { Vec::new() };
                let mut dk = if need_k { vec![0.0; co * ci * kw] } else { Vec::new() };
                for s in 0..n {
                    for o in 0..co {
                        let gy = &g[(s * co + o) * out_len..(s * co + o + 1) * out_len];
                        for c in 0..ci {
                            let xoff = (s * ci + c) * len;
                            for j in 0..kw {
                                let kidx = (o * ci + c) * kw + j;
                                if need_k {
                                    let mut acc = 0.0;
                                    for (t, gv) in gy.iter().enumerate() {
                                        acc += gv * xd[xoff + t * stride + j];
                                    }
                                    dk[kidx] += acc;
                                }
                                if need_x {
                                    let kv = kd[kidx];
                                    for (t, gv) in gy.iter().enumerate() {
                                        dx[xoff + t * stride + j] += kv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    out.push((x, dx));
                }
                if need_k {
                    out.push((k, dk));
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    let mut db = vec![0.0; co];
                    for (row, gy) in g.chunks(out_len).enumerate() {
                        db[row % co] += gy.iter().sum::<f64>();
                    }
                    out.push((b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                mode,
            } => {
                let (n, c, l) = *layout;
                let gd = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        for idx in base..base + l {
                            dgamma[ch] += g[idx] * xhat[idx];
                            dbeta[ch] += g[idx];
                            let dxh = g[idx] * gd[ch];
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xhat[idx];
                        }
                    }
                }
                if needs(*x) {
                    let m = (n * l) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * l;
                            for idx in base..base + l {
                                let dxh = g[idx] * gd[ch];
                                dx[idx] = match mode {
                                    Mode::Train => {
                                        inv_std[ch] / m
                                            * (m * dxh
                                                - sum_dxhat[ch]
                                                - xhat[idx] * sum_dxhat_xhat[ch])
                                    }
                                    Mode::Eval => dxh * inv_std[ch],
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            &Op::Relu(x) => {
                let dx = val(x)
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                out.push((x, dx));
            }
            &Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(s, gv)| gv * s * (1.0 - s))
                    .collect();
                out.push((x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (&src, gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*x, dx));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                classes,
                count,
            } => {
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, label) in labels.iter().enumerate() {
                    if let Some(y) = label {
                        for c in 0..*classes {
                            let idx = r * classes + c;
                            let onehot = if c == *y { 1.0 } else { 0.0 };
                            dl[idx] = scale * (probs[idx] - onehot);
                        }
                    }
                }
                out.push((*logits, dl));
            }
            &Op::Mse { a, b } => {
                let (ad, bd) = (val(a), val(b));
                let scale = 2.0 * g[0] / ad.len().max(1) as f64;
                let da: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| scale * (x - y)).collect();
                if needs(b) {
                    out.push((b, da.iter().map(|v| -v).collect()));
                }
                out.push((a, da));
            }
            &Op::KlToVar { logvar, var_target } => {
                let lv = val(logvar);
                let scale = 0.5 * g[0] / lv.len().max(1) as f64;
                let d = lv
                    .iter()
                    .map(|l| scale * (l.exp() / var_target - 1.0))
                    .collect();
                out.push((logvar, d));
            }
            Op::Reparam { mean, logvar, eps } => {
                let lv = val(*logvar);
                let dlv = lv
                    .iter()
                    .zip(eps)
                    .zip(g)
                    .map(|((l, e), gv)| gv * 0.5 * (0.5 * l).exp() * e)
                    .collect();
                out.push((*mean, g.to_vec()));
                out.push((*logvar, dlv));
            }
            &Op::GradReverse { x, lambda } => {
                out.push((x, g.iter().map(|v| -lambda * v).collect()));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    out.push((v, vec![w * g[0]]));
                }
            }
            Op::SelectRows { x, rows } => {
                let src = &self.nodes[x.0].value;
                let stride = src.numel() / src.shape()[0].max(1);
                let mut dx = vec![0.0; src.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..stride {
                        dx[r * stride + j] += g[k * stride + j];
                    }
                }
                out.push((*x, dx));
            }
        }
        for (v, c) in out {
            self.accumulate(v, c);
        }
    }
}
