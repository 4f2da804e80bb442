//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order; `backward` walks it once in reverse.

use super::kernels::{
    col2im, conv_direct, conv_direct_input_grad, conv_direct_kernel_grad, gemm, im2col, ConvGeom,
    MatRef, DIRECT_MAX_COUT,
};
use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Hardtanh,
}

/// Batch statistics produced by a training-mode batchnorm, waiting to be
/// folded into the running averages.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub momentum: f32,
    pub batch_mean: Vec<f32>,
    pub batch_var_unbiased: Vec<f32>,
}

enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Act(Var, Activation),
    Sign(Var),
    Upsample2x(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Bce {
        pred: Var,
        target: Vec<f32>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Clamp applied to probabilities inside the logarithms of the BCE loss.
pub const BCE_EPS: f32 = 1e-7;

pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<(ParamId, Var)>>,
    mode: Mode,
    running_updates: Vec<RunningUpdate>,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            mode,
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf, once per tape. Frozen parameters and
    /// buffers are bound without gradient tracking.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some((_, v))) = self.param_vars.get(id.0) {
            return *v;
        }
        let p = store.get(id);
        let trainable = p.kind == ParamKind::Weight && !p.frozen;
        let v = self.leaf(p.value.clone(), trainable);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some((id, v));
        v
    }

    /// Gradients of every bound parameter, indexed by `ParamId`.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for (id, v) in self.param_vars.iter().flatten() {
            if id.0 < out.len() {
                out[id.0] = self.grad(*v);
            }
        }
        out
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate> {
        std::mem::take(&mut self.running_updates)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `y[i, j] = Σ_k w[j, k] · x[i, k] + b[j]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "dense: input {xs:?} incompatible with weight {ws:?} (expected [batch, in] and [out, in])"
            )));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [out] {
                return Err(Error::shape(format!(
                    "dense: bias {:?} does not match {out} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let mut y = vec![0.0; batch * out];
        gemm(
            MatRef::row_major(self.value(x).data(), batch, inp),
            MatRef::transposed(self.value(w).data(), inp, out),
            &mut y,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&[batch, out], y)?, rg, Op::Dense { x, w, b }))
    }

    /// Cross-correlation of `[n, cin, h, w]` with `[cout, cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::shape(format!(
                "conv2d: input {xs:?} incompatible with kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("conv2d: non-positive output size"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d: bias length must equal output channels"));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let (kl, p) = (geom.patch_len(), geom.out_pixels());
        let direct = cout <= DIRECT_MAX_COUT;
        let mut cols = if direct { Vec::new() } else { vec![0.0; kl * p] };
        let mut y = vec![0.0; n * cout * p];
        {
            let xd = self.value(x).data();
            let kd = self.value(k).data();
            for s in 0..n {
                if direct {
                    let img = &xd[s * cin * h * w..(s + 1) * cin * h * w];
                    conv_direct(img, kd, &geom, cout, &mut y[s * cout * p..(s + 1) * cout * p]);
                    continue;
                }
                im2col(&xd[s * cin * h * w..(s + 1) * cin * h * w], &geom, &mut cols);
                gemm(
                    MatRef::row_major(kd, cout, kl),
                    MatRef::row_major(&cols, kl, p),
                    &mut y[s * cout * p..(s + 1) * cout * p],
                    0.0,
                );
            }
            if let Some(b) = b {
                let bias = self.value(b).data();
                for s in 0..n {
                    for (co, bb) in bias.iter().enumerate() {
                        y[(s * cout + co) * p..(s * cout + co + 1) * p]
                            .iter_mut()
                            .for_each(|v| *v += bb);
                    }
                }
            }
        }
        let mut deps = vec![x, k];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&[n, cout, oh, ow], y)?,
            rg,
            Op::Conv2d { x, k, b, geom },
        ))
    }

    /// Batch normalization over `[n, c]` or `[n, c, h, w]` (per channel).
    ///
    /// In train mode the batch statistics normalize the input and the running
    /// averages are scheduled for update; in eval mode the running averages
    /// are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        stat_ids: Option<(ParamId, ParamId)>,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::shape(format!("batchnorm: unsupported input rank {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (what, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.shape() != [c] {
                return Err(Error::shape(format!("batchnorm: {what} must have {c} entries")));
            }
        }
        if running.0.shape() != [c] || running.1.shape() != [c] {
            return Err(Error::shape("batchnorm: running stats must have one entry per channel"));
        }
        let train = self.mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::invalid(
                "batchnorm: training mode needs a batch of at least 2 samples",
            ));
        }
        let xd = self.value(x).data();
        let m = (n * spatial) as f64;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        if train {
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    s += xd[off..off + spatial].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    ss += xd[off..off + spatial]
                        .iter()
                        .map(|&v| (v as f64 - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu as f32;
                var[ch] = (ss / m) as f32;
            }
        } else {
            mean.copy_from_slice(running.0.data());
            var.copy_from_slice(running.1.data());
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut y = vec![0.0f32; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + bt[ch];
                }
            }
        }
        if train {
            if let Some((mean_id, var_id)) = stat_ids {
                let unbias = (m / (m - 1.0)) as f32;
                self.running_updates.push(RunningUpdate {
                    mean_id,
                    var_id,
                    momentum,
                    batch_mean: mean,
                    batch_var_unbiased: var.iter().map(|v| v * unbias).collect(),
                });
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&xs, y)?,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: train,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x);
        let f: fn(f32) -> f32 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Hardtanh => |v| v.clamp(-1.0, 1.0),
        };
        let y = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(y, rg, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Sign binarization with the clipped straight-through gradient.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let y = crate::binarize::sign_binarize(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, rg, Op::Sign(x))
    }

    /// Nearest-neighbour 2× upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x expects [n, c, h, w]"));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut y = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * 4 * h * w..(p + 1) * 4 * h * w];
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    dst[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], y)?,
            rg,
            Op::Upsample2x(x),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, rg, Op::Reshape(x)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(ta.shape(), y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(ta.shape(), y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(y, rg, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), rg, Op::Sum(x))
    }

    /// Mean per-element binary cross-entropy of `pred` against a fixed target.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(format!(
                "bce: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let in_unit = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(p) || !in_unit(target) {
            return Err(Error::invalid("bce: values must lie in [0, 1]"));
        }
        let loss = bce_mean(p.data(), target.data());
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "softmax_ce: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("softmax_ce: label {bad} out of 0..{k}")));
        }
        let probs = softmax_rows(t.data(), k);
        let loss = cross_entropy_mean(t.data(), k, labels);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates gradients from a scalar `loss` to every reachable node that
    /// requires them. Gradients accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_mean(pred: &[f32], target: &[f32]) -> f32 {
    let mut s = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
        let t = t as f64;
        s -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    (s / pred.len().max(1) as f64) as f32
}

pub(crate) fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = ((v - m) as f64).exp();
            *d = e as f32;
            z += e;
        }
        dst.iter_mut().for_each(|d| *d = (*d as f64 / z) as f32);
    }
    out
}

pub(crate) fn cross_entropy_mean(logits: &[f32], k: usize, labels: &[usize]) -> f32 {
    let mut s = 0.0f64;
    for (row, &l) in logits.chunks_exact(k).zip(labels) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        s += lse - row[l] as f64;
    }
    (s / labels.len().max(1) as f64) as f32
}

fn accumulate(nodes: &mut [Node], v: Var, delta: &[f32]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match node.grad.as_mut() {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => node.grad = Some(delta.to_vec()),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f32]) {
    match &node.op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let (batch, out) = (node.value.shape()[0], node.value.shape()[1]);
            let inp = nodes[x.0].value.shape()[1];
            if wants(nodes, *x) {
                let mut dx = vec![0.0; batch * inp];
                gemm(
                    MatRef::row_major(g, batch, out),
                    MatRef::row_major(nodes[w.0].value.data(), out, inp),
                    &mut dx,
                    0.0,
                );
                accumulate(nodes, *x, &dx);
            }
            if wants(nodes, *w) {
                let mut dw = vec![0.0; out * inp];
                gemm(
                    MatRef::transposed(g, out, batch),
                    MatRef::row_major(nodes[x.0].value.data(), batch, inp),
                    &mut dw,
                    0.0,
                );
                accumulate(nodes, *w, &dw);
            }
            if let Some(b) = b {
                if wants(nodes, *b) {
                    let mut db = vec![0.0; out];
                    for row in g.chunks_exact(out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(nodes, *b, &db);
                }
            }
        }
        Op::Conv2d { x, k, b, geom } => {
            let s = node.value.shape();
            let (n, cout) = (s[0], s[1]);
            let (kl, p) = (geom.patch_len(), geom.out_pixels());
            let img = geom.cin * geom.h * geom.w;
            let direct = cout <= DIRECT_MAX_COUT;
            if wants(nodes, *k) && direct {
                let xd = nodes[x.0].value.data();
                let mut dk = vec![0.0; cout * kl];
                for smp in 0..n {
                    let gs = &g[smp * cout * p..(smp + 1) * cout * p];
                    conv_direct_kernel_grad(&xd[smp * img..(smp + 1) * img], gs, geom, cout, &mut dk);
                }
                accumulate(nodes, *k, &dk);
            } else if wants(nodes, *k) {
                // Columns are rebuilt per sample rather than kept from the
                // forward pass, which would cost n times the memory.
                let xd = nodes[x.0].value.data();
                let mut cols = vec![0.0; kl * p];
                let mut dk = vec![0.0; cout * kl];
                for smp in 0..n {
                    im2col(&xd[smp * img..(smp + 1) * img], geom, &mut cols);
                    gemm(
                        MatRef::row_major(&g[smp * cout * p..(smp + 1) * cout * p], cout, p),
                        MatRef::transposed(&cols, p, kl),
                        &mut dk,
                        1.0,
                    );
                }
                accumulate(nodes, *k, &dk);
            }
            if let Some(b) = b {
                if wants(nodes, *b) {
                    let mut db = vec![0.0; cout];
                    for smp in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let off = (smp * cout + co) * p;
                            *d += g[off..off + p].iter().sum::<f32>();
                        }
                    }
                    accumulate(nodes, *b, &db);
                }
            }
            if wants(nodes, *x) && direct {
                let kd = nodes[k.0].value.data();
                let mut dx = vec![0.0; n * img];
                for smp in 0..n {
                    let gs = &g[smp * cout * p..(smp + 1) * cout * p];
                    conv_direct_input_grad(gs, kd, geom, cout, &mut dx[smp * img..(smp + 1) * img]);
                }
                accumulate(nodes, *x, &dx);
            } else if wants(nodes, *x) {
                let kd = nodes[k.0].value.data().to_vec();
                let mut dx = vec![0.0; n * img];
                let mut dcols = vec![0.0; kl * p];
                for smp in 0..n {
                    gemm(
                        MatRef::transposed(&kd, kl, cout),
                        MatRef::row_major(&g[smp * cout * p..(smp + 1) * cout * p], cout, p),
                        &mut dcols,
                        0.0,
                    );
                    col2im(&dcols, geom, &mut dx[smp * img..(smp + 1) * img]);
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = node.value.shape();
            let (n, c) = (s[0], s[1]);
            let spatial: usize = s[2..].iter().product();
            let m = (n * spatial) as f32;
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    for i in off..off + spatial {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            if wants(nodes, *x) {
                let gam = nodes[gamma.0].value.data().to_vec();
                let mut dx = vec![0.0f32; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        let k = gam[ch] * inv_std[ch];
                        for i in off..off + spatial {
                            dx[i] = if *batch_stats {
                                k / m * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                accumulate(nodes, *x, &dx);
            }
            accumulate(nodes, *gamma, &dgamma);
            accumulate(nodes, *beta, &dbeta);
        }
        Op::Act(x, kind) => {
            let y = node.value.data();
            let xin = nodes[x.0].value.data();
            let dx: Vec<f32> = match kind {
                Activation::Relu => g
                    .iter()
                    .zip(xin)
                    .map(|(gg, &v)| if v > 0.0 { *gg } else { 0.0 })
                    .collect(),
                Activation::Sigmoid => g.iter().zip(y).map(|(gg, s)| gg * s * (1.0 - s)).collect(),
                Activation::Hardtanh => g
                    .iter()
                    .zip(xin)
                    .map(|(gg, &v)| if (-1.0..=1.0).contains(&v) { *gg } else { 0.0 })
                    .collect(),
            };
            accumulate(nodes, *x, &dx);
        }
        Op::Sign(x) => {
            let dx = crate::binarize::ste_backward_slice(g, nodes[x.0].value.data());
            accumulate(nodes, *x, &dx);
        }
        Op::Upsample2x(x) => {
            let s = nodes[x.0].value.shape().to_vec();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut dx = vec![0.0; nc * h * w];
            for p in 0..nc {
                let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        dst[(oy / 2) * w + ox / 2] += src[oy * 2 * w + ox];
                    }
                }
            }
            accumulate(nodes, *x, &dx);
        }
        Op::Reshape(x) => accumulate(nodes, *x, g),
        Op::Add(a, b) => {
            accumulate(nodes, *a, g);
            accumulate(nodes, *b, g);
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let d: Vec<f32> = g.iter().zip(nodes[b.0].value.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, *a, &d);
            }
            if wants(nodes, *b) {
                let d: Vec<f32> = g.iter().zip(nodes[a.0].value.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, *b, &d);
            }
        }
        Op::Scale(x, c) => {
            let d: Vec<f32> = g.iter().map(|v| v * c).collect();
            accumulate(nodes, *x, &d);
        }
        Op::Sum(x) => {
            let d = vec![g[0]; nodes[x.0].value.len()];
            accumulate(nodes, *x, &d);
        }
        Op::Bce { pred, target } => {
            let p = nodes[pred.0].value.data();
            let scale = g[0] / p.len() as f32;
            let d: Vec<f32> = p
                .iter()
                .zip(target)
                .map(|(&pp, &t)| {
                    let pc = pp.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    scale * (pc - t) / (pc * (1.0 - pc))
                })
                .collect();
            accumulate(nodes, *pred, &d);
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            let k = nodes[logits.0].value.shape()[1];
            let scale = g[0] / labels.len() as f32;
            let mut d = probs.clone();
            for (row, &l) in d.chunks_exact_mut(k).zip(labels) {
                row[l] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            accumulate(nodes, *logits, &d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.leaf(t(&[1, 2], &[1.0, 1.0]), false);
        let w = tape.leaf(t(&[1, 2], &[1.0, 1.0]), false);
        let b = tape.leaf(t(&[1], &[3.0]), false);
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn dense_rejects_mismatch() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let w = tape.leaf(Tensor::zeros(&[4, 2]), false);
        let err = tape.dense(x, w, None).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn conv_ones_and_delta_kernel() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);

        let img = Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f32 * 0.3).sin());
        let x = tape.leaf(img.clone(), false);
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = tape.leaf(t(&[1, 1, 3, 3], &delta), false);
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]), false);
        assert!(tape.conv2d(x, k, None, 1, 0).is_err());
        assert!(tape.conv2d(x, k, None, 1, 1).is_ok());
    }

    fn bn(tape: &mut Tape, x: Tensor, gamma: f32, beta: f32) -> Result<Var> {
        let c = x.shape()[1];
        let x = tape.leaf(x, false);
        let g = tape.leaf(Tensor::full(&[c], gamma), false);
        let b = tape.leaf(Tensor::full(&[c], beta), false);
        let rm = Tensor::zeros(&[c]);
        let rv = Tensor::full(&[c], 1.0);
        tape.batchnorm(x, g, b, (&rm, &rv), None, 0.1, 1e-5)
    }

    #[test]
    fn batchnorm_cases() {
        let mut tape = Tape::new(Mode::Train);
        let y = bn(&mut tape, t(&[2, 1], &[1.0, -1.0]), 1.0, 0.0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 1.0).abs() < 1e-4, "{v:?}");

        let y = bn(&mut tape, Tensor::from_fn(&[3, 2], |i| i as f32), 0.0, 5.0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));

        let err = bn(&mut tape, t(&[1, 2], &[1.0, 2.0]), 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }

    #[test]
    fn batchnorm_statistics_of_random_batch() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[64, 5], |_| rng.gen_range(-3.0..7.0));
        let mut tape = Tape::new(Mode::Train);
        let y = bn(&mut tape, x, 1.0, 0.0).unwrap();
        let v = tape.value(y).data();
        for f in 0..5 {
            let col: Vec<f64> = (0..64).map(|b| v[b * 5 + f] as f64).collect();
            let mu = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|c| (c - mu).powi(2)).sum::<f64>() / 64.0;
            assert!(mu.abs() < 1e-5, "mean {mu}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(t(&[4], &[-2.0, 3.0, 0.0, -0.5]), false);
        let r = tape.relu(x);
        assert_eq!(&tape.value(r).data()[..2], &[0.0, 3.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        let x2 = tape.leaf(t(&[2], &[2.0, -0.5]), false);
        let h = tape.activation(x2, Activation::Hardtanh);
        assert_eq!(tape.value(h).data(), &[1.0, -0.5]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]), false);
        let w = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1), true);
        let y = tape.dense(x, w, None).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let g = tape.grad(w).unwrap();
        assert_eq!(g.data(), &[0.0, 2.5, 7.0, 0.0, 2.5, 7.0]);

        let mut tape = Tape::new(Mode::Train);
        let xv = t(&[3], &[1.5, -2.0, 0.25]);
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), xv);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn bce_values() {
        let mut tape = Tape::new(Mode::Eval);
        let target = t(&[4], &[0.0, 1.0, 1.0, 0.0]);
        let p = tape.leaf(target.clone(), false);
        let l = tape.bce(p, &target).unwrap();
        assert!(tape.value(l).data()[0] <= 1e-6);

        let p = tape.leaf(Tensor::full(&[4], 0.5), false);
        let l = tape.bce(p, &target).unwrap();
        assert!((tape.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);

        let p = tape.leaf(Tensor::full(&[4], 1.5), false);
        assert!(tape.bce(p, &target).is_err());
    }
}
