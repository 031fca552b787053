//! Recorded-operation tape with exact reverse-mode gradients.
//!
//! Every op appends a node holding its forward value; node inputs always
//! reference earlier nodes, so one reverse sweep visits the graph in valid
//! topological order. `backward` leaves the tape untouched and can be run
//! repeatedly.
//!
//! Convention: ReLU'(0) = 0.

use super::batchnorm::{BatchNormState, Mode};
use super::kernels;
use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Saved statistics for a batch-norm node, enough to replay the backward
/// pass without rematerializing the normalized input.
#[derive(Debug, Clone)]
struct BnSaved {
    mode: Mode,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// Spatial size per channel (H*W, or 1 for 2-D inputs).
    spatial: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: bool,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddScalars {
        a: NodeId,
        b: NodeId,
    },
    MeanSqNorm {
        x: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients per node, populated for parameter leaves after `backward`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf. Leaves untouched by the loss hold an
    /// all-zero tensor.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { param: true })
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant/input leaf; no gradient is accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: false }, value, false)
    }

    /// Parameter leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: true }, value, true)
    }

    /// y = x·W + b with x: [B,n], W: [n,m], b: [m].
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws, bs) = (xv.shape(), wv.shape(), bv.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (bn, n, m) = (xs[0], xs[1], ws[1]);
        let mut y = kernels::matmul(xv.data(), wv.data(), bn, n, m);
        for row in y.chunks_exact_mut(m) {
            for (v, &bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let out = Tensor::from_vec(vec![bn, m], y)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Affine { x, w, b }, out, needs))
    }

    /// Direct cross-correlation, x: [B,C,H,W], w: [F,C,kh,kw].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel dims must be odd, got {kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let oh = kernels::conv_out_dim(h, kh, stride, padding).ok_or(TensorError::Invalid {
            op: "conv2d",
            msg: format!("no valid output: input height {h} with padding {padding} is smaller than kernel {kh}"),
        })?;
        let ow = kernels::conv_out_dim(wd, kw, stride, padding).ok_or(TensorError::Invalid {
            op: "conv2d",
            msg: format!("no valid output: input width {wd} with padding {padding} is smaller than kernel {kw}"),
        })?;
        let y = kernels::conv2d_fast(
            xv.data(),
            wv.data(),
            b,
            c,
            h,
            wd,
            f,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        );
        let out = Tensor::from_vec(vec![b, f, oh, ow], y)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            out,
            needs,
        ))
    }

    /// Per-channel normalization then scale/shift. x: [B,C] or [B,C,H,W].
    ///
    /// Train mode uses batch statistics; with `commit` it also folds them
    /// into `state`'s running averages. Eval mode applies the running
    /// statistics unchanged.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        mode: Mode,
        commit: bool,
    ) -> Result<NodeId, TensorError> {
        state.validate()?;
        let xv = self.value(x);
        let xs = xv.shape().to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: format!("expected rank 2 or 4 input, got shape {xs:?}"),
            });
        }
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if c != state.channels() {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                lhs: xs.clone(),
                rhs: vec![state.channels()],
            });
        }
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(TensorError::Invalid {
                        op: "batchnorm",
                        msg: format!("train mode needs a batch of at least 2, got {b}"),
                    });
                }
                let m = (b * spatial) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        let mut s = 0.0;
                        for v in &xv.data()[base..base + spatial] {
                            s += v;
                        }
                        mean[ci] += s;
                    }
                }
                for mv in mean.iter_mut() {
                    *mv /= m;
                }
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        let mu = mean[ci];
                        let mut s = 0.0;
                        for v in &xv.data()[base..base + spatial] {
                            let d = v - mu;
                            s += d * d;
                        }
                        var[ci] += s;
                    }
                }
                for vv in var.iter_mut() {
                    *vv /= m;
                }
                if commit {
                    let unbiased: Vec<f64> = var.iter().map(|v| v * m / (m - 1.0)).collect();
                    state.update_running(&mean, &unbiased);
                }
                let inv_std: Vec<f64> =
                    var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => {
                let inv_std: Vec<f64> = state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + state.epsilon).sqrt())
                    .collect();
                (state.running_mean.clone(), inv_std)
            }
        };
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        if gv.len() != c || bv.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                lhs: vec![gv.len(), bv.len()],
                rhs: vec![c],
            });
        }
        let xd = self.value(x).data();
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                let (mu, is, g, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for s in 0..spatial {
                    y[base + s] = g * ((xd[base + s] - mu) * is) + be;
                }
            }
        }
        let out = Tensor::from_vec(xs, y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    mode,
                    mean,
                    inv_std,
                    spatial,
                },
            },
            out,
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let y: Vec<f64> = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: y,
        };
        let needs = self.needs(x);
        self.push(Op::Relu { x }, out, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let y: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: av.shape().to_vec(),
            data: y,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let out = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, out, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::Invalid {
                op: "scale",
                msg: format!("non-finite factor {c}"),
            });
        }
        let xv = self.value(x);
        let y: Vec<f64> = xv.data().iter().map(|&v| c * v).collect();
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: y,
        };
        let needs = self.needs(x);
        Ok(self.push(Op::Scale { x, c }, out, needs))
    }

    /// Sum of two scalar nodes.
    pub fn add_scalars(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(TensorError::Invalid {
                op: "add_scalars",
                msg: "both operands must be scalars".into(),
            });
        }
        let out = Tensor::scalar(self.value(a).item() + self.value(b).item());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::AddScalars { a, b }, out, needs))
    }

    /// Mean over leading-axis rows of the squared Euclidean norm:
    /// x: [B, ...] -> (1/B)·Σ_b ‖x_b‖².
    pub fn mean_sq_norm(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(TensorError::Invalid {
                op: "mean_sq_norm",
                msg: "needs a leading batch axis".into(),
            });
        }
        let b = xv.shape()[0] as f64;
        let mut total = 0.0;
        for &v in xv.data() {
            total += v * v;
        }
        let out = Tensor::scalar(total / b);
        let needs = self.needs(x);
        Ok(self.push(Op::MeanSqNorm { x }, out, needs))
    }

    /// Mean cross-entropy between softmax(logits) and integer labels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        let ls = lv.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: ls.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {n} classes"),
            });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(lv.data(), n, labels);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss node. The tape itself is unchanged,
    /// so the pass can be re-run. Every parameter leaf receives a gradient
    /// exactly once; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {}
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (bn, n) = (xv.shape()[0], xv.shape()[1]);
                    let m = wv.shape()[1];
                    if self.needs(*x) {
                        let wt = kernels::transpose(wv.data(), n, m);
                        let dx = kernels::matmul(g.data(), &wt, bn, m, n);
                        accumulate(&mut grads[x.0], xv.shape(), &dx);
                    }
                    if self.needs(*w) {
                        let xt = kernels::transpose(xv.data(), bn, n);
                        let dw = kernels::matmul(&xt, g.data(), n, bn, m);
                        accumulate(&mut grads[w.0], wv.shape(), &dw);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; m];
                        for row in g.data().chunks_exact(m) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut grads[b.0], &[m], &db);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let xs = xv.shape();
                    let ws = wv.shape();
                    let ys = self.nodes[idx].value.shape();
                    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (oh, ow) = (ys[2], ys[3]);
                    if self.needs(*x) {
                        let dx = kernels::conv2d_fast_backward_input(
                            g.data(),
                            wv.data(),
                            b,
                            c,
                            h,
                            wd,
                            f,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                        );
                        accumulate(&mut grads[x.0], xs, &dx);
                    }
                    if self.needs(*w) {
                        let dw = kernels::conv2d_fast_backward_kernel(
                            g.data(),
                            xv.data(),
                            b,
                            c,
                            h,
                            wd,
                            f,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                        );
                        accumulate(&mut grads[w.0], ws, &dw);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let xv = self.value(*x);
                    let xs = xv.shape();
                    let (b, c) = (xs[0], xs[1]);
                    let spatial = saved.spatial;
                    let gammav = self.value(*gamma).data();
                    let xd = xv.data();
                    let gd = g.data();
                    // Channel-wise sums of dy and dy*xhat.
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            let (mu, is) = (saved.mean[ci], saved.inv_std[ci]);
                            let mut s0 = 0.0;
                            let mut s1 = 0.0;
                            for s in 0..spatial {
                                let dy = gd[base + s];
                                s0 += dy;
                                s1 += dy * (xd[base + s] - mu) * is;
                            }
                            sum_dy[ci] += s0;
                            sum_dy_xhat[ci] += s1;
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads[gamma.0], &[c], &sum_dy_xhat);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads[beta.0], &[c], &sum_dy);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; xd.len()];
                        match saved.mode {
                            Mode::Train => {
                                let m = (b * spatial) as f64;
                                for bi in 0..b {
                                    for ci in 0..c {
                                        let base = (bi * c + ci) * spatial;
                                        let (mu, is) = (saved.mean[ci], saved.inv_std[ci]);
                                        let k = gammav[ci] * is;
                                        let mean_dy = sum_dy[ci] / m;
                                        let mean_dy_xhat = sum_dy_xhat[ci] / m;
                                        for s in 0..spatial {
                                            let xhat = (xd[base + s] - mu) * is;
                                            dx[base + s] =
                                                k * (gd[base + s] - mean_dy - xhat * mean_dy_xhat);
                                        }
                                    }
                                }
                            }
                            Mode::Eval => {
                                for bi in 0..b {
                                    for ci in 0..c {
                                        let base = (bi * c + ci) * spatial;
                                        let k = gammav[ci] * saved.inv_std[ci];
                                        for s in 0..spatial {
                                            dx[base + s] = k * gd[base + s];
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], xs, &dx);
                    }
                }
                Op::Relu { x } => {
                    if self.needs(*x) {
                        let xv = self.value(*x);
                        let dx: Vec<f64> = xv
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[x.0], xv.shape(), &dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], self.value(*a).shape(), g.data());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], self.value(*b).shape(), g.data());
                    }
                }
                Op::Reshape { x } => {
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], self.value(*x).shape(), g.data());
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(*x) {
                        let dx: Vec<f64> = g.data().iter().map(|&gv| c * gv).collect();
                        accumulate(&mut grads[x.0], self.value(*x).shape(), &dx);
                    }
                }
                Op::AddScalars { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &[], g.data());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &[], g.data());
                    }
                }
                Op::MeanSqNorm { x } => {
                    if self.needs(*x) {
                        let xv = self.value(*x);
                        let scale = 2.0 * g.item() / xv.shape()[0] as f64;
                        let dx: Vec<f64> = xv.data().iter().map(|&v| scale * v).collect();
                        accumulate(&mut grads[x.0], xv.shape(), &dx);
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    if self.needs(*logits) {
                        let lv = self.value(*logits);
                        let n = lv.shape()[1];
                        let scale = g.item() / labels.len() as f64;
                        let mut dx = probs.clone();
                        for (bi, &label) in labels.iter().enumerate() {
                            dx[bi * n + label] -= 1.0;
                        }
                        for v in dx.iter_mut() {
                            *v *= scale;
                        }
                        accumulate(&mut grads[logits.0], lv.shape(), &dx);
                    }
                }
            }
            // Free intermediate gradients as soon as they are consumed;
            // parameter-leaf gradients are the pass's output.
            if !matches!(self.nodes[idx].op, Op::Leaf { param: true }) {
                grads[idx] = None;
            }
        }
        // Parameter leaves the loss never touched get exact zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { param: true }) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// slot += delta, materializing zeros on first touch.
fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(t) => {
            for (a, &d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta.to_vec(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        // sum(x^2) = B * mean_sq_norm with B = 1
        let loss = tape.mean_sq_norm(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_param_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::from_vec(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let loss = tape.mean_sq_norm(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::Invalid { op: "backward", .. })
        ));
    }

    #[test]
    fn backward_is_rerunnable_and_deterministic() {
        let mut r = rng(5);
        let mut tape = Tape::new();
        let x = tape.param(random_tensor(vec![4, 3], &mut r));
        let w = tape.param(random_tensor(vec![3, 2], &mut r));
        let b = tape.param(random_tensor(vec![2], &mut r));
        let y = tape.affine(x, w, b).unwrap();
        let h = tape.relu(y);
        let loss = tape.mean_sq_norm(h).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(w).unwrap().data(), g2.get(w).unwrap().data());
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*l1 + b*l2) == a*grad(l1) + b*grad(l2) to 1e-12
        let (a, b) = (0.7, -1.3);
        let mut r = rng(11);
        let xt = random_tensor(vec![3, 4], &mut r);
        let wt = random_tensor(vec![4, 2], &mut r);
        let bt = random_tensor(vec![2], &mut r);

        let build = |tape: &mut Tape| {
            let x = tape.leaf(xt.clone());
            let w = tape.param(wt.clone());
            let bias = tape.param(bt.clone());
            let y = tape.affine(x, w, bias).unwrap();
            let l1 = tape.mean_sq_norm(y).unwrap();
            let h = tape.relu(y);
            let l2 = tape.mean_sq_norm(h).unwrap();
            (w, l1, l2)
        };

        let mut tape = Tape::new();
        let (w, l1, l2) = build(&mut tape);
        let s1 = tape.scale(l1, a).unwrap();
        let s2 = tape.scale(l2, b).unwrap();
        let combined = tape.add_scalars(s1, s2).unwrap();
        let g_combined = tape.backward(combined).unwrap();

        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        let gw = g_combined.get(w).unwrap().data();
        let gw1 = g1.get(w).unwrap().data();
        let gw2 = g2.get(w).unwrap().data();
        for i in 0..gw.len() {
            assert!((gw[i] - (a * gw1[i] + b * gw2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_at_zero_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        let loss = tape.mean_sq_norm(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0); // the fixed subgradient convention at 0
        assert!((g[2] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![2, 2], vec![2.0, 3.0, 5.0, 7.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3]));
        let w = tape.leaf(Tensor::zeros(vec![2, 2]));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        let err = tape.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_xent_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 3]));
        let err = tape.softmax_cross_entropy(logits, &[3]).unwrap_err();
        assert!(err.to_string().contains("label 3"));
    }

    #[test]
    fn batchnorm_eval_identity() {
        // running stats (0,1), gamma 1, shift 0: output == input up to epsilon
        let mut tape = Tape::new();
        let mut state = BatchNormState::new(2);
        let x = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, -0.5, 0.25, 2.0]).unwrap());
        let g = tape.leaf(Tensor::from_vec(vec![2], state.gamma.clone()).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2], state.shift.clone()).unwrap());
        let y = tape.batchnorm(x, g, b, &mut state, Mode::Eval, false).unwrap();
        for (yv, xv) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((yv - xv).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_two_point_batch() {
        // x = [[1],[3]]: mean 2, biased var 1 -> normalized to [-1, 1]
        let mut tape = Tape::new();
        let mut state = BatchNormState::new(1);
        let x = tape.leaf(Tensor::from_vec(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.leaf(Tensor::from_vec(vec![1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let y = tape.batchnorm(x, g, b, &mut state, Mode::Train, true).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert!((out[1] - 1.0).abs() < 1e-5);
        // running stats moved toward batch stats (unbiased var = 2)
        assert!((state.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_random_batch() {
        let mut r = rng(3);
        let (b, c, s) = (16, 3, 4);
        let mut data = vec![0.0; b * c * s];
        for v in data.iter_mut() {
            *v = r.gen_range(-5.0..5.0) + 2.0;
        }
        let mut tape = Tape::new();
        let mut state = BatchNormState::new(c);
        let x = tape.leaf(Tensor::from_vec(vec![b, c, 2, 2], data).unwrap());
        let g = tape.leaf(Tensor::from_vec(vec![c], vec![1.0; c]).unwrap());
        let be = tape.leaf(Tensor::from_vec(vec![c], vec![0.0; c]).unwrap());
        let y = tape.batchnorm(x, g, be, &mut state, Mode::Train, false).unwrap();
        let out = tape.value(y).data();
        // recompute per-channel statistics of the output
        for ci in 0..c {
            let mut vals = Vec::new();
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                vals.extend_from_slice(&out[base..base + s]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "channel {ci} mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn batchnorm_train_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let mut state = BatchNormState::new(1);
        let x = tape.leaf(Tensor::zeros(vec![1, 1]));
        let g = tape.leaf(Tensor::from_vec(vec![1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        assert!(tape
            .batchnorm(x, g, b, &mut state, Mode::Train, false)
            .is_err());
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 5, 5]));
        let w = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }
}
