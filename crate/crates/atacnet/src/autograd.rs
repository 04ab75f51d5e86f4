//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records one forward pass as a sequence of primitive
//! applications. [`Tape::backward`] replays the records in reverse, visiting
//! every node exactly once, and accumulates `d loss / d p` into the
//! [`Parameter`]s referenced by leaf nodes. Tapes are per-forward-pass and
//! single-owner; nothing is shared across passes.
//!
//! [`gradcheck`] is the independent oracle: central finite differences on a
//! seeded subsample of coordinates per parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{self, ConvSpec, Tensor};

/// Structural role of a parameter; drives initialization and the
/// weight-decay policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Convolution and FC weights decay; biases and batch-norm affines
    /// do not.
    pub fn weight_decay(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

/// A learnable tensor together with its gradient accumulator and the
/// optimizer's momentum slot. The three tensors always share one shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

impl Parameter {
    pub fn weight_decay(&self) -> bool {
        self.kind.weight_decay()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered collection of parameters. Order is the serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    items: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let shape = value.shape().to_vec();
        self.items.push(Parameter {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
            value,
            trainable: true,
            kind,
        });
        ParamId(self.items.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.items[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.items.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn numel(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Per-channel statistics of one batch-norm application in training mode,
/// for the caller to fold into its running buffers.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    BroadcastMul {
        x: ValueId,
        gate: ValueId,
    },
    Relu(ValueId),
    LeakyRelu(ValueId, f64),
    Selu(ValueId),
    Sigmoid(ValueId),
    Swish(ValueId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        spec: ConvSpec,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    GlobalAvgPool(ValueId),
    MaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    /// Batch statistics; backward uses the full coupled formula.
    BnTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Frozen statistics; per-element affine map, affine-only backward.
    BnEval {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Records a leaf bound to `id`; backward accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueId {
        self.push(
            Op::Leaf { param: Some(id) },
            store.get(id).value.clone(),
        )
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::elementwise_mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn broadcast_mul(&mut self, x: ValueId, gate: ValueId) -> Result<ValueId> {
        let v = tensor::broadcast_mul(self.value(x), self.value(gate))?;
        Ok(self.push(Op::BroadcastMul { x, gate }, v))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(nn::relu);
        self.push(Op::Relu(x), v)
    }

    pub fn leaky_relu(&mut self, x: ValueId, alpha: f64) -> ValueId {
        let v = self.value(x).map(|t| nn::leaky_relu(t, alpha));
        self.push(Op::LeakyRelu(x, alpha), v)
    }

    pub fn selu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(nn::selu);
        self.push(Op::Selu(x), v)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(nn::sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn swish(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(nn::swish);
        self.push(Op::Swish(x), v)
    }

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, bias: Option<ValueId>, spec: &ConvSpec) -> Result<ValueId> {
        let v = tensor::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                spec: *spec,
            },
            v,
        ))
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, v))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let v = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), v))
    }

    pub fn max_pool2d(&mut self, x: ValueId, kernel: usize, stride: usize, padding: usize) -> Result<ValueId> {
        let (v, argmax) = tensor::max_pool2d(self.value(x), kernel, stride, padding)?;
        Ok(self.push(Op::MaxPool { x, argmax }, v))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(Op::Mean(x), v)
    }

    /// Normalizes over the batch and spatial extent per channel and applies
    /// the learned affine. Returns the batch statistics so the caller can
    /// update its running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<(ValueId, BnBatchStats)> {
        let (v, mean, var, inv_std) = bn_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = BnBatchStats {
            mean: mean.clone(),
            var,
        };
        let id = self.push(
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            v,
        );
        Ok((id, stats))
    }

    /// Per-element affine map from frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<ValueId> {
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let v = bn_affine_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            &inv_std,
        )?;
        Ok(self.push(
            Op::BnEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            v,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    fn needs_grad(&self, id: ValueId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Leaf { param: None })
    }

    fn accumulate(&mut self, id: ValueId, delta: &Tensor) {
        let node = &mut self.nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    fn take_grad(&mut self, id: ValueId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    /// Accumulates `d loss / d p` into every trainable parameter reachable
    /// from `root`. Grad accumulation is additive across calls; internal
    /// node gradients are reset at the start of each call.
    pub fn backward(&mut self, root: ValueId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let id = ValueId(idx);
            let Some(grad) = self.take_grad(id) else { continue };
            // Dispatch clones the bits of saved state the rule needs; the
            // heavy tensors (input values) are borrowed via their node ids.
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(pid) = *param {
                        let p = store.get_mut(pid);
                        if p.trainable {
                            for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        self.accumulate(a, &grad);
                    }
                    if self.needs_grad(b) {
                        self.accumulate(b, &grad);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        let da = tensor::elementwise_mul(&grad, self.value(b))?;
                        self.accumulate(a, &da);
                    }
                    if self.needs_grad(b) {
                        let db = tensor::elementwise_mul(&grad, self.value(a))?;
                        self.accumulate(b, &db);
                    }
                }
                Op::BroadcastMul { x, gate } => {
                    let (x, gate) = (*x, *gate);
                    if self.needs_grad(x) {
                        let dx = tensor::broadcast_mul(&grad, self.value(gate))?;
                        self.accumulate(x, &dx);
                    }
                    if self.needs_grad(gate) {
                        let prod = tensor::elementwise_mul(&grad, self.value(x))?;
                        let [n, c, h, w] = prod.dims4()?;
                        let mut dgate = Tensor::zeros(&[n, c, 1, 1]);
                        for nc in 0..n * c {
                            dgate.data_mut()[nc] = prod.data()[nc * h * w..(nc + 1) * h * w].iter().sum();
                        }
                        self.accumulate(gate, &dgate);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        let dx = pointwise_grad(&grad, self.value(x), |v| if v > 0.0 { 1.0 } else { 0.0 });
                        self.accumulate(x, &dx);
                    }
                }
                Op::LeakyRelu(x, alpha) => {
                    let (x, alpha) = (*x, *alpha);
                    if self.needs_grad(x) {
                        let dx = pointwise_grad(&grad, self.value(x), |v| if v > 0.0 { 1.0 } else { alpha });
                        self.accumulate(x, &dx);
                    }
                }
                Op::Selu(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        let dx = pointwise_grad(&grad, self.value(x), nn::selu_grad);
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        // y(1-y) from the node's own output.
                        let y = self.value(id).clone();
                        let mut dx = grad.clone();
                        for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                            *d *= yv * (1.0 - yv);
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Swish(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        let dx = pointwise_grad(&grad, self.value(x), nn::swish_grad);
                        self.accumulate(x, &dx);
                    }
                }
                Op::Conv2d { x, w, bias, spec } => {
                    let (x, w, bias, spec) = (*x, *w, *bias, *spec);
                    let want_dx = self.needs_grad(x);
                    let (dx, dw, db) =
                        tensor::conv2d_backward(self.value(x), self.value(w), &spec, &grad, want_dx)?;
                    if let Some(dx) = dx {
                        self.accumulate(x, &dx);
                    }
                    if self.needs_grad(w) {
                        self.accumulate(w, &dw);
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        if self.needs_grad(b) {
                            self.accumulate(b, &db);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let [n, d] = self.value(x).dims2()?;
                    let [m, _] = self.value(w).dims2()?;
                    if self.needs_grad(x) {
                        let mut dx = vec![0.0; n * d];
                        tensor::gemm_nn(n, m, d, grad.data(), self.value(w).data(), &mut dx);
                        self.accumulate(x, &Tensor::new(vec![n, d], dx)?);
                    }
                    if self.needs_grad(w) {
                        let mut dw = vec![0.0; m * d];
                        tensor::gemm_tn(m, n, d, grad.data(), self.value(x).data(), &mut dw);
                        self.accumulate(w, &Tensor::new(vec![m, d], dw)?);
                    }
                    if self.needs_grad(b) {
                        let mut db = vec![0.0; m];
                        for row in 0..n {
                            for (acc, g) in db.iter_mut().zip(&grad.data()[row * m..(row + 1) * m]) {
                                *acc += g;
                            }
                        }
                        self.accumulate(b, &Tensor::new(vec![m], db)?);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        let [n, c, h, w] = self.value(x).dims4()?;
                        let mut dx = Tensor::zeros(&[n, c, h, w]);
                        let hw = (h * w) as f64;
                        for nc in 0..n * c {
                            let g = grad.data()[nc] / hw;
                            for v in &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w] {
                                *v = g;
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    if self.needs_grad(x) {
                        let mut dx = Tensor::zeros(self.value(x).shape());
                        for (g, &src) in grad.data().iter().zip(&argmax) {
                            dx.data_mut()[src] += g;
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::BnTrain {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let (dx, dgamma, dbeta) = bn_train_backward(
                        self.value(x),
                        self.value(gamma),
                        &mean,
                        &inv_std,
                        &grad,
                        self.needs_grad(x),
                    )?;
                    if let Some(dx) = dx {
                        self.accumulate(x, &dx);
                    }
                    if self.needs_grad(gamma) {
                        self.accumulate(gamma, &dgamma);
                    }
                    if self.needs_grad(beta) {
                        self.accumulate(beta, &dbeta);
                    }
                }
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let [n, c, h, w] = self.value(x).dims4()?;
                    let hw = h * w;
                    if self.needs_grad(x) {
                        let mut dx = grad.clone();
                        for img in 0..n {
                            for ch in 0..c {
                                let scale = self.value(gamma).data()[ch] * inv_std[ch];
                                for v in &mut dx.data_mut()[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                                    *v *= scale;
                                }
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                    if self.needs_grad(gamma) || self.needs_grad(beta) {
                        let mut dgamma = Tensor::zeros(&[c]);
                        let mut dbeta = Tensor::zeros(&[c]);
                        let xv = self.value(x).data();
                        for img in 0..n {
                            for ch in 0..c {
                                let base = (img * c + ch) * hw;
                                let mut dg = 0.0;
                                let mut db = 0.0;
                                for i in 0..hw {
                                    let xhat = (xv[base + i] - mean[ch]) * inv_std[ch];
                                    dg += grad.data()[base + i] * xhat;
                                    db += grad.data()[base + i];
                                }
                                dgamma.data_mut()[ch] += dg;
                                dbeta.data_mut()[ch] += db;
                            }
                        }
                        if self.needs_grad(gamma) {
                            self.accumulate(gamma, &dgamma);
                        }
                        if self.needs_grad(beta) {
                            self.accumulate(beta, &dbeta);
                        }
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        let dx = grad.reshaped(self.value(x).shape().to_vec())?;
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        let dx = Tensor::full(self.value(x).shape(), grad.data()[0]);
                        self.accumulate(x, &dx);
                    }
                }
                Op::Mean(x) => {
                    let x = *x;
                    if self.needs_grad(x) {
                        let numel = self.value(x).numel() as f64;
                        let dx = Tensor::full(self.value(x).shape(), grad.data()[0] / numel);
                        self.accumulate(x, &dx);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    if self.needs_grad(logits) {
                        let [n, k] = probs.dims2()?;
                        let g = grad.data()[0] / n as f64;
                        let mut dl = probs;
                        for (row, &label) in labels.iter().enumerate() {
                            dl.data_mut()[row * k + label] -= 1.0;
                        }
                        for v in dl.data_mut() {
                            *v *= g;
                        }
                        self.accumulate(logits, &dl);
                    }
                }
            }
        }
        Ok(())
    }
}

fn pointwise_grad(grad: &Tensor, x: &Tensor, dfdx: impl Fn(f64) -> f64) -> Tensor {
    let mut out = grad.clone();
    for (g, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        *g *= dfdx(xv);
    }
    out
}

fn bn_check_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<[usize; 4]> {
    let [n, c, h, w] = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("gamma {:?} beta {:?} vs {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok([n, c, h, w])
}

#[allow(clippy::type_complexity)]
fn bn_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = bn_check_shapes(x, gamma, beta)?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            mean[ch] += x.data()[base..base + hw].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            var[ch] += x.data()[base..base + hw]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let out = bn_affine_forward(x, gamma, beta, &mean, &inv_std)?;
    Ok((out, mean, var, inv_std))
}

fn bn_affine_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<Tensor> {
    let [n, c, h, w] = bn_check_shapes(x, gamma, beta)?;
    if mean.len() != c || inv_std.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("stats over {} channels vs input {c}", mean.len()),
        ));
    }
    let hw = h * w;
    let mut out = x.clone();
    for img in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - mean[ch] * scale;
            for v in &mut out.data_mut()[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn bn_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    dy: &Tensor,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in 0..hw {
                let xhat = (x.data()[base + i] - mean[ch]) * inv_std[ch];
                dg += dy.data()[base + i] * xhat;
                db += dy.data()[base + i];
            }
            dgamma.data_mut()[ch] += dg;
            dbeta.data_mut()[ch] += db;
        }
    }
    let dx = if want_dx {
        // dx = gamma * inv_std * (dy - dbeta/m - xhat * dgamma/m)
        let mut dx = Tensor::zeros(x.shape());
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let scale = gamma.data()[ch] * inv_std[ch];
                let mean_dy = dbeta.data()[ch] / m;
                let mean_dy_xhat = dgamma.data()[ch] / m;
                for i in 0..hw {
                    let xhat = (x.data()[base + i] - mean[ch]) * inv_std[ch];
                    dx.data_mut()[base + i] =
                        scale * (dy.data()[base + i] - mean_dy - xhat * mean_dy_xhat);
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Anything whose scalar loss can be evaluated and differentiated w.r.t. a
/// parameter store. The `loss` path must be deterministic in the parameter
/// values.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Forward only.
    fn loss(&mut self) -> Result<f64>;
    /// Forward and backward; accumulates into the store's grads.
    fn loss_with_grad(&mut self) -> Result<f64>;
}

/// Tape program over an owned store: the closure rebuilds the forward graph
/// from current parameter values and returns the scalar loss node.
pub struct TapeObjective<F> {
    pub store: ParamStore,
    pub build: F,
}

impl<F> TapeObjective<F>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<ValueId>,
{
    pub fn new(store: ParamStore, build: F) -> Self {
        TapeObjective { store, build }
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<ValueId>,
{
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss(&mut self) -> Result<f64> {
        let mut tape = Tape::new();
        let root = (self.build)(&self.store, &mut tape)?;
        tape.value(root).item()
    }

    fn loss_with_grad(&mut self) -> Result<f64> {
        let mut tape = Tape::new();
        let root = (self.build)(&self.store, &mut tape)?;
        let loss = tape.value(root).item()?;
        tape.backward(root, &mut self.store)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            samples_per_param: 32,
            seed: 0x5eed,
        }
    }
}

/// Worst finite-difference disagreement observed for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
    pub non_finite: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.non_finite.is_none() && p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(move |p| p.non_finite.is_some() || p.max_rel_err > self.tol)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            let status = if p.non_finite.is_some() {
                "NON-FINITE"
            } else if p.max_rel_err <= self.tol {
                "ok"
            } else {
                "FAIL"
            };
            s.push_str(&format!(
                "{:<40} max_rel={:.3e} coord={} checked={} [{}]\n",
                p.name, p.max_rel_err, p.worst_coord, p.checked, status
            ));
        }
        s
    }
}

/// Central finite differences against the tape gradient on a seeded
/// subsample of coordinates per parameter.
pub fn gradcheck(obj: &mut dyn Objective, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    obj.params_mut().zero_grads();
    obj.loss_with_grad()?;
    let analytic: Vec<Tensor> = obj.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = obj.params().iter().map(|p| p.name.clone()).collect();
    let trainable: Vec<bool> = obj.params().iter().map(|p| p.trainable).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        tol: cfg.tol,
        params: Vec::new(),
    };

    for (pi, name) in names.iter().enumerate() {
        if !trainable[pi] {
            continue;
        }
        let numel = analytic[pi].numel();
        let coords: Vec<usize> = if numel <= cfg.samples_per_param {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, cfg.samples_per_param).into_vec()
        };

        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_coord: 0,
            checked: coords.len(),
            non_finite: None,
        };
        for &coord in &coords {
            let orig = obj.params().get(ParamId(pi)).value.data()[coord];
            obj.params_mut().get_mut(ParamId(pi)).value.data_mut()[coord] = orig + cfg.eps;
            let up = obj.loss()?;
            obj.params_mut().get_mut(ParamId(pi)).value.data_mut()[coord] = orig - cfg.eps;
            let down = obj.loss()?;
            obj.params_mut().get_mut(ParamId(pi)).value.data_mut()[coord] = orig;

            let fd = (up - down) / (2.0 * cfg.eps);
            let an = analytic[pi].data()[coord];
            if !fd.is_finite() || !an.is_finite() {
                check.non_finite = Some(coord);
                continue;
            }
            let abs_err = (fd - an).abs();
            // 1e-8 absolute floor: disagreements below it are numerically
            // zero and never count against the relative tolerance.
            let rel = if abs_err <= 1e-8 {
                0.0
            } else {
                abs_err / fd.abs().max(an.abs()).max(1e-8)
            };
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_coord = coord;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![3.0]), ParamKind::ConvWeight);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[6.0]);
    }

    #[test]
    fn unreachable_param_grad_unchanged() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![2.0]), ParamKind::ConvWeight);
        let p = store.add("unused", Tensor::from_vec(vec![5.0]), ParamKind::ConvWeight);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[0.0]);
        assert_eq!(store.get(w).grad.data(), &[1.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![3.0, -1.0]), ParamKind::ConvWeight);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        let first = store.get(w).grad.clone();
        tape.backward(loss, &mut store).unwrap();
        for (twice, once) in store.get(w).grad.data().iter().zip(first.data()) {
            assert_eq!(*twice, 2.0 * once);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), ParamKind::ConvWeight);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        assert!(tape.backward(wv, &mut store).is_err());
    }

    #[test]
    fn mul_gradient_is_other_factor() {
        let mut store = ParamStore::new();
        let a = store.add("a", rng_tensor(&[6], 1), ParamKind::ConvWeight);
        let b_val = rng_tensor(&[6], 2);
        let b = store.add("b", b_val.clone(), ParamKind::ConvWeight);
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let prod = tape.mul(av, bv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), b_val.data());
    }

    #[test]
    fn sigmoid_gradient_formula() {
        let x = rng_tensor(&[64], 3);
        let mut store = ParamStore::new();
        let p = store.add("x", x.clone(), ParamKind::ConvWeight);
        let mut tape = Tape::new();
        let xv = tape.param(&store, p);
        let y = tape.sigmoid(xv);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        for (g, &xi) in store.get(p).grad.data().iter().zip(x.data()) {
            let s = nn::sigmoid(xi);
            assert_abs_diff_eq!(*g, s * (1.0 - s), epsilon = 1e-10);
        }
    }

    #[test]
    fn bn_train_normalizes() {
        let x = rng_tensor(&[4, 3, 5, 5], 4);
        let mut store = ParamStore::new();
        let g = store.add("gamma", Tensor::full(&[3], 1.0), ParamKind::BnGamma);
        let b = store.add("beta", Tensor::zeros(&[3]), ParamKind::BnBeta);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let gv = tape.param(&store, g);
        let bv = tape.param(&store, b);
        let (y, stats) = tape.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
        let out = tape.value(y);
        let [n, c, h, w] = out.dims4().unwrap();
        let m = (n * h * w) as f64;
        for ch in 0..c {
            let mut mean = 0.0;
            let mut var = 0.0;
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for i in 0..h * w {
                    mean += out.data()[base + i];
                }
            }
            mean /= m;
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for i in 0..h * w {
                    var += (out.data()[base + i] - mean) * (out.data()[base + i] - mean);
                }
            }
            var /= m;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
            assert!(stats.var[ch] > 0.0);
        }
    }

    #[test]
    fn bn_eval_identity_with_unit_stats() {
        let x = rng_tensor(&[2, 3, 4, 4], 5);
        let mut store = ParamStore::new();
        let g = store.add("gamma", Tensor::full(&[3], 1.0), ParamKind::BnGamma);
        let b = store.add("beta", Tensor::zeros(&[3]), ParamKind::BnBeta);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let gv = tape.param(&store, g);
        let bv = tape.param(&store, b);
        let y = tape
            .batch_norm_eval(xv, gv, bv, &[0.0; 3], &[1.0; 3], 1e-5)
            .unwrap();
        for (o, i) in tape.value(y).data().iter().zip(x.data()) {
            assert_abs_diff_eq!(o, i, epsilon = 1e-5);
        }
    }

    #[test]
    fn bn_zero_gamma_yields_beta() {
        let x = rng_tensor(&[2, 2, 3, 3], 6);
        let mut store = ParamStore::new();
        let g = store.add("gamma", Tensor::zeros(&[2]), ParamKind::BnGamma);
        let b = store.add("beta", Tensor::new(vec![2], vec![0.7, -0.3]).unwrap(), ParamKind::BnBeta);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let gv = tape.param(&store, g);
        let bv = tape.param(&store, b);
        let (y, _) = tape.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
        let out = tape.value(y);
        for img in 0..2 {
            for ch in 0..2 {
                let expect = if ch == 0 { 0.7 } else { -0.3 };
                for i in 0..9 {
                    assert_abs_diff_eq!(out.data()[(img * 2 + ch) * 9 + i], expect);
                }
            }
        }
    }

    #[test]
    fn gradcheck_linear_is_tight() {
        let mut store = ParamStore::new();
        let w = store.add("w", rng_tensor(&[3, 4], 7), ParamKind::ConvWeight);
        let b = store.add("b", rng_tensor(&[3], 8), ParamKind::Bias);
        let x = rng_tensor(&[2, 4], 9);
        let labels = vec![0usize, 2];
        let mut obj = TapeObjective::new(store, move |s, tape| {
            let xv = tape.input(x.clone());
            let wv = tape.param(s, w);
            let bv = tape.param(s, b);
            let logits = tape.linear(xv, wv, bv)?;
            tape.softmax_cross_entropy(logits, &labels)
        });
        let report = gradcheck(&mut obj, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.summary());
        assert!(report.max_rel_err() < 1e-6, "{}", report.summary());
    }

    #[test]
    fn gradcheck_relu_away_from_kink() {
        let mut store = ParamStore::new();
        // Inputs drawn from |x| > 0.1 keep finite differences off the kink.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<f64> = (0..32)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let p = store.add("x", Tensor::from_vec(data), ParamKind::ConvWeight);
        let mut obj = TapeObjective::new(store, move |s, tape| {
            let xv = tape.param(s, p);
            let y = tape.relu(xv);
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
        let report = gradcheck(&mut obj, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn gradcheck_conv_bn_pipeline() {
        let mut store = ParamStore::new();
        let spec = ConvSpec::new(2, 3, 3, 1, 1);
        let w = store.add("conv.weight", rng_tensor(&spec.weight_shape(), 11), ParamKind::ConvWeight);
        // random affine so the loss is not invariant to the normalization
        let g = store.add("bn.gamma", rng_tensor(&[3], 15).map(|v| 1.0 + 0.4 * v), ParamKind::BnGamma);
        let b = store.add("bn.beta", rng_tensor(&[3], 16), ParamKind::BnBeta);
        let x = rng_tensor(&[2, 2, 5, 5], 12);
        let mask = rng_tensor(&[2, 3, 5, 5], 17);
        let mut obj = TapeObjective::new(store, move |s, tape| {
            let xv = tape.input(x.clone());
            let mv = tape.input(mask.clone());
            let wv = tape.param(s, w);
            let gv = tape.param(s, g);
            let bv = tape.param(s, b);
            let conv = tape.conv2d(xv, wv, None, &spec)?;
            let (bn, _) = tape.batch_norm_train(conv, gv, bv, 1e-5)?;
            let weighted = tape.mul(bn, mv)?;
            let sq = tape.mul(weighted, weighted)?;
            Ok(tape.mean(sq))
        });
        let report = gradcheck(&mut obj, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn gradcheck_flags_wrong_gradient() {
        // A deliberately sign-flipped backward must be caught and named.
        struct Broken {
            store: ParamStore,
            id: ParamId,
        }
        impl Objective for Broken {
            fn params(&self) -> &ParamStore {
                &self.store
            }
            fn params_mut(&mut self) -> &mut ParamStore {
                &mut self.store
            }
            fn loss(&mut self) -> Result<f64> {
                let w = self.store.get(self.id).value.data();
                Ok(w.iter().map(|v| v * v).sum())
            }
            fn loss_with_grad(&mut self) -> Result<f64> {
                let grads: Vec<f64> = self
                    .store
                    .get(self.id)
                    .value
                    .data()
                    .iter()
                    .map(|v| -2.0 * v)
                    .collect();
                for (g, d) in self
                    .store
                    .get_mut(self.id)
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(grads)
                {
                    *g += d;
                }
                self.loss()
            }
        }
        let mut store = ParamStore::new();
        let id = store.add("broken.weight", rng_tensor(&[8], 13), ParamKind::ConvWeight);
        let mut obj = Broken { store, id };
        let report = gradcheck(&mut obj, &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        let failing: Vec<&str> = report.failures().map(|p| p.name.as_str()).collect();
        assert_eq!(failing, vec!["broken.weight"]);
    }

    #[test]
    fn maxpool_gradcheck() {
        let mut store = ParamStore::new();
        let p = store.add("x", rng_tensor(&[1, 2, 4, 4], 14), ParamKind::ConvWeight);
        let mut obj = TapeObjective::new(store, move |s, tape| {
            let xv = tape.param(s, p);
            let y = tape.max_pool2d(xv, 2, 2, 0)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
        let report = gradcheck(&mut obj, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{}", report.summary());
    }
}
