//! Activation functions, batch normalization, and the attention
//! micro-modules that can stand in for an activation site: the ATAC unit,
//! its globally-pooled variant (SEActivation), the block-level refinement
//! (LocalSENet), and the feed-forward point-wise block (NiN).
//!
//! All four micro-modules share one parameter layout — a point-wise
//! bottleneck `C -> C/r -> C` with batch norm after each convolution — so
//! equal-budget comparisons fall out of the construction.

use crate::autograd::{BnBatchStats, ParamId, ParamKind, ParamStore, Tape, ValueId};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

/// Self-normalizing scale for SELU.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
/// Negative-branch saturation constant for SELU.
pub const SELU_ALPHA: f64 = 1.6732632423543772;

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x
    }
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Which non-linearity sits at an activation site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu { alpha: f64 },
    Selu,
    Swish,
    /// Attentional activation with channel reduction ratio `r`.
    Atac { r: usize },
    /// ATAC bottleneck preceded by global average pooling; one gate per
    /// channel, broadcast spatially.
    SeActivation { r: usize },
}

impl ActivationKind {
    /// Reduction ratio for the channel-reducing kinds.
    pub fn reduction(&self) -> Option<usize> {
        match self {
            ActivationKind::Atac { r } | ActivationKind::SeActivation { r } => Some(*r),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.reduction().is_some()
    }

    /// Channel-reducing kinds need `r >= 1` and `c % r == 0`.
    pub fn validate_channels(&self, c: usize) -> Result<()> {
        if let Some(r) = self.reduction() {
            if r == 0 {
                return Err(Error::invalid("reduction ratio must be >= 1"));
            }
            if !c.is_multiple_of(r) {
                return Err(Error::invalid(format!(
                    "reduction ratio {r} does not divide channel width {c}"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu { alpha } => write!(f, "leaky_relu({alpha})"),
            ActivationKind::Selu => write!(f, "selu"),
            ActivationKind::Swish => write!(f, "swish"),
            ActivationKind::Atac { r } => write!(f, "atac(r={r})"),
            ActivationKind::SeActivation { r } => write!(f, "se_activation(r={r})"),
        }
    }
}

/// Applies a parameter-free activation elementwise.
///
/// The unit kinds (`Atac`, `SeActivation`) carry learnable state and go
/// through [`AtacUnit`] instead.
pub fn activate(x: &Tensor, kind: ActivationKind) -> Result<Tensor> {
    match kind {
        ActivationKind::Relu => Ok(x.map(relu)),
        ActivationKind::LeakyRelu { alpha } => Ok(x.map(|v| leaky_relu(v, alpha))),
        ActivationKind::Selu => Ok(x.map(selu)),
        ActivationKind::Swish => Ok(x.map(swish)),
        ActivationKind::Atac { .. } | ActivationKind::SeActivation { .. } => Err(Error::invalid(
            format!("{kind} carries parameters; use an AtacUnit"),
        )),
    }
}

/// Whether batch norm uses batch statistics (updating the running buffers)
/// or the frozen buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch normalization over the channel axis of `[N,C,H,W]`.
///
/// The affine pair lives in the [`ParamStore`]; the running statistics are
/// buffers owned here and are only touched in train mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
/// running = momentum * running + (1 - momentum) * batch
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm {
    pub fn new(channels: usize, store: &mut ParamStore, name: &str) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::BnGamma);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::BnBeta);
        BatchNorm {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    fn absorb(&mut self, stats: &BnBatchStats) {
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = self.momentum * *r + (1.0 - self.momentum) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = self.momentum * *r + (1.0 - self.momentum) * b;
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: ValueId,
        mode: BnMode,
    ) -> Result<ValueId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            BnMode::Train => {
                let (out, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                self.absorb(&stats);
                Ok(out)
            }
            BnMode::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }
}

/// Point-wise bottleneck `C -> C/r -> C` with batch norm after each
/// convolution and no conv biases (the following norm supplies the offset).
///
/// One layout serves four heads:
/// - [`AtacUnit::forward`]: sigmoid gate times the input (ATAC),
/// - [`AtacUnit::se_forward`]: the same gate computed from pooled context,
/// - [`nin_block_forward`]: ReLU head, output fed forward directly,
/// - [`local_senet_refine`]: ATAC gating applied once per residual block.
#[derive(Debug, Clone)]
pub struct AtacUnit {
    pub channels: usize,
    pub r: usize,
    pub pwconv1: ConvSpec,
    pub w1: ParamId,
    pub bn1: BatchNorm,
    pub pwconv2: ConvSpec,
    pub w2: ParamId,
    pub bn2: BatchNorm,
}

impl AtacUnit {
    /// Fresh unit with zero conv weights (BN affine at its (1, 0) default).
    /// Weight initialization is a separate, seeded pass over the store.
    pub fn new(channels: usize, r: usize, store: &mut ParamStore, name: &str) -> Result<Self> {
        if r == 0 || !channels.is_multiple_of(r) {
            return Err(Error::invalid(format!(
                "reduction ratio {r} does not divide channel width {channels}"
            )));
        }
        let mid = channels / r;
        let pwconv1 = ConvSpec::pointwise(channels, mid);
        let pwconv2 = ConvSpec::pointwise(mid, channels);
        let w1 = store.add(
            format!("{name}.pwconv1.weight"),
            Tensor::zeros(&pwconv1.weight_shape()),
            ParamKind::ConvWeight,
        );
        let bn1 = BatchNorm::new(mid, store, &format!("{name}.bn1"));
        let w2 = store.add(
            format!("{name}.pwconv2.weight"),
            Tensor::zeros(&pwconv2.weight_shape()),
            ParamKind::ConvWeight,
        );
        let bn2 = BatchNorm::new(channels, store, &format!("{name}.bn2"));
        Ok(AtacUnit {
            channels,
            r,
            pwconv1,
            w1,
            bn1,
            pwconv2,
            w2,
            bn2,
        })
    }

    /// The exact Swish-reproducing configuration: two bottleneck channels
    /// carry the positive and negative halves of the input through the inner
    /// ReLU, so the pre-sigmoid output equals the input identically and the
    /// gate becomes `sigmoid(x)`.
    pub fn swish_equivalent(store: &mut ParamStore, name: &str) -> Self {
        let mut unit = AtacUnit::new(2, 1, store, name).expect("2 % 1 == 0");
        //   pw1 = [[1, 0], [-1, 0]]  ->  (x, -x)
        //   pw2 = [[1, -1], [1, -1]] ->  (relu(x) - relu(-x), same) = (x, x)
        store.get_mut(unit.w1).value = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        store.get_mut(unit.w2).value = Tensor::new(vec![2, 2, 1, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        // running_var = 1 - eps makes the eval-mode denominator exactly 1.
        for bn in [&mut unit.bn1, &mut unit.bn2] {
            bn.running_var = vec![1.0 - bn.eps; bn.channels];
        }
        unit
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "atac",
                format!("input has {c} channels, unit expects {}", self.channels),
            ));
        }
        Ok(())
    }

    /// `bn2(pwconv2(relu(bn1(pwconv1(x)))))` — shared trunk of every head.
    fn bottleneck(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: ValueId,
        mode: BnMode,
    ) -> Result<ValueId> {
        let w1 = tape.param(store, self.w1);
        let reduced = tape.conv2d(x, w1, None, &self.pwconv1.clone())?;
        let normed = self.bn1.forward(tape, store, reduced, mode)?;
        let inner = tape.relu(normed);
        let w2 = tape.param(store, self.w2);
        let expanded = tape.conv2d(inner, w2, None, &self.pwconv2.clone())?;
        self.bn2.forward(tape, store, expanded, mode)
    }

    /// Attentional weight map: same shape as the input, every element in
    /// (0, 1), and (in eval mode) a function of the input at its own spatial
    /// position only.
    pub fn gate(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: ValueId,
        mode: BnMode,
    ) -> Result<ValueId> {
        self.check_input(tape.value(x))?;
        let pre = self.bottleneck(tape, store, x, mode)?;
        Ok(tape.sigmoid(pre))
    }

    /// `gate(x) * x`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: ValueId,
        mode: BnMode,
    ) -> Result<ValueId> {
        let gate = self.gate(tape, store, x, mode)?;
        tape.mul(gate, x)
    }

    /// Gate computed from globally pooled context: `[N,C,1,1]`, broadcast
    /// over the spatial extent.
    pub fn se_forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: ValueId,
        mode: BnMode,
    ) -> Result<ValueId> {
        self.check_input(tape.value(x))?;
        let pooled = tape.global_avg_pool(x)?;
        let pre = self.bottleneck(tape, store, pooled, mode)?;
        let gate = tape.sigmoid(pre);
        tape.broadcast_mul(x, gate)
    }

    /// Feed-forward head: final ReLU, no multiplication with the input.
    pub fn nin_forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: ValueId,
        mode: BnMode,
    ) -> Result<ValueId> {
        self.check_input(tape.value(x))?;
        let pre = self.bottleneck(tape, store, x, mode)?;
        Ok(tape.relu(pre))
    }

    /// Learnable convolution weights: `2 * C^2 / r`.
    pub fn conv_weight_count(&self) -> usize {
        self.pwconv1.weight_count() + self.pwconv2.weight_count()
    }

    /// All learnable weights including the BN affine pairs:
    /// `2*C^2/r + 2*(C/r) + 2*C`.
    pub fn param_count(&self) -> usize {
        self.conv_weight_count() + 2 * (self.channels / self.r) + 2 * self.channels
    }
}

// ---------------------------------------------------------------------------
// Tape-free convenience wrappers. Each builds an ephemeral tape so that the
// eval path and the training path share one code path exactly.
// ---------------------------------------------------------------------------

pub fn atac_gate(x: &Tensor, unit: &mut AtacUnit, store: &ParamStore, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let g = unit.gate(&mut tape, store, xv, mode)?;
    Ok(tape.value(g).clone())
}

pub fn atac_forward(x: &Tensor, unit: &mut AtacUnit, store: &ParamStore, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = unit.forward(&mut tape, store, xv, mode)?;
    Ok(tape.value(y).clone())
}

pub fn se_activation_forward(
    x: &Tensor,
    unit: &mut AtacUnit,
    store: &ParamStore,
    mode: BnMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = unit.se_forward(&mut tape, store, xv, mode)?;
    Ok(tape.value(y).clone())
}

/// Block-level refinement of the residual branch output, applied once per
/// block before the skip addition, with `r = 1`.
pub fn local_senet_refine(
    residual: &Tensor,
    unit: &mut AtacUnit,
    store: &ParamStore,
    mode: BnMode,
) -> Result<Tensor> {
    if unit.r != 1 {
        return Err(Error::invalid(format!(
            "local_senet_refine expects r = 1, got r = {}",
            unit.r
        )));
    }
    atac_forward(residual, unit, store, mode)
}

pub fn nin_block_forward(x: &Tensor, unit: &mut AtacUnit, store: &ParamStore, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = unit.nin_forward(&mut tape, store, xv, mode)?;
    Ok(tape.value(y).clone())
}

/// Batch-norm as a standalone op over `[N,C,H,W]`.
pub fn batchnorm_forward(x: &Tensor, bn: &mut BatchNorm, store: &ParamStore, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = bn.forward(&mut tape, store, xv, mode)?;
    Ok(tape.value(y).clone())
}
