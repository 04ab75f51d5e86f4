//! Runtime instantiation of a [`ModelGraph`]: parameter allocation, seeded
//! He initialization, tape execution, and bit-exact checkpoints.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Objective, ParamId, ParamKind, ParamStore, Tape, ValueId};
use crate::error::{Error, Result};
use crate::graph::{LayerSpec, ModelGraph};
use crate::nn::{ActivationKind, AtacUnit, BatchNorm, BnMode};
use crate::tensor::Tensor;

#[allow(clippy::large_enum_variant)] // Unit carries its BN buffers inline
enum NodeBinding {
    None,
    Conv { w: ParamId, b: Option<ParamId> },
    Bn(BatchNorm),
    Unit(AtacUnit),
    Linear { w: ParamId, b: ParamId },
}

/// A graph plus its parameters and batch-norm buffers.
pub struct Model {
    pub graph: ModelGraph,
    pub params: ParamStore,
    bindings: Vec<NodeBinding>,
}

impl Model {
    /// Allocates parameters for every node. Weights start at zero; call
    /// [`Model::he_init`] for a seeded random initialization.
    pub fn new(graph: ModelGraph) -> Result<Self> {
        graph.infer_shapes(1)?;
        let mut params = ParamStore::new();
        let mut bindings = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let binding = match &node.layer {
                LayerSpec::Conv(spec) => {
                    let w = params.add(
                        format!("{}.weight", node.label),
                        Tensor::zeros(&spec.weight_shape()),
                        ParamKind::ConvWeight,
                    );
                    let b = spec.has_bias.then(|| {
                        params.add(
                            format!("{}.bias", node.label),
                            Tensor::zeros(&[spec.out_channels]),
                            ParamKind::Bias,
                        )
                    });
                    NodeBinding::Conv { w, b }
                }
                LayerSpec::BatchNorm { channels } => {
                    NodeBinding::Bn(BatchNorm::new(*channels, &mut params, &node.label))
                }
                LayerSpec::Activation { kind, channels, .. } => match kind.reduction() {
                    Some(r) => NodeBinding::Unit(AtacUnit::new(*channels, r, &mut params, &node.label)?),
                    None => NodeBinding::None,
                },
                LayerSpec::Linear { in_features, out_features } => {
                    let w = params.add(
                        format!("{}.weight", node.label),
                        Tensor::zeros(&[*out_features, *in_features]),
                        ParamKind::LinearWeight,
                    );
                    let b = params.add(
                        format!("{}.bias", node.label),
                        Tensor::zeros(&[*out_features]),
                        ParamKind::Bias,
                    );
                    NodeBinding::Linear { w, b }
                }
                _ => NodeBinding::None,
            };
            bindings.push(binding);
        }
        Ok(Model {
            graph,
            params,
            bindings,
        })
    }

    /// Seeded He initialization: conv/FC weights drawn from
    /// `Normal(0, sqrt(2 / fan_in))`, biases zero, BN affine at (1, 0),
    /// running statistics reset to (0, 1), momentum and grads cleared.
    pub fn he_init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.params.ids().collect::<Vec<_>>() {
            let kind = self.params.get(id).kind;
            let shape = self.params.get(id).value.shape().to_vec();
            let p = self.params.get_mut(id);
            match kind {
                ParamKind::ConvWeight => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    for v in p.value.data_mut() {
                        *v = dist.sample(&mut rng);
                    }
                }
                ParamKind::LinearWeight => {
                    let fan_in = shape[1] as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    for v in p.value.data_mut() {
                        *v = dist.sample(&mut rng);
                    }
                }
                ParamKind::Bias | ParamKind::BnBeta => p.value.data_mut().fill(0.0),
                ParamKind::BnGamma => p.value.data_mut().fill(1.0),
            }
            p.grad.data_mut().fill(0.0);
            p.momentum.data_mut().fill(0.0);
        }
        for binding in &mut self.bindings {
            for bn in binding_bns(binding) {
                bn.running_mean.fill(0.0);
                bn.running_var.fill(1.0);
            }
        }
    }

    /// Runs the graph on a recorded input value and returns the logits node.
    pub fn forward(&mut self, tape: &mut Tape, input: ValueId, mode: BnMode) -> Result<ValueId> {
        let Model { graph, params, bindings } = self;
        let mut values: Vec<Option<ValueId>> = vec![None; graph.nodes.len()];
        for (idx, node) in graph.nodes.iter().enumerate() {
            let arg = |i: usize| -> Result<ValueId> {
                values[node.inputs[i]].ok_or_else(|| Error::invalid("dangling graph input"))
            };
            let out = match (&node.layer, &mut bindings[idx]) {
                (LayerSpec::Input { channels, .. }, _) => {
                    // channel count is structural; the hosts are fully
                    // convolutional, so any spatial extent the convs accept
                    // is fine (the declared H x W only pins accounting)
                    let shape = tape.value(input).shape();
                    if shape.len() != 4 || shape[1] != *channels {
                        return Err(Error::shape(
                            "model.forward",
                            format!("input {:?} vs graph [N,{channels},H,W]", shape),
                        ));
                    }
                    input
                }
                (LayerSpec::Conv(spec), NodeBinding::Conv { w, b }) => {
                    let x = arg(0)?;
                    let wv = tape.param(params, *w);
                    let bv = b.map(|id| tape.param(params, id));
                    tape.conv2d(x, wv, bv, spec)?
                }
                (LayerSpec::BatchNorm { .. }, NodeBinding::Bn(bn)) => {
                    let x = arg(0)?;
                    bn.forward(tape, params, x, mode)?
                }
                (LayerSpec::Activation { kind, .. }, binding) => {
                    let x = arg(0)?;
                    match (kind, binding) {
                        (ActivationKind::Relu, _) => tape.relu(x),
                        (ActivationKind::LeakyRelu { alpha }, _) => tape.leaky_relu(x, *alpha),
                        (ActivationKind::Selu, _) => tape.selu(x),
                        (ActivationKind::Swish, _) => tape.swish(x),
                        (ActivationKind::Atac { .. }, NodeBinding::Unit(unit)) => {
                            unit.forward(tape, params, x, mode)?
                        }
                        (ActivationKind::SeActivation { .. }, NodeBinding::Unit(unit)) => {
                            unit.se_forward(tape, params, x, mode)?
                        }
                        _ => return Err(Error::invalid(format!("unbound unit at {}", node.label))),
                    }
                }
                (LayerSpec::MaxPool { kernel, stride, padding }, _) => {
                    let x = arg(0)?;
                    tape.max_pool2d(x, *kernel, *stride, *padding)?
                }
                (LayerSpec::GlobalAvgPool, _) => {
                    let x = arg(0)?;
                    tape.global_avg_pool(x)?
                }
                (LayerSpec::Flatten, _) => {
                    let x = arg(0)?;
                    let shape = tape.value(x).shape().to_vec();
                    tape.reshape(x, vec![shape[0], shape[1..].iter().product()])?
                }
                (LayerSpec::Linear { .. }, NodeBinding::Linear { w, b }) => {
                    let x = arg(0)?;
                    let wv = tape.param(params, *w);
                    let bv = tape.param(params, *b);
                    tape.linear(x, wv, bv)?
                }
                (LayerSpec::Add, _) => {
                    let a = arg(0)?;
                    let b = arg(1)?;
                    tape.add(a, b)?
                }
                _ => return Err(Error::invalid(format!("unbound parameters at {}", node.label))),
            };
            values[idx] = Some(out);
        }
        values
            .last()
            .copied()
            .flatten()
            .ok_or_else(|| Error::invalid("empty graph"))
    }

    /// Forward plus softmax cross-entropy; returns `(logits, loss)`.
    pub fn forward_loss(
        &mut self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[usize],
        mode: BnMode,
    ) -> Result<(ValueId, ValueId)> {
        let input = tape.input(images.clone());
        let logits = self.forward(tape, input, mode)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok((logits, loss))
    }

    pub fn param_count(&self) -> u64 {
        self.params.numel() as u64
    }

    // -- checkpointing ------------------------------------------------------

    /// Every serialized tensor in deterministic order:
    /// parameter values and momenta in store order, then BN running
    /// statistics in node order.
    fn tensor_index(&self) -> Vec<(String, &'static str, usize)> {
        let mut index = Vec::new();
        for p in self.params.iter() {
            index.push((p.name.clone(), "value", p.value.numel()));
            index.push((p.name.clone(), "momentum", p.momentum.numel()));
        }
        for binding in &self.bindings {
            for bn in binding_bns_ref(binding) {
                index.push((bn.name.clone(), "running_mean", bn.running_mean.len()));
                index.push((bn.name.clone(), "running_var", bn.running_var.len()));
            }
        }
        index
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let manifest = self.graph.manifest();
        let manifest_lines = manifest.lines().count();
        write!(
            file,
            "atacnet-checkpoint v1\nmodel {}\nepochs_completed {}\ngraph_lines {}\n{}",
            meta.model_spec, meta.epochs_completed, manifest_lines, manifest
        )?;
        let index = self.tensor_index();
        writeln!(file, "tensors {}", index.len())?;
        for (name, role, numel) in &index {
            writeln!(file, "{name} {role} {numel}")?;
        }
        writeln!(file, "data")?;
        let mut write_all = |data: &[f64]| -> Result<()> {
            for v in data {
                file.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for p in self.params.iter() {
            write_all(p.value.data())?;
            write_all(p.momentum.data())?;
        }
        for binding in &self.bindings {
            for bn in binding_bns_ref(binding) {
                write_all(&bn.running_mean)?;
                write_all(&bn.running_var)?;
            }
        }
        Ok(())
    }

    /// Restores parameter values, momenta, and BN buffers into this model.
    /// The checkpoint's graph manifest must match bit for bit; the first
    /// divergent layer line is reported otherwise.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();

        let next_line = |reader: &mut BufReader<std::fs::File>, line: &mut String| -> Result<String> {
            line.clear();
            if reader.read_line(line)? == 0 {
                return Err(Error::Checkpoint("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };

        let magic = next_line(&mut reader, &mut line)?;
        if magic != "atacnet-checkpoint v1" {
            return Err(Error::Checkpoint(format!("bad magic line {magic:?}")));
        }
        let model_line = next_line(&mut reader, &mut line)?;
        let model_spec = model_line
            .strip_prefix("model ")
            .ok_or_else(|| Error::Checkpoint("missing model line".into()))?
            .to_string();
        let epochs_line = next_line(&mut reader, &mut line)?;
        let epochs_completed: usize = epochs_line
            .strip_prefix("epochs_completed ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing epochs_completed".into()))?;
        let count_line = next_line(&mut reader, &mut line)?;
        let graph_lines: usize = count_line
            .strip_prefix("graph_lines ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing graph_lines".into()))?;

        let expected_manifest = self.graph.manifest();
        let mut expected_iter = expected_manifest.lines();
        for i in 0..graph_lines {
            let got = next_line(&mut reader, &mut line)?;
            match expected_iter.next() {
                Some(want) if want == got => {}
                Some(want) => {
                    return Err(Error::Checkpoint(format!(
                        "graph manifest diverges at layer {i}: checkpoint has {got:?}, model has {want:?}"
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint graph has extra layer {i}: {got:?}"
                    )))
                }
            }
        }
        if let Some(want) = expected_iter.next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint graph missing layer: {want:?}"
            )));
        }

        let tensors_line = next_line(&mut reader, &mut line)?;
        let tensor_count: usize = tensors_line
            .strip_prefix("tensors ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing tensors count".into()))?;
        let expected_index = self.tensor_index();
        if tensor_count != expected_index.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {tensor_count} tensors, model needs {}",
                expected_index.len()
            )));
        }
        for (name, role, numel) in &expected_index {
            let got = next_line(&mut reader, &mut line)?;
            let want = format!("{name} {role} {numel}");
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "tensor entry mismatch: checkpoint has {got:?}, model expects {want:?}"
                )));
            }
        }
        let data_line = next_line(&mut reader, &mut line)?;
        if data_line != "data" {
            return Err(Error::Checkpoint("missing data marker".into()));
        }

        let read_into = |reader: &mut BufReader<std::fs::File>, data: &mut [f64]| -> Result<()> {
            let mut buf = [0u8; 8];
            for v in data {
                reader.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(())
        };
        for id in self.params.ids().collect::<Vec<_>>() {
            let p = self.params.get_mut(id);
            read_into(&mut reader, p.value.data_mut())?;
            read_into(&mut reader, p.momentum.data_mut())?;
        }
        for binding in &mut self.bindings {
            for bn in binding_bns(binding) {
                read_into(&mut reader, &mut bn.running_mean)?;
                read_into(&mut reader, &mut bn.running_var)?;
            }
        }
        Ok(CheckpointMeta {
            model_spec,
            epochs_completed,
        })
    }
}

fn binding_bns(binding: &mut NodeBinding) -> Vec<&mut BatchNorm> {
    match binding {
        NodeBinding::Bn(bn) => vec![bn],
        NodeBinding::Unit(unit) => vec![&mut unit.bn1, &mut unit.bn2],
        _ => vec![],
    }
}

fn binding_bns_ref(binding: &NodeBinding) -> Vec<&BatchNorm> {
    match binding {
        NodeBinding::Bn(bn) => vec![bn],
        NodeBinding::Unit(unit) => vec![&unit.bn1, &unit.bn2],
        _ => vec![],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Opaque model description echoed back on load; the CLI uses it to
    /// rebuild the graph before restoring tensors.
    pub model_spec: String,
    pub epochs_completed: usize,
}

/// Reads only the checkpoint header, so a model can be reconstructed from
/// the stored spec before the tensors are restored.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut next = || -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next()? != "atacnet-checkpoint v1" {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let model_spec = next()?
        .strip_prefix("model ")
        .ok_or_else(|| Error::Checkpoint("missing model line".into()))?
        .to_string();
    let epochs_completed = next()?
        .strip_prefix("epochs_completed ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing epochs_completed".into()))?;
    Ok(CheckpointMeta {
        model_spec,
        epochs_completed,
    })
}

/// Fixed-batch objective over a model, for gradient checking the full
/// network.
pub struct ModelObjective<'a> {
    pub model: &'a mut Model,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub mode: BnMode,
}

impl Objective for ModelObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss(&mut self) -> crate::error::Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self
            .model
            .forward_loss(&mut tape, &self.images, &self.labels, self.mode)?;
        tape.value(loss).item()
    }

    fn loss_with_grad(&mut self) -> crate::error::Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self
            .model
            .forward_loss(&mut tape, &self.images, &self.labels, self.mode)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss, &mut self.model.params)?;
        Ok(value)
    }
}
