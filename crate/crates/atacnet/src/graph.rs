//! Declarative network descriptions: an ordered graph of typed layers with
//! indexed activation sites, plus static parameter/FLOP accounting and the
//! ReLU-to-ATAC rewriting machinery.
//!
//! Graphs are plain data. Instantiating parameters and running tensors
//! through a graph happens in [`crate::model`].

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::ActivationKind;
use crate::tensor::ConvSpec;

/// One typed layer in a network description.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Network input, `[C, H, W]` per sample.
    Input { channels: usize, height: usize, width: usize },
    Conv(ConvSpec),
    BatchNorm { channels: usize },
    /// An activation site: the rewritable unit of the network.
    Activation { kind: ActivationKind, channels: usize, site: usize },
    MaxPool { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Flatten,
    Linear { in_features: usize, out_features: usize },
    /// Elementwise sum of exactly two inputs (residual join).
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub layer: LayerSpec,
    /// Indices of producer nodes, all strictly smaller than this node's own.
    pub inputs: Vec<usize>,
    pub label: String,
}

/// Ordered graph of typed layers. Node order is topological by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub nodes: Vec<GraphNode>,
    pub num_classes: usize,
}

/// One rewritable activation site, in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSite {
    pub site: usize,
    pub node: usize,
    pub label: String,
    pub channels: usize,
    pub kind: ActivationKind,
}

/// Which activation sites get swapped to ATAC units. Ratio selection works
/// last-to-first: `ceil(ratio * S)` sites counted back from the output end.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplacementPolicy {
    Ratio(f64),
    Sites(BTreeSet<usize>),
}

impl ReplacementPolicy {
    pub fn select(&self, total_sites: usize) -> Result<Vec<usize>> {
        match self {
            ReplacementPolicy::Ratio(ratio) => {
                if !(0.0..=1.0).contains(ratio) {
                    return Err(Error::invalid(format!(
                        "replacement ratio {ratio} outside [0, 1]"
                    )));
                }
                let count = (ratio * total_sites as f64).ceil() as usize;
                let count = count.min(total_sites);
                Ok(((total_sites - count)..total_sites).collect())
            }
            ReplacementPolicy::Sites(set) => {
                if let Some(&bad) = set.iter().find(|&&s| s >= total_sites) {
                    return Err(Error::invalid(format!(
                        "site index {bad} out of range ({total_sites} sites)"
                    )));
                }
                Ok(set.iter().copied().collect())
            }
        }
    }
}

struct GraphBuilder {
    nodes: Vec<GraphNode>,
    sites: usize,
}

impl GraphBuilder {
    fn new(channels: usize, height: usize, width: usize) -> Self {
        GraphBuilder {
            nodes: vec![GraphNode {
                layer: LayerSpec::Input { channels, height, width },
                inputs: vec![],
                label: "input".into(),
            }],
            sites: 0,
        }
    }

    fn push(&mut self, layer: LayerSpec, inputs: Vec<usize>, label: impl Into<String>) -> usize {
        self.nodes.push(GraphNode {
            layer,
            inputs,
            label: label.into(),
        });
        self.nodes.len() - 1
    }

    fn conv(&mut self, from: usize, spec: ConvSpec, label: impl Into<String>) -> usize {
        self.push(LayerSpec::Conv(spec), vec![from], label)
    }

    fn bn(&mut self, from: usize, channels: usize, label: impl Into<String>) -> usize {
        self.push(LayerSpec::BatchNorm { channels }, vec![from], label)
    }

    fn act(
        &mut self,
        from: usize,
        kind: ActivationKind,
        channels: usize,
        label: impl Into<String>,
    ) -> Result<usize> {
        kind.validate_channels(channels)?;
        let site = self.sites;
        self.sites += 1;
        Ok(self.push(LayerSpec::Activation { kind, channels, site }, vec![from], label))
    }
}

/// Pre-activation CIFAR ResNet: one 3x3 stem conv into three stages of `b`
/// basic blocks at 16/32/64 channels (stages 2-3 downsample by stride 2),
/// then BN + activation, global average pooling, and the FC head. `b = 3`
/// is the standard 20-layer backbone.
pub fn build_resnet20v2(b: usize, num_classes: usize, activation: ActivationKind) -> Result<ModelGraph> {
    if b < 1 {
        return Err(Error::invalid("blocks per stage must be >= 1"));
    }
    if !matches!(num_classes, 10 | 100) {
        return Err(Error::invalid(format!(
            "resnet20v2 head supports 10 or 100 classes, got {num_classes}"
        )));
    }
    let mut g = GraphBuilder::new(3, 32, 32);
    let mut cur = g.conv(0, ConvSpec::new(3, 16, 3, 1, 1), "stem.conv1");
    let mut in_ch = 16;
    for stage in 1..=3usize {
        let ch = 16 << (stage - 1);
        for block in 0..b {
            let stride = if stage > 1 && block == 0 { 2 } else { 1 };
            let l = format!("stage{stage}.block{block}");
            let block_input = cur;
            let bn_a = g.bn(block_input, in_ch, format!("{l}.bn1"));
            let act_a = g.act(bn_a, activation, in_ch, format!("{l}.act1"))?;
            let conv_a = g.conv(act_a, ConvSpec::new(in_ch, ch, 3, stride, 1), format!("{l}.conv1"));
            let bn_b = g.bn(conv_a, ch, format!("{l}.bn2"));
            let act_b = g.act(bn_b, activation, ch, format!("{l}.act2"))?;
            let conv_b = g.conv(act_b, ConvSpec::new(ch, ch, 3, 1, 1), format!("{l}.conv2"));
            let shortcut = if stride != 1 || in_ch != ch {
                // projection taken from the pre-activated input
                g.conv(act_a, ConvSpec::new(in_ch, ch, 1, stride, 0), format!("{l}.downsample"))
            } else {
                block_input
            };
            cur = g.push(LayerSpec::Add, vec![conv_b, shortcut], format!("{l}.add"));
            in_ch = ch;
        }
    }
    let bn_f = g.bn(cur, 64, "head.bn");
    let act_f = g.act(bn_f, activation, 64, "head.act")?;
    let gap = g.push(LayerSpec::GlobalAvgPool, vec![act_f], "head.pool");
    let flat = g.push(LayerSpec::Flatten, vec![gap], "head.flatten");
    g.push(
        LayerSpec::Linear { in_features: 64, out_features: num_classes },
        vec![flat],
        "head.fc",
    );
    Ok(ModelGraph {
        name: format!("resnet20v2(b={b})"),
        nodes: g.nodes,
        num_classes,
    })
}

/// Where the stride-2 convolution sits inside a transition bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottleneckStride {
    /// Original layout: the first 1x1 convolution downsamples.
    FirstConv,
    /// v1b layout: the 3x3 convolution downsamples.
    MiddleConv,
}

/// Bottleneck ResNet-50 with the v1b stride placement (stride 2 on the 3x3
/// convolution). With `atac_last_two_stages`, the two residual-branch ReLUs
/// of every block in stages 3 and 4 become ATAC units with `r = 2`; the
/// post-addition ReLU stays.
pub fn build_resnet50v1b(num_classes: usize, atac_last_two_stages: bool) -> Result<ModelGraph> {
    build_resnet50(num_classes, atac_last_two_stages, BottleneckStride::MiddleConv)
}

/// Bottleneck ResNet-50 with the original stride placement (stride 2 on the
/// first 1x1 convolution). This is the layout published cost figures for the
/// plain baseline correspond to.
pub fn build_resnet50v1(num_classes: usize) -> Result<ModelGraph> {
    build_resnet50(num_classes, false, BottleneckStride::FirstConv)
}

pub fn build_resnet50(
    num_classes: usize,
    atac_last_two_stages: bool,
    stride_placement: BottleneckStride,
) -> Result<ModelGraph> {
    let mut g = GraphBuilder::new(3, 224, 224);
    let mut spec = ConvSpec::new(3, 64, 7, 2, 3);
    spec.has_bias = false;
    let conv1 = g.conv(0, spec, "stem.conv1");
    let bn1 = g.bn(conv1, 64, "stem.bn1");
    let act1 = g.act(bn1, ActivationKind::Relu, 64, "stem.act")?;
    let mut cur = g.push(
        LayerSpec::MaxPool { kernel: 3, stride: 2, padding: 1 },
        vec![act1],
        "stem.pool",
    );

    let stages: [(usize, usize, usize); 4] = [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)];
    let mut in_ch = 64;
    for (stage_idx, &(mid, out, blocks)) in stages.iter().enumerate() {
        let stage = stage_idx + 1;
        let branch_kind = if atac_last_two_stages && stage >= 3 {
            ActivationKind::Atac { r: 2 }
        } else {
            ActivationKind::Relu
        };
        for block in 0..blocks {
            let stride = if stage > 1 && block == 0 { 2 } else { 1 };
            let (s_first, s_mid) = match stride_placement {
                BottleneckStride::FirstConv => (stride, 1),
                BottleneckStride::MiddleConv => (1, stride),
            };
            let l = format!("stage{stage}.block{block}");
            let block_input = cur;
            let c1 = g.conv(block_input, ConvSpec::new(in_ch, mid, 1, s_first, 0), format!("{l}.conv1"));
            let b1 = g.bn(c1, mid, format!("{l}.bn1"));
            let a1 = g.act(b1, branch_kind, mid, format!("{l}.act1"))?;
            let c2 = g.conv(a1, ConvSpec::new(mid, mid, 3, s_mid, 1), format!("{l}.conv2"));
            let b2 = g.bn(c2, mid, format!("{l}.bn2"));
            let a2 = g.act(b2, branch_kind, mid, format!("{l}.act2"))?;
            let c3 = g.conv(a2, ConvSpec::pointwise(mid, out), format!("{l}.conv3"));
            let b3 = g.bn(c3, out, format!("{l}.bn3"));
            let shortcut = if block == 0 {
                let ds = g.conv(
                    block_input,
                    ConvSpec::new(in_ch, out, 1, stride, 0),
                    format!("{l}.downsample.conv"),
                );
                g.bn(ds, out, format!("{l}.downsample.bn"))
            } else {
                block_input
            };
            let sum = g.push(LayerSpec::Add, vec![b3, shortcut], format!("{l}.add"));
            cur = g.act(sum, ActivationKind::Relu, out, format!("{l}.act3"))?;
            in_ch = out;
        }
    }
    let gap = g.push(LayerSpec::GlobalAvgPool, vec![cur], "head.pool");
    let flat = g.push(LayerSpec::Flatten, vec![gap], "head.flatten");
    g.push(
        LayerSpec::Linear { in_features: 2048, out_features: num_classes },
        vec![flat],
        "head.fc",
    );
    let name = match (atac_last_two_stages, stride_placement) {
        (true, _) => "atac-resnet50-v1b".to_string(),
        (false, BottleneckStride::MiddleConv) => "resnet50-v1b".to_string(),
        (false, BottleneckStride::FirstConv) => "resnet50".to_string(),
    };
    Ok(ModelGraph {
        name,
        nodes: g.nodes,
        num_classes,
    })
}

impl ModelGraph {
    /// All activation sites in topological order.
    pub fn activation_sites(&self) -> Vec<ActivationSite> {
        let mut sites: Vec<ActivationSite> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(idx, n)| match n.layer {
                LayerSpec::Activation { kind, channels, site } => Some(ActivationSite {
                    site,
                    node: idx,
                    label: n.label.clone(),
                    channels,
                    kind,
                }),
                _ => None,
            })
            .collect();
        sites.sort_by_key(|s| s.site);
        sites
    }

    /// Rewrites the selected activation sites to `Atac { r }`, leaving the
    /// surrounding topology untouched. Idempotent for a fixed policy.
    pub fn apply_replacement(&self, policy: &ReplacementPolicy, r: usize) -> Result<ModelGraph> {
        let sites = self.activation_sites();
        let chosen = policy.select(sites.len())?;
        let mut out = self.clone();
        for site_idx in chosen {
            let info = &sites[site_idx];
            if r == 0 || !info.channels.is_multiple_of(r) {
                return Err(Error::invalid(format!(
                    "site {} ({}): reduction ratio {r} does not divide channel width {}",
                    info.site, info.label, info.channels
                )));
            }
            if let LayerSpec::Activation { kind, .. } = &mut out.nodes[info.node].layer {
                *kind = ActivationKind::Atac { r };
            }
        }
        Ok(out)
    }

    /// Output shape of every node for a batch of `n`, in node order.
    /// Shapes are `[N,C,H,W]` for feature maps and `[N,D]` after flatten.
    pub fn infer_shapes(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                if i >= idx {
                    return Err(Error::invalid(format!(
                        "node {idx} ({}) consumes later node {i}",
                        node.label
                    )));
                }
            }
            let shape = match &node.layer {
                LayerSpec::Input { channels, height, width } => vec![n, *channels, *height, *width],
                LayerSpec::Conv(spec) => {
                    let s = &shapes[node.inputs[0]];
                    if s[1] != spec.in_channels {
                        return Err(Error::shape(
                            "graph",
                            format!("{}: input {} channels vs conv {}", node.label, s[1], spec.in_channels),
                        ));
                    }
                    let (oh, ow) = spec.output_hw(s[2], s[3])?;
                    vec![n, spec.out_channels, oh, ow]
                }
                LayerSpec::BatchNorm { channels } | LayerSpec::Activation { channels, .. } => {
                    let s = shapes[node.inputs[0]].clone();
                    if s[1] != *channels {
                        return Err(Error::shape(
                            "graph",
                            format!("{}: input {} channels vs layer {}", node.label, s[1], channels),
                        ));
                    }
                    s
                }
                LayerSpec::MaxPool { kernel, stride, padding } => {
                    let s = &shapes[node.inputs[0]];
                    let spec = ConvSpec::new(s[1], s[1], *kernel, *stride, *padding);
                    let (oh, ow) = spec.output_hw(s[2], s[3])?;
                    vec![n, s[1], oh, ow]
                }
                LayerSpec::GlobalAvgPool => {
                    let s = &shapes[node.inputs[0]];
                    vec![n, s[1], 1, 1]
                }
                LayerSpec::Flatten => {
                    let s = &shapes[node.inputs[0]];
                    vec![n, s[1..].iter().product()]
                }
                LayerSpec::Linear { in_features, out_features } => {
                    let s = &shapes[node.inputs[0]];
                    if s.len() != 2 || s[1] != *in_features {
                        return Err(Error::shape(
                            "graph",
                            format!("{}: input {:?} vs linear [{in_features}]", node.label, s),
                        ));
                    }
                    vec![n, *out_features]
                }
                LayerSpec::Add => {
                    let a = &shapes[node.inputs[0]];
                    let b = &shapes[node.inputs[1]];
                    if a != b {
                        return Err(Error::shape(
                            "graph",
                            format!("{}: add of {:?} vs {:?}", node.label, a, b),
                        ));
                    }
                    a.clone()
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    fn layer_param_count(layer: &LayerSpec) -> u64 {
        match layer {
            LayerSpec::Conv(spec) => {
                spec.weight_count() as u64 + if spec.has_bias { spec.out_channels as u64 } else { 0 }
            }
            LayerSpec::BatchNorm { channels } => 2 * *channels as u64,
            LayerSpec::Activation { kind, channels, .. } => match kind.reduction() {
                Some(r) => {
                    let c = *channels as u64;
                    let r = r as u64;
                    2 * c * c / r + 2 * (c / r) + 2 * c
                }
                None => 0,
            },
            LayerSpec::Linear { in_features, out_features } => {
                (*in_features as u64 + 1) * *out_features as u64
            }
            _ => 0,
        }
    }

    /// Total learnable element count: conv weights, BN affine pairs, FC
    /// weights and biases. Running statistics are buffers, not parameters.
    pub fn count_params(&self) -> u64 {
        self.nodes.iter().map(|n| Self::layer_param_count(&n.layer)).sum()
    }

    /// MAC-FLOPs for one forward pass at batch size `input_n`, counting one
    /// multiply-accumulate as one FLOP and elementwise/BN/sigmoid work at
    /// one op per element.
    pub fn count_flops(&self, input_n: usize) -> Result<u64> {
        let shapes = self.infer_shapes(input_n)?;
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .map(|(idx, node)| node_flops(&node.layer, idx, node, &shapes))
            .sum())
    }

    /// Per-stage parameter/FLOP breakdown keyed by label prefix
    /// (`stem`, `stage1` .. `stage4`, `head`).
    pub fn stage_breakdown(&self, input_n: usize) -> Result<Vec<(String, u64, u64)>> {
        let shapes = self.infer_shapes(input_n)?;
        let mut order: Vec<String> = Vec::new();
        let mut params: Vec<u64> = Vec::new();
        let mut flops: Vec<u64> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let stage = node.label.split('.').next().unwrap_or("other").to_string();
            let pos = match order.iter().position(|s| *s == stage) {
                Some(p) => p,
                None => {
                    order.push(stage);
                    params.push(0);
                    flops.push(0);
                    order.len() - 1
                }
            };
            params[pos] += Self::layer_param_count(&node.layer);
            flops[pos] += node_flops(&node.layer, idx, node, &shapes);
        }
        Ok(order
            .into_iter()
            .zip(params.into_iter().zip(flops))
            .map(|(s, (p, f))| (s, p, f))
            .collect())
    }

    /// Human-readable manifest, one layer per line: kind, wiring, shapes,
    /// and the site index for activations. Stable across runs; used for
    /// golden tests and as the checkpoint header.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let desc = match &node.layer {
                LayerSpec::Input { channels, height, width } => {
                    format!("input shape={channels}x{height}x{width}")
                }
                LayerSpec::Conv(s) => format!(
                    "conv in={} out={} kernel={}x{} stride={} pad={} bias={}",
                    s.in_channels, s.out_channels, s.kernel_h, s.kernel_w, s.stride, s.padding, s.has_bias
                ),
                LayerSpec::BatchNorm { channels } => format!("batchnorm channels={channels}"),
                LayerSpec::Activation { kind, channels, site } => {
                    format!("activation kind={kind} channels={channels} site={site}")
                }
                LayerSpec::MaxPool { kernel, stride, padding } => {
                    format!("maxpool kernel={kernel} stride={stride} pad={padding}")
                }
                LayerSpec::GlobalAvgPool => "global_avg_pool".to_string(),
                LayerSpec::Flatten => "flatten".to_string(),
                LayerSpec::Linear { in_features, out_features } => {
                    format!("linear in={in_features} out={out_features}")
                }
                LayerSpec::Add => "add".to_string(),
            };
            let inputs: Vec<String> = node.inputs.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!(
                "{idx:03} {} {desc} inputs=[{}]\n",
                node.label,
                inputs.join(",")
            ));
        }
        out
    }
}

/// Buildable host-network description: family plus the activation-site
/// configuration. Round-trips through a one-line string for checkpoints and
/// run manifests.
#[derive(Debug, Clone, PartialEq)]
pub enum HostSpec {
    Resnet20V2 {
        blocks_per_stage: usize,
        num_classes: usize,
        activation: ActivationKind,
        replacement_ratio: f64,
        reduction: usize,
    },
    /// Original stride placement; the published-cost baseline.
    Resnet50 { num_classes: usize },
    Resnet50V1b { num_classes: usize, atac: bool },
}

impl HostSpec {
    pub fn build(&self) -> Result<ModelGraph> {
        match self {
            HostSpec::Resnet20V2 {
                blocks_per_stage,
                num_classes,
                activation,
                replacement_ratio,
                reduction,
            } => {
                let graph = build_resnet20v2(*blocks_per_stage, *num_classes, *activation)?;
                if *replacement_ratio > 0.0 {
                    graph.apply_replacement(&ReplacementPolicy::Ratio(*replacement_ratio), *reduction)
                } else {
                    Ok(graph)
                }
            }
            HostSpec::Resnet50 { num_classes } => build_resnet50v1(*num_classes),
            HostSpec::Resnet50V1b { num_classes, atac } => build_resnet50v1b(*num_classes, *atac),
        }
    }

    pub fn spec_string(&self) -> String {
        match self {
            HostSpec::Resnet20V2 {
                blocks_per_stage,
                num_classes,
                activation,
                replacement_ratio,
                reduction,
            } => {
                let act = match activation {
                    ActivationKind::Relu => "relu".to_string(),
                    ActivationKind::LeakyRelu { alpha } => format!("leaky_relu:{alpha}"),
                    ActivationKind::Selu => "selu".to_string(),
                    ActivationKind::Swish => "swish".to_string(),
                    ActivationKind::Atac { .. } => "atac".to_string(),
                    ActivationKind::SeActivation { .. } => "se_activation".to_string(),
                };
                format!(
                    "resnet20v2 b={blocks_per_stage} classes={num_classes} activation={act} ratio={replacement_ratio} r={reduction}"
                )
            }
            HostSpec::Resnet50 { num_classes } => format!("resnet50 classes={num_classes}"),
            HostSpec::Resnet50V1b { num_classes, atac } => {
                format!("resnet50v1b classes={num_classes} atac={atac}")
            }
        }
    }

    pub fn parse(text: &str) -> Result<HostSpec> {
        let mut parts = text.split_whitespace();
        let family = parts
            .next()
            .ok_or_else(|| Error::invalid("empty model spec"))?;
        let mut kv = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("model spec field {p:?} is not key=value")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("model spec missing field {k}")))
        };
        match family {
            "resnet20v2" => {
                let reduction: usize = get("r")?
                    .parse()
                    .map_err(|_| Error::invalid("bad r in model spec"))?;
                let act_str = get("activation")?;
                let activation = parse_activation(&act_str, reduction)?;
                Ok(HostSpec::Resnet20V2 {
                    blocks_per_stage: get("b")?
                        .parse()
                        .map_err(|_| Error::invalid("bad b in model spec"))?,
                    num_classes: get("classes")?
                        .parse()
                        .map_err(|_| Error::invalid("bad classes in model spec"))?,
                    activation,
                    replacement_ratio: get("ratio")?
                        .parse()
                        .map_err(|_| Error::invalid("bad ratio in model spec"))?,
                    reduction,
                })
            }
            "resnet50" => Ok(HostSpec::Resnet50 {
                num_classes: get("classes")?
                    .parse()
                    .map_err(|_| Error::invalid("bad classes in model spec"))?,
            }),
            "resnet50v1b" => Ok(HostSpec::Resnet50V1b {
                num_classes: get("classes")?
                    .parse()
                    .map_err(|_| Error::invalid("bad classes in model spec"))?,
                atac: get("atac")?
                    .parse()
                    .map_err(|_| Error::invalid("bad atac flag in model spec"))?,
            }),
            other => Err(Error::invalid(format!("unknown model family {other:?}"))),
        }
    }
}

/// Parses an activation name; `r` supplies the ratio for the unit kinds.
pub fn parse_activation(text: &str, r: usize) -> Result<ActivationKind> {
    if let Some(alpha) = text.strip_prefix("leaky_relu:") {
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| Error::invalid(format!("bad leaky_relu slope {alpha:?}")))?;
        return Ok(ActivationKind::LeakyRelu { alpha });
    }
    match text {
        "relu" => Ok(ActivationKind::Relu),
        "leaky_relu" => Ok(ActivationKind::LeakyRelu { alpha: 0.1 }),
        "selu" => Ok(ActivationKind::Selu),
        "swish" => Ok(ActivationKind::Swish),
        "atac" => Ok(ActivationKind::Atac { r }),
        "se_activation" => Ok(ActivationKind::SeActivation { r }),
        other => Err(Error::invalid(format!("unknown activation {other:?}"))),
    }
}

fn node_flops(layer: &LayerSpec, idx: usize, node: &GraphNode, shapes: &[Vec<usize>]) -> u64 {
    let numel = |s: &Vec<usize>| s.iter().product::<usize>() as u64;
    match layer {
        LayerSpec::Input { .. } | LayerSpec::Flatten => 0,
        LayerSpec::Conv(spec) => {
            let out = &shapes[idx];
            let macs = out[0] as u64
                * spec.out_channels as u64
                * spec.in_channels as u64
                * (spec.kernel_h * spec.kernel_w) as u64
                * (out[2] * out[3]) as u64;
            macs + if spec.has_bias { numel(out) } else { 0 }
        }
        LayerSpec::BatchNorm { .. } | LayerSpec::Add => numel(&shapes[idx]),
        LayerSpec::MaxPool { .. } | LayerSpec::GlobalAvgPool => numel(&shapes[node.inputs[0]]),
        LayerSpec::Linear { in_features, out_features } => {
            let n = shapes[idx][0] as u64;
            n * *in_features as u64 * *out_features as u64 + n * *out_features as u64
        }
        LayerSpec::Activation { kind, channels, .. } => {
            let s = &shapes[idx];
            let (n, c, hw) = (s[0] as u64, *channels as u64, (s[2] * s[3]) as u64);
            match *kind {
                ActivationKind::Atac { r } => {
                    let r = r as u64;
                    2 * n * (c * c / r) * hw + 2 * n * (c / r) * hw + 3 * n * c * hw
                }
                ActivationKind::SeActivation { r } => {
                    let r = r as u64;
                    n * c * hw + 2 * n * (c * c / r) + 2 * n * (c / r) + 2 * n * c + n * c * hw
                }
                _ => numel(s),
            }
        }
    }
}
