//! Translate a configuration into an executable layer program.
//!
//! The graph is a flat list of primitive steps in the execution order the
//! scheduler uses: the initial layer first, then every sub-network bottom-up
//! (lowest resolution first), each block followed by its transition and
//! classifier head. Because that order matches lazy execution, the minimal
//! work needed for classifier k is exactly a contiguous prefix of the list,
//! which makes per-classifier cost accounting a prefix sum.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{validate_or_error, DerivedConfig, RANetConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamRole, ParamStore, Tensor};

/// Index of a feature value slot in an execution.
pub type ValueId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Dense,
    FusionKeep,
    FusionDown,
}

/// Structural plan of one block inside a sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub kind: BlockKind,
    pub layers: usize,
    pub in_scale: usize,
    pub out_scale: usize,
    /// `(sub_network, block)` (1-based) whose export this block fuses.
    pub fusion_source: Option<(usize, usize)>,
    pub transition_after: bool,
    pub classifier_after: bool,
}

/// Per-layer channel split inside a fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionLayerSpec {
    /// New channels produced by the current sub-network's path.
    pub current_new: usize,
    /// New channels produced from the previous sub-network's feature.
    pub source_new: usize,
    /// Whether the source transform must upsample (scales differ by one).
    pub upsample_source: bool,
}

/// How one base feature of the initial layer is produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialLayerSpec {
    /// Sub-network (1-based, bottom-up) this base feature feeds.
    pub sub_network: usize,
    pub scale: usize,
    pub out_channels: usize,
    /// Strided composite conv (halves resolution) vs regular.
    pub strided: bool,
}

/// One primitive operation of the compiled network.
#[derive(Debug, Clone)]
pub enum StepOp {
    Conv { kernel: ParamId, stride: usize, padding: usize },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: usize },
    Relu,
    AvgPool2x2,
    UpsampleBilinear2x,
    Concat,
    GlobalAvgPool,
    Linear { weight: ParamId, bias: ParamId },
}

#[derive(Debug, Clone)]
pub struct Step {
    pub op: StepOp,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
    /// Output shape for a single sample (batch dimension of 1).
    pub out_shape: [usize; 4],
    /// Multiply-accumulates per sample (convolution and linear only).
    pub macs: u64,
    /// Elementwise operations per sample (everything else), tallied separately.
    pub elem_ops: u64,
    pub name: String,
}

/// Compiled network: parameters plus the step program and classifier map.
pub struct NetworkGraph {
    pub config: RANetConfig,
    pub derived: DerivedConfig,
    pub plans: Vec<Vec<BlockPlan>>,
    pub params: ParamStore,
    pub steps: Vec<Step>,
    /// Step index producing classifier k's logits (k-1 indexed).
    pub classifier_steps: Vec<usize>,
    pub num_values: usize,
    /// Value slot of the network input.
    pub input_value: ValueId,
    /// Inclusive prefix MACs per step.
    prefix_macs: Vec<u64>,
    prefix_elem_ops: Vec<u64>,
}

impl NetworkGraph {
    pub fn num_classifiers(&self) -> usize {
        self.classifier_steps.len()
    }

    /// MACs of the minimal execution prefix producing classifier `k` (1-based).
    pub fn count_flops(&self, k: usize) -> Result<u64> {
        if k == 0 || k > self.classifier_steps.len() {
            return Err(Error::Usage(format!(
                "classifier index {} out of range 1..={}",
                k,
                self.classifier_steps.len()
            )));
        }
        Ok(self.prefix_macs[self.classifier_steps[k - 1]])
    }

    pub fn count_elem_ops(&self, k: usize) -> Result<u64> {
        if k == 0 || k > self.classifier_steps.len() {
            return Err(Error::Usage(format!("classifier index {} out of range", k)));
        }
        Ok(self.prefix_elem_ops[self.classifier_steps[k - 1]])
    }

    /// MACs of the whole network (equals `count_flops(K)`).
    pub fn full_cost(&self) -> u64 {
        *self.prefix_macs.last().unwrap_or(&0)
    }

    /// Cumulative MACs through step `idx` inclusive.
    pub fn prefix_macs_at(&self, idx: usize) -> u64 {
        self.prefix_macs[idx]
    }

    /// All K prefix costs in classifier order.
    pub fn classifier_costs(&self) -> Vec<u64> {
        (1..=self.num_classifiers()).map(|k| self.count_flops(k).unwrap()).collect()
    }

    /// Human-readable layer table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<38} {:<10} {:>16} {:>10} {:>12}\n",
            "layer", "kind", "out shape", "params", "MACs"
        ));
        for step in &self.steps {
            let kind = match step.op {
                StepOp::Conv { .. } => "conv",
                StepOp::BatchNorm { .. } => "bn",
                StepOp::Relu => "relu",
                StepOp::AvgPool2x2 => "avgpool",
                StepOp::UpsampleBilinear2x => "upsample",
                StepOp::Concat => "concat",
                StepOp::GlobalAvgPool => "gap",
                StepOp::Linear { .. } => "linear",
            };
            let nparams: usize = match step.op {
                StepOp::Conv { kernel, .. } => self.params.get(kernel).value.numel(),
                StepOp::BatchNorm { gamma, beta, .. } => {
                    self.params.get(gamma).value.numel() + self.params.get(beta).value.numel()
                }
                StepOp::Linear { weight, bias } => {
                    self.params.get(weight).value.numel() + self.params.get(bias).value.numel()
                }
                _ => 0,
            };
            let [_, c, h, w] = step.out_shape;
            out.push_str(&format!(
                "{:<38} {:<10} {:>16} {:>10} {:>12}\n",
                step.name,
                kind,
                format!("{}x{}x{}", c, h, w),
                nparams,
                step.macs
            ));
        }
        out.push_str(&format!(
            "total: {} params, {} MACs, {} elementwise ops, {} classifiers\n",
            self.params.num_scalars(),
            self.full_cost(),
            self.prefix_elem_ops.last().unwrap_or(&0),
            self.num_classifiers()
        ));
        out
    }
}

/// Per-layer split of `growth` new channels between the current path and the
/// previous sub-network, with compression `c` in (0, 1). The current path
/// gets `round((1-c)*g)`; the remainder comes from the source, kept at one
/// channel minimum so fusion never degenerates for tiny growth rates.
pub fn fusion_split(growth: usize, compression: f64) -> (usize, usize) {
    let mut current = ((1.0 - compression) * growth as f64).round() as usize;
    if growth >= 2 && current >= growth {
        current = growth - 1;
    }
    if current == 0 {
        current = growth;
    }
    (current, growth - current)
}

/// Plan one fusion layer: channel split plus the source transform kind.
pub fn plan_fusion_layer(
    kind: BlockKind,
    current_scale: usize,
    source_scale: usize,
    growth: usize,
    compression: f64,
) -> FusionLayerSpec {
    let (current_new, source_new) = fusion_split(growth, compression);
    let upsample_source = match kind {
        BlockKind::FusionKeep => current_scale != source_scale,
        _ => false,
    };
    FusionLayerSpec { current_new, source_new, upsample_source }
}

/// Plan the initial layer: H base features generated top-down, each produced
/// from the previous one by a strided composite conv when its scale drops.
pub fn plan_initial_layer(cfg: &RANetConfig) -> Result<Vec<InitialLayerSpec>> {
    validate_or_error(cfg)?;
    let h = cfg.num_subnetworks();
    let mut specs = Vec::with_capacity(h);
    for (pos, sub) in (0..h).rev().enumerate() {
        let strided = if pos == 0 {
            false
        } else {
            cfg.scale_of_base[sub] < cfg.scale_of_base[sub + 1]
        };
        specs.push(InitialLayerSpec {
            sub_network: sub + 1,
            scale: cfg.scale_of_base[sub],
            out_channels: cfg.base_channels[sub],
            strided,
        });
    }
    Ok(specs)
}

/// Plan sub-network `h` (1-based): block kinds, downsample positions, fusion
/// sources, transitions, and classifier attachment.
pub fn plan_subnetwork(cfg: &RANetConfig, derived: &DerivedConfig, h: usize) -> Result<Vec<BlockPlan>> {
    if h == 0 || h > cfg.num_subnetworks() {
        return Err(Error::Usage(format!("sub-network {} out of range", h)));
    }
    let idx = h - 1;
    let b = cfg.blocks[idx];
    let n_fusion = if idx == 0 { 0 } else { cfg.blocks[idx - 1] };
    let down: &[usize] = &derived.downsample_blocks[idx];
    if down.iter().any(|&d| d > n_fusion) {
        return Err(Error::Config(format!(
            "sub-network {} needs a downsampling block beyond its {} fusion positions",
            h, n_fusion
        )));
    }
    let first_classifier = derived.classifier_blocks[idx][0];
    let mut plans = Vec::with_capacity(b);
    let mut scale = cfg.scale_of_base[idx];
    for i in 1..=b {
        let is_down = down.contains(&i);
        let is_fusion = i <= n_fusion;
        let kind = if is_down {
            BlockKind::FusionDown
        } else if is_fusion {
            BlockKind::FusionKeep
        } else {
            BlockKind::Dense
        };
        let out_scale = if is_down { scale - 1 } else { scale };
        plans.push(BlockPlan {
            kind,
            layers: derived.layers_per_block[idx][i - 1],
            in_scale: scale,
            out_scale,
            fusion_source: if is_fusion { Some((h - 1, i)) } else { None },
            transition_after: is_down || i == first_classifier,
            classifier_after: derived.classifier_blocks[idx].contains(&i),
        });
        scale = out_scale;
    }
    debug_assert_eq!(scale, 1, "every sub-network must end at the lowest scale");
    Ok(plans)
}

/// A feature value tracked during graph construction.
#[derive(Debug, Clone, Copy)]
struct Feat {
    id: ValueId,
    channels: usize,
    height: usize,
    width: usize,
    scale: usize,
}

struct GraphBuilder {
    cfg: RANetConfig,
    params: ParamStore,
    steps: Vec<Step>,
    classifier_steps: Vec<usize>,
    next_value: ValueId,
    rng: ChaCha20Rng,
}

impl GraphBuilder {
    fn value(&mut self) -> ValueId {
        let v = self.next_value;
        self.next_value += 1;
        v
    }

    fn normal_tensor(&mut self, shape: [usize; 4], std: f64) -> Tensor {
        let dist = Normal::new(0.0f64, std).unwrap();
        let data: Vec<f32> =
            (0..shape.iter().product()).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn push(&mut self, op: StepOp, inputs: Vec<ValueId>, out: Feat, macs: u64, elem: u64, name: String) {
        self.steps.push(Step {
            op,
            inputs,
            output: out.id,
            out_shape: [1, out.channels, out.height, out.width],
            macs,
            elem_ops: elem,
            name,
        });
    }

    fn conv(&mut self, x: Feat, c_out: usize, k: usize, stride: usize, padding: usize, name: &str) -> Feat {
        let fan_in = x.channels * k * k;
        let kernel = self.normal_tensor([c_out, x.channels, k, k], (2.0 / fan_in as f64).sqrt());
        let pid = self.params.add(kernel, ParamRole::ConvKernel);
        let oh = (x.height + 2 * padding - k) / stride + 1;
        let ow = (x.width + 2 * padding - k) / stride + 1;
        let out = Feat {
            id: self.value(),
            channels: c_out,
            height: oh,
            width: ow,
            scale: if stride == 2 { x.scale - 1 } else { x.scale },
        };
        let macs = (k * k * x.channels * c_out * oh * ow) as u64;
        self.push(
            StepOp::Conv { kernel: pid, stride, padding },
            vec![x.id],
            out,
            macs,
            0,
            format!("{}/conv{}x{}", name, k, k),
        );
        out
    }

    fn bn_relu(&mut self, x: Feat, name: &str) -> Feat {
        let gamma = self.params.add(Tensor::full([1, x.channels, 1, 1], 1.0), ParamRole::BnGamma);
        let beta = self.params.add(Tensor::zeros([1, x.channels, 1, 1]), ParamRole::BnBeta);
        let stats = self.params.add_bn_stats(x.channels);
        let numel = (x.channels * x.height * x.width) as u64;
        let bn_out = Feat { id: self.value(), ..x };
        self.push(
            StepOp::BatchNorm { gamma, beta, stats },
            vec![x.id],
            bn_out,
            0,
            numel,
            format!("{}/bn", name),
        );
        let relu_out = Feat { id: self.value(), ..x };
        self.push(StepOp::Relu, vec![bn_out.id], relu_out, 0, numel, format!("{}/relu", name));
        relu_out
    }

    /// Composite conv layer: BN-ReLU-1x1 bottleneck, BN-ReLU-3x3. Stride 2 on
    /// the 3x3 makes it the strided (downsampling) variant.
    fn composite_conv(&mut self, x: Feat, c_out: usize, stride: usize, name: &str) -> Feat {
        let bneck = (self.cfg.bottleneck_multiplier * c_out).min(x.channels);
        let a = self.bn_relu(x, &format!("{}/bneck", name));
        let b = self.conv(a, bneck, 1, 1, 0, &format!("{}/bneck", name));
        let c = self.bn_relu(b, name);
        self.conv(c, c_out, 3, stride, 1, name)
    }

    fn concat(&mut self, parts: &[Feat], name: &str) -> Feat {
        debug_assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let out = Feat { id: self.value(), channels, ..parts[0] };
        self.push(
            StepOp::Concat,
            parts.iter().map(|p| p.id).collect(),
            out,
            0,
            0,
            format!("{}/concat", name),
        );
        out
    }

    fn avg_pool(&mut self, x: Feat, name: &str) -> Feat {
        let out = Feat {
            id: self.value(),
            channels: x.channels,
            height: x.height / 2,
            width: x.width / 2,
            scale: x.scale - 1,
        };
        let elem = (out.channels * out.height * out.width) as u64;
        self.push(StepOp::AvgPool2x2, vec![x.id], out, 0, elem, format!("{}/pool", name));
        out
    }

    fn upsample(&mut self, x: Feat, name: &str) -> Feat {
        let out = Feat {
            id: self.value(),
            channels: x.channels,
            height: x.height * 2,
            width: x.width * 2,
            scale: x.scale + 1,
        };
        let elem = (out.channels * out.height * out.width) as u64;
        self.push(StepOp::UpsampleBilinear2x, vec![x.id], out, 0, elem, format!("{}/up", name));
        out
    }

    /// 1x1 conv halving channels, then BN and ReLU.
    fn transition(&mut self, x: Feat, name: &str) -> Feat {
        let c_out = (x.channels / 2).max(1);
        let y = self.conv(x, c_out, 1, 1, 0, &format!("{}/trans", name));
        self.bn_relu(y, &format!("{}/trans", name))
    }

    fn classifier_head(&mut self, x: Feat, name: &str) -> Feat {
        let a = self.bn_relu(x, &format!("{}/head", name));
        let g = Feat { id: self.value(), channels: a.channels, height: 1, width: 1, scale: a.scale };
        self.push(
            StepOp::GlobalAvgPool,
            vec![a.id],
            g,
            0,
            (a.channels * a.height * a.width) as u64,
            format!("{}/head/gap", name),
        );
        let d = g.channels;
        let classes = self.cfg.num_classes;
        let weight = self.normal_tensor([classes, d, 1, 1], (1.0 / d as f64).sqrt());
        let wid = self.params.add(weight, ParamRole::LinearWeight);
        let bid = self.params.add(Tensor::zeros([classes, 1, 1, 1]), ParamRole::LinearBias);
        let out = Feat { id: self.value(), channels: classes, height: 1, width: 1, scale: g.scale };
        self.push(
            StepOp::Linear { weight: wid, bias: bid },
            vec![g.id],
            out,
            (d * classes) as u64,
            0,
            format!("{}/head/linear", name),
        );
        self.classifier_steps.push(self.steps.len() - 1);
        out
    }
}

/// Instantiate parameters and compile the full step program.
pub fn build_graph(cfg: &RANetConfig, seed: u64) -> Result<NetworkGraph> {
    let derived = validate_or_error(cfg)?;
    let h_count = cfg.num_subnetworks();
    let plans: Vec<Vec<BlockPlan>> =
        (1..=h_count).map(|h| plan_subnetwork(cfg, &derived, h)).collect::<Result<_>>()?;

    let mut b = GraphBuilder {
        cfg: cfg.clone(),
        params: ParamStore::new(),
        steps: Vec::new(),
        classifier_steps: Vec::new(),
        next_value: 0,
        rng: ChaCha20Rng::seed_from_u64(seed),
    };

    let input = Feat {
        id: b.value(),
        channels: cfg.input_channels,
        height: cfg.input_resolution.0,
        width: cfg.input_resolution.1,
        scale: cfg.num_scales,
    };

    // Initial layer: base features generated top-down.
    let init_specs = plan_initial_layer(cfg)?;
    let mut bases: Vec<Option<Feat>> = vec![None; h_count];
    let mut prev = input;
    for spec in &init_specs {
        let name = format!("init/base{}", spec.sub_network);
        let stride = if spec.strided { 2 } else { 1 };
        let feat = b.composite_conv(prev, spec.out_channels, stride, &name);
        bases[spec.sub_network - 1] = Some(feat);
        prev = feat;
    }

    // Sub-networks bottom-up. `exports` holds each block's fusion feature
    // (taken at the block's input scale, before any transition).
    let mut exports: Vec<Vec<Feat>> = Vec::with_capacity(h_count);
    for sub in 0..h_count {
        let growth = cfg.growth_rates[sub];
        let (g_cur, g_src) = fusion_split(growth, cfg.fusion_compression);
        let mut d = bases[sub].unwrap();
        let mut sub_exports = Vec::with_capacity(cfg.blocks[sub]);
        for (bi, plan) in plans[sub].iter().enumerate() {
            let block_no = bi + 1;
            let name = format!("sn{}/b{}", sub + 1, block_no);
            debug_assert_eq!(d.scale, plan.in_scale);
            let export;
            match plan.kind {
                BlockKind::Dense => {
                    for j in 1..=plan.layers {
                        let cur = b.composite_conv(d, growth, 1, &format!("{}/l{}", name, j));
                        d = b.concat(&[d, cur], &format!("{}/l{}", name, j));
                    }
                    export = d;
                }
                BlockKind::FusionKeep => {
                    let src = exports[sub - 1][bi];
                    let spec = plan_fusion_layer(
                        plan.kind,
                        plan.in_scale,
                        src.scale,
                        growth,
                        cfg.fusion_compression,
                    );
                    for j in 1..=plan.layers {
                        let cur = b.composite_conv(d, spec.current_new, 1, &format!("{}/l{}", name, j));
                        let mut s =
                            b.composite_conv(src, spec.source_new, 1, &format!("{}/l{}/src", name, j));
                        if spec.upsample_source {
                            s = b.upsample(s, &format!("{}/l{}/src", name, j));
                        }
                        d = b.concat(&[d, cur, s], &format!("{}/l{}", name, j));
                    }
                    export = d;
                }
                BlockKind::FusionDown => {
                    for j in 1..plan.layers {
                        let cur = b.composite_conv(d, g_cur, 1, &format!("{}/l{}", name, j));
                        d = b.concat(&[d, cur], &format!("{}/l{}", name, j));
                    }
                    export = d;
                    let last =
                        b.composite_conv(d, g_cur, 2, &format!("{}/l{}", name, plan.layers));
                    let pooled = b.avg_pool(d, &name);
                    let mut parts = vec![pooled, last];
                    if plan.fusion_source.is_some() {
                        let src = exports[sub - 1][bi];
                        let s = b.composite_conv(
                            src,
                            plan.layers * g_src,
                            1,
                            &format!("{}/src", name),
                        );
                        parts.push(s);
                    }
                    d = b.concat(&parts, &format!("{}/down", name));
                }
            }
            sub_exports.push(export);
            debug_assert_eq!(d.scale, plan.out_scale);
            if plan.transition_after {
                d = b.transition(d, &name);
            }
            if plan.classifier_after {
                let k = b.classifier_steps.len() + 1;
                b.classifier_head(d, &format!("sn{}/cls{}", sub + 1, k));
            }
        }
        exports.push(sub_exports);
    }

    let mut prefix_macs = Vec::with_capacity(b.steps.len());
    let mut prefix_elem = Vec::with_capacity(b.steps.len());
    let (mut am, mut ae) = (0u64, 0u64);
    for s in &b.steps {
        am += s.macs;
        ae += s.elem_ops;
        prefix_macs.push(am);
        prefix_elem.push(ae);
    }

    debug_assert_eq!(b.classifier_steps.len(), derived.num_classifiers);
    Ok(NetworkGraph {
        config: cfg.clone(),
        derived,
        plans,
        params: b.params,
        steps: b.steps,
        classifier_steps: b.classifier_steps,
        num_values: b.next_value,
        input_value: input.id,
        prefix_macs,
        prefix_elem_ops: prefix_elem,
    })
}
