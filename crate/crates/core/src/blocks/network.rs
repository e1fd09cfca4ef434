use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BlockKind, BlockSpec, LayerRole, NetworkSpec, Readout, HEAD_CHANNELS, HEAD_STRIDES, STEM_CHANNELS};
use crate::error::{Error, Result};
use crate::gne::second_moment;
use crate::spiking::{lif, lif_last_membrane, tdbn, BnMode, BnStats, LifConfig, TdbnConfig};
use crate::tensor::{
    add, add_channel_bias, concat_channels, conv2d, conv_output_len, maxpool2d, mean_over_time, repeat_time,
    upsample_nearest2x, Graph, NodeId, Scalar, Tensor,
};

/// Initial objectness logit of the detection convs; most cells are empty.
const OBJECTNESS_PRIOR: f64 = -4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvDef {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub role: LayerRole,
    pub bias: bool,
}

impl ConvDef {
    fn new(name: String, cin: usize, cout: usize, k: usize, stride: usize, role: LayerRole) -> Self {
        Self { name, cin, cout, k, stride, pad: k / 2, role, bias: false }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Lif,
    Conv(ConvDef),
    Bn { name: String, channels: usize },
    MaxPool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    Path(Vec<Layer>),
    /// Max-pool, then stack the pooled input with `branch(pooled)`.
    PoolConcat(Vec<Layer>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub spec: BlockSpec,
    pub residual: Vec<Layer>,
    pub shortcut: Shortcut,
}

fn conv_layer(prefix: &str, suffix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Layer {
    Layer::Conv(ConvDef::new(format!("{prefix}.{suffix}"), cin, cout, k, stride, LayerRole::SpikeFed))
}

fn bn_layer(prefix: &str, suffix: &str, channels: usize) -> Layer {
    Layer::Bn { name: format!("{prefix}.{suffix}"), channels }
}

impl Block {
    pub fn new(name: impl Into<String>, spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let BlockSpec { kind, in_channels: cin, out_channels: cout, stride } = spec;
        let n = name.as_str();
        let lif_first = || {
            vec![
                Layer::Lif,
                conv_layer(n, "res.conv1", cin, cout, 3, stride),
                bn_layer(n, "res.bn1", cout),
                Layer::Lif,
                conv_layer(n, "res.conv2", cout, cout, 3, 1),
                bn_layer(n, "res.bn2", cout),
            ]
        };
        let conv_first = || {
            vec![
                conv_layer(n, "res.conv1", cin, cout, 3, stride),
                bn_layer(n, "res.bn1", cout),
                Layer::Lif,
                conv_layer(n, "res.conv2", cout, cout, 3, 1),
                bn_layer(n, "res.bn2", cout),
                Layer::Lif,
            ]
        };
        let (residual, shortcut) = match kind {
            BlockKind::Ems1 if cin == cout && stride == 1 => (lif_first(), Shortcut::Identity),
            BlockKind::Ems1 => {
                let mut path = Vec::new();
                if stride == 2 {
                    path.push(Layer::MaxPool);
                }
                path.extend([Layer::Lif, conv_layer(n, "short.conv", cin, cout, 1, 1), bn_layer(n, "short.bn", cout)]);
                (lif_first(), Shortcut::Path(path))
            }
            BlockKind::Ems2 => {
                let branch = vec![
                    Layer::Lif,
                    conv_layer(n, "short.conv", cin, cout - cin, 1, 1),
                    bn_layer(n, "short.bn", cout - cin),
                ];
                (lif_first(), Shortcut::PoolConcat(branch))
            }
            BlockKind::Ms => (lif_first(), Shortcut::Identity),
            BlockKind::MsDown => {
                let path = vec![conv_layer(n, "short.conv", cin, cout, 1, stride), bn_layer(n, "short.bn", cout)];
                (lif_first(), Shortcut::Path(path))
            }
            BlockKind::Sew => (conv_first(), Shortcut::Identity),
            BlockKind::SewDown => {
                let path = vec![
                    conv_layer(n, "short.conv", cin, cout, 1, stride),
                    bn_layer(n, "short.bn", cout),
                    Layer::Lif,
                ];
                (conv_first(), Shortcut::Path(path))
            }
        };
        Ok(Self { name, spec, residual, shortcut })
    }

    /// All layers of the block in a fixed order: residual path, then shortcut.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        let short: &[Layer] = match &self.shortcut {
            Shortcut::Identity => &[],
            Shortcut::Path(p) | Shortcut::PoolConcat(p) => p,
        };
        self.residual.iter().chain(short)
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvDef> {
        self.layers().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Name of the batch norm whose scale sets the shortcut's output moment.
    pub fn shortcut_bn(&self) -> Option<&str> {
        match &self.shortcut {
            Shortcut::Identity => None,
            Shortcut::Path(p) | Shortcut::PoolConcat(p) => p.iter().find_map(|l| match l {
                Layer::Bn { name, .. } => Some(name.as_str()),
                _ => None,
            }),
        }
    }
}

/// Named parameters and batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    pub params: BTreeMap<String, Tensor<S>>,
    pub buffers: BTreeMap<String, BnStats<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, b)| {
                    let conv = |v: &[S]| v.iter().map(|x| T::of(x.as_f64())).collect();
                    (k.clone(), BnStats { mean: conv(&b.mean), var: conv(&b.var) })
                })
                .collect(),
        }
    }

    fn init_layer(&mut self, layer: &Layer, seed: u64) {
        match layer {
            Layer::Conv(c) => {
                let fan_in = c.cin * c.k * c.k;
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&c.weight_name()));
                let normal = Normal::new(0.0, std).expect("positive std");
                let w = Tensor::from_fn(&[c.cout, c.cin, c.k, c.k], |_| S::of(normal.sample(&mut rng)));
                self.params.insert(c.weight_name(), w);
                if c.bias {
                    self.params.insert(c.bias_name(), Tensor::zeros(&[c.cout]));
                }
            }
            Layer::Bn { name, channels } => {
                self.params.insert(format!("{name}.scale"), Tensor::ones(&[*channels]));
                self.params.insert(format!("{name}.shift"), Tensor::zeros(&[*channels]));
                self.buffers.insert(name.clone(), BnStats::new(*channels));
            }
            Layer::Lif | Layer::MaxPool => {}
        }
    }
}

/// FNV-1a, so that a parameter's initial value depends on its name and the
/// seed only. Networks of different depth or family share what they can.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug)]
struct Head {
    coarse: Block,
    fine: Block,
    /// Fine (stride 16) first, then coarse (stride 32).
    detect: [ConvDef; 2],
    /// Backbone block indices tapped for the fine and coarse scales.
    taps: [usize; 2],
}

/// Network input. Static images are encoded once and repeated over time;
/// sequences are already time-major `[T·B, C, H, W]`.
#[derive(Clone, Debug)]
pub enum Input<S: Scalar = f32> {
    Static(Tensor<S>),
    Sequence(Tensor<S>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub steps: usize,
    pub mode: BnMode,
    /// In train mode, whether running statistics absorb this batch.
    pub update_running: bool,
    /// Whether parameters become differentiable leaves.
    pub param_grad: bool,
    /// Whether the input becomes a differentiable leaf.
    pub input_grad: bool,
    /// Collect per-conv input statistics and per-block output moments.
    pub record: bool,
    /// Which paths of each block contribute to its output.
    pub branch: Branch,
}

/// Path selection for Jacobian diagnostics; normal runs use `Both`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Branch {
    #[default]
    Both,
    Residual,
    Shortcut,
}

impl ForwardOptions {
    pub fn train(steps: usize) -> Self {
        Self {
            steps,
            mode: BnMode::Train,
            update_running: true,
            param_grad: true,
            input_grad: false,
            record: false,
            branch: Branch::Both,
        }
    }

    pub fn infer(steps: usize) -> Self {
        Self { mode: BnMode::Infer, update_running: false, param_grad: false, ..Self::train(steps) }
    }

    /// Batch statistics without touching the running ones; used by probes.
    pub fn probe(steps: usize) -> Self {
        Self { update_running: false, param_grad: false, record: true, ..Self::train(steps) }
    }
}

/// Input statistics of one convolution over one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvRecord {
    pub name: String,
    pub block: String,
    pub role: LayerRole,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub input_sum: f64,
    pub input_count: u64,
    pub non_binary: u64,
    pub max_input: f64,
}

impl ConvRecord {
    /// Synaptic operations per image and time step: `k²·Cin·Cout·Ho·Wo`.
    pub fn op_capacity(&self) -> u64 {
        (self.k * self.k * self.cin * self.cout * self.out_h * self.out_w) as u64
    }

    pub fn is_binary(&self) -> bool {
        self.non_binary == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput {
    pub node: NodeId,
    pub stride: usize,
}

pub struct ForwardPass<S: Scalar = f32> {
    pub graph: Graph<S>,
    pub input: NodeId,
    /// Prediction maps `[B, A·(5+C), h, w]`, finest first. Empty without a head.
    pub outputs: Vec<ScaleOutput>,
    /// Output of the last backbone block, `[T·B, C, h, w]`.
    pub features: NodeId,
    /// Input and output of each backbone block, in order.
    pub block_inputs: Vec<NodeId>,
    pub block_outputs: Vec<NodeId>,
    pub params: BTreeMap<String, NodeId>,
    pub records: Vec<ConvRecord>,
    /// Second moment of the stem output and of every block output.
    pub moments: Vec<(String, f64)>,
}

struct Ctx<'a, S: Scalar> {
    graph: Graph<S>,
    params: &'a BTreeMap<String, Tensor<S>>,
    buffers: &'a mut BTreeMap<String, BnStats<S>>,
    opts: ForwardOptions,
    lif: LifConfig,
    bn: TdbnConfig,
    leaves: BTreeMap<String, NodeId>,
    records: Vec<ConvRecord>,
    moments: Vec<(String, f64)>,
}

impl<S: Scalar> Ctx<'_, S> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let value = self.params.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let id = self.graph.leaf(value.clone(), self.opts.param_grad);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    fn record_moment(&mut self, name: &str, x: NodeId) {
        if self.opts.record {
            self.moments.push((name.to_string(), second_moment(self.graph.value(x))));
        }
    }

    fn conv(&mut self, def: &ConvDef, block: &str, x: NodeId) -> Result<NodeId> {
        let w = self.param(&def.weight_name())?;
        let mut y = conv2d(&mut self.graph, x, w, def.stride, def.pad)?;
        if def.bias {
            let b = self.param(&def.bias_name())?;
            y = add_channel_bias(&mut self.graph, y, b)?;
        }
        if self.opts.record {
            let input = self.graph.value(x);
            let mut rec = ConvRecord {
                name: def.name.clone(),
                block: block.to_string(),
                role: def.role,
                k: def.k,
                cin: def.cin,
                cout: def.cout,
                out_h: self.graph.value(y).shape()[2],
                out_w: self.graph.value(y).shape()[3],
                input_sum: 0.0,
                input_count: input.numel() as u64,
                non_binary: 0,
                max_input: 0.0,
            };
            for &v in input.data() {
                let v = v.as_f64();
                rec.input_sum += v;
                if v != 0.0 && v != 1.0 {
                    rec.non_binary += 1;
                }
                rec.max_input = rec.max_input.max(v.abs());
            }
            self.records.push(rec);
        }
        Ok(y)
    }

    fn layer(&mut self, layer: &Layer, block: &str, x: NodeId) -> Result<NodeId> {
        match layer {
            Layer::Lif => lif(&mut self.graph, x, self.opts.steps, &self.lif),
            Layer::Conv(def) => self.conv(def, block, x),
            Layer::Bn { name, .. } => {
                let scale = self.param(&format!("{name}.scale"))?;
                let shift = self.param(&format!("{name}.shift"))?;
                let stats = self
                    .buffers
                    .get_mut(name)
                    .ok_or_else(|| Error::Config(format!("missing running statistics for {name}")))?;
                tdbn(&mut self.graph, x, scale, shift, stats, &self.bn, self.opts.mode)
            }
            Layer::MaxPool => maxpool2d(&mut self.graph, x, 2, 2),
        }
    }

    fn path(&mut self, layers: &[Layer], block: &str, mut x: NodeId) -> Result<NodeId> {
        for layer in layers {
            x = self.layer(layer, block, x)?;
        }
        Ok(x)
    }

    fn block(&mut self, block: &Block, x: NodeId) -> Result<NodeId> {
        if block.spec.stride == 2 {
            let shape = self.graph.value(x).shape();
            if !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
                return Err(Error::shape(
                    "block",
                    format!("{} halves the resolution but its input is {}x{}", block.name, shape[2], shape[3]),
                ));
            }
        }
        let branch = self.opts.branch;
        let residual = self.path(&block.residual, &block.name, x)?;
        if branch == Branch::Residual {
            return Ok(residual);
        }
        let shortcut = match &block.shortcut {
            Shortcut::Identity => x,
            Shortcut::Path(p) => self.path(p, &block.name, x)?,
            Shortcut::PoolConcat(branch) => {
                let pooled = maxpool2d(&mut self.graph, x, 2, 2)?;
                let grown = self.path(branch, &block.name, pooled)?;
                concat_channels(&mut self.graph, pooled, grown)?
            }
        };
        if branch == Branch::Shortcut {
            return Ok(shortcut);
        }
        let out = add(&mut self.graph, residual, shortcut)?;
        self.record_moment(&block.name, out);
        Ok(out)
    }

    fn readout(&mut self, readout: Readout, x: NodeId) -> Result<NodeId> {
        match readout {
            Readout::Membrane => lif_last_membrane(&mut self.graph, x, self.opts.steps, &self.lif),
            Readout::RateCoded => {
                let spikes = lif(&mut self.graph, x, self.opts.steps, &self.lif)?;
                mean_over_time(&mut self.graph, spikes, self.opts.steps)
            }
        }
    }
}

/// A convolution and its output size for one input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeometry {
    pub block: String,
    pub def: ConvDef,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Synaptic operations per image and time step: `k²·Cin·Cout·Ho·Wo`.
    pub fn op_capacity(&self) -> u64 {
        (self.def.k * self.def.k * self.def.cin * self.def.cout * self.out_h * self.out_w) as u64
    }
}

fn walk_shapes(
    layers: &[Layer],
    block: &str,
    (mut h, mut w): (usize, usize),
    out: &mut Vec<ConvGeometry>,
) -> Result<(usize, usize)> {
    for layer in layers {
        match layer {
            Layer::Conv(def) => {
                let too_small = || Error::shape("conv2d", format!("{} does not fit a {h}x{w} input", def.name));
                let oh = conv_output_len(h, def.k, def.stride, def.pad).ok_or_else(too_small)?;
                let ow = conv_output_len(w, def.k, def.stride, def.pad).ok_or_else(too_small)?;
                out.push(ConvGeometry { block: block.to_string(), def: def.clone(), out_h: oh, out_w: ow });
                (h, w) = (oh, ow);
            }
            Layer::MaxPool => {
                if h < 2 || w < 2 {
                    return Err(Error::shape("maxpool2d", format!("cannot pool a {h}x{w} input")));
                }
                (h, w) = (h / 2, w / 2);
            }
            Layer::Lif | Layer::Bn { .. } => {}
        }
    }
    Ok((h, w))
}

fn block_shapes(block: &Block, size: (usize, usize), out: &mut Vec<ConvGeometry>) -> Result<(usize, usize)> {
    if block.spec.stride == 2 && (!size.0.is_multiple_of(2) || !size.1.is_multiple_of(2)) {
        return Err(Error::shape(
            "block",
            format!("{} halves the resolution but its input is {}x{}", block.name, size.0, size.1),
        ));
    }
    let res = walk_shapes(&block.residual, &block.name, size, out)?;
    match &block.shortcut {
        Shortcut::Identity => {}
        Shortcut::Path(p) => {
            walk_shapes(p, &block.name, size, out)?;
        }
        Shortcut::PoolConcat(p) => {
            walk_shapes(p, &block.name, (size.0 / 2, size.1 / 2), out)?;
        }
    }
    Ok(res)
}

/// A spiking network: an optional encoding stem, a chain of residual blocks
/// and an optional two-scale detection head.
#[derive(Clone, Debug)]
pub struct Network<S: Scalar = f32> {
    pub spec: Option<NetworkSpec>,
    pub lif: LifConfig,
    pub bn: TdbnConfig,
    pub stem: Vec<Layer>,
    pub blocks: Vec<Block>,
    head: Option<Head>,
    pub store: ParamStore<S>,
}

impl<S: Scalar> Network<S> {
    /// Backbone (and head, if the spec has one) with freshly initialized
    /// parameters.
    pub fn new(spec: &NetworkSpec, lif: LifConfig, bn: TdbnConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        lif.validate()?;
        bn.validate()?;
        let mut stem = vec![
            Layer::Conv(ConvDef::new("stem.conv".into(), spec.in_channels, STEM_CHANNELS, 3, 2, LayerRole::Encode)),
            Layer::Bn { name: "stem.bn".into(), channels: STEM_CHANNELS },
        ];
        if spec.family == super::BlockFamily::Sew {
            stem.push(Layer::Lif);
        }
        let blocks = spec
            .backbone_blocks()?
            .into_iter()
            .map(|(name, bs)| Block::new(name, bs))
            .collect::<Result<Vec<_>>>()?;
        let head = match &spec.head {
            None => None,
            Some(hs) => {
                let counts = spec.blocks_per_stage()?;
                let coarse_tap = blocks.len() - 1;
                let fine_tap = coarse_tap - counts[3];
                let kind = spec.family.head();
                let c4 = blocks[coarse_tap].spec.out_channels;
                let c3 = blocks[fine_tap].spec.out_channels;
                let coarse = Block::new("head.coarse", BlockSpec::new(kind, c4, HEAD_CHANNELS[0], 1))?;
                let fine = Block::new("head.fine", BlockSpec::new(kind, HEAD_CHANNELS[0] + c3, HEAD_CHANNELS[1], 1))?;
                let out = hs.prediction_channels();
                let det = |name: &str, cin| ConvDef {
                    bias: true,
                    ..ConvDef::new(name.into(), cin, out, 1, 1, LayerRole::MembraneFed)
                };
                Some(Head {
                    coarse,
                    fine,
                    detect: [det("head.detect_fine", HEAD_CHANNELS[1]), det("head.detect_coarse", HEAD_CHANNELS[0])],
                    taps: [fine_tap, coarse_tap],
                })
            }
        };
        let mut net = Self { spec: Some(spec.clone()), lif, bn, stem, blocks, head, store: ParamStore::default() };
        net.init_params(seed);
        if let (Some(head), Some(hs)) = (&net.head, &spec.head) {
            for det in &head.detect {
                let bias = net.store.params.get_mut(&det.bias_name()).expect("initialized");
                for a in 0..hs.anchors_per_scale {
                    bias.data_mut()[a * (5 + hs.classes) + 4] = S::of(OBJECTNESS_PRIOR);
                }
            }
        }
        Ok(net)
    }

    /// A bare chain of blocks without stem or head.
    pub fn chain(blocks: &[(String, BlockSpec)], lif: LifConfig, bn: TdbnConfig, seed: u64) -> Result<Self> {
        lif.validate()?;
        bn.validate()?;
        for pair in blocks.windows(2) {
            if pair[0].1.out_channels != pair[1].1.in_channels {
                return Err(Error::Config(format!(
                    "{} outputs {} channels but {} expects {}",
                    pair[0].0, pair[0].1.out_channels, pair[1].0, pair[1].1.in_channels
                )));
            }
        }
        let blocks = blocks.iter().map(|(n, s)| Block::new(n.clone(), *s)).collect::<Result<Vec<_>>>()?;
        let mut net = Self { spec: None, lif, bn, stem: Vec::new(), blocks, head: None, store: ParamStore::default() };
        net.init_params(seed);
        Ok(net)
    }

    fn init_params(&mut self, seed: u64) {
        let mut layers: Vec<Layer> = self.stem.clone();
        for b in self.all_blocks() {
            layers.extend(b.layers().cloned());
        }
        if let Some(head) = &self.head {
            layers.extend(head.detect.iter().cloned().map(Layer::Conv));
        }
        for layer in &layers {
            self.store.init_layer(layer, seed);
        }
    }

    /// Backbone blocks followed by head blocks.
    pub fn all_blocks(&self) -> impl Iterator<Item = &Block> {
        let head: Vec<&Block> = self.head.iter().flat_map(|h| [&h.coarse, &h.fine]).collect();
        self.blocks.iter().chain(head)
    }

    /// Every convolution with the block it belongs to, in a fixed order.
    pub fn convs(&self) -> Vec<(String, ConvDef)> {
        let mut out = Vec::new();
        for l in &self.stem {
            if let Layer::Conv(c) = l {
                out.push(("stem".to_string(), c.clone()));
            }
        }
        for b in self.all_blocks() {
            out.extend(b.convs().map(|c| (b.name.clone(), c.clone())));
        }
        if let Some(head) = &self.head {
            out.extend(head.detect.iter().map(|c| ("head".to_string(), c.clone())));
        }
        out
    }

    /// Output size of every convolution, in `convs()` order, for a
    /// `height × width` input. Follows the same layer lists as `forward`
    /// without computing anything.
    pub fn conv_geometry(&self, height: usize, width: usize) -> Result<Vec<ConvGeometry>> {
        if !self.stem.is_empty() && (!height.is_multiple_of(32) || !width.is_multiple_of(32)) {
            return Err(Error::shape("network input", format!("resolution {height}x{width} must be a multiple of 32")));
        }
        let mut out = Vec::new();
        let mut size = walk_shapes(&self.stem, "stem", (height, width), &mut out)?;
        let mut block_sizes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            size = block_shapes(block, size, &mut out)?;
            block_sizes.push(size);
        }
        if let Some(head) = &self.head {
            let coarse = block_shapes(&head.coarse, block_sizes[head.taps[1]], &mut out)?;
            let fine = block_shapes(&head.fine, block_sizes[head.taps[0]], &mut out)?;
            for (det, size) in head.detect.iter().zip([fine, coarse]) {
                walk_shapes(std::slice::from_ref(&Layer::Conv(det.clone())), "head", size, &mut out)?;
            }
        }
        Ok(out)
    }

    pub fn strides(&self) -> Vec<usize> {
        if self.head.is_some() {
            HEAD_STRIDES.to_vec()
        } else {
            Vec::new()
        }
    }

    /// Runs all time steps and returns the recorded graph.
    pub fn forward(&mut self, input: &Input<S>, opts: &ForwardOptions) -> Result<ForwardPass<S>> {
        if opts.steps == 0 {
            return Err(Error::Config("time steps must be at least 1".into()));
        }
        let (tensor, is_static) = match input {
            Input::Static(t) => (t, true),
            Input::Sequence(t) => (t, false),
        };
        let [n, _, h, w] = tensor.dims4("network input")?;
        if !is_static && n % opts.steps != 0 {
            return Err(Error::shape("network input", format!("{n} frames are not a multiple of T={}", opts.steps)));
        }
        if !self.stem.is_empty() && (h % 32 != 0 || w % 32 != 0) {
            return Err(Error::shape("network input", format!("resolution {h}x{w} must be a multiple of 32")));
        }
        if !tensor.is_finite() {
            return Err(Error::Data("network input contains non-finite values".into()));
        }
        let mut scratch;
        let buffers = if opts.mode == BnMode::Train && !opts.update_running {
            scratch = self.store.buffers.clone();
            &mut scratch
        } else {
            &mut self.store.buffers
        };
        let mut ctx = Ctx {
            graph: Graph::new(),
            params: &self.store.params,
            buffers,
            opts: *opts,
            lif: self.lif,
            bn: self.bn,
            leaves: BTreeMap::new(),
            records: Vec::new(),
            moments: Vec::new(),
        };
        let input_id = ctx.graph.leaf(tensor.clone(), opts.input_grad);
        let mut x = input_id;
        // Encode once per image and repeat over time; the conv and the batch
        // norm see identical frames at every step anyway.
        let split = self.stem.iter().position(|l| matches!(l, Layer::Lif)).unwrap_or(self.stem.len());
        x = ctx.path(&self.stem[..split], "stem", x)?;
        if is_static {
            x = repeat_time(&mut ctx.graph, x, opts.steps)?;
        }
        x = ctx.path(&self.stem[split..], "stem", x)?;
        if !self.stem.is_empty() {
            ctx.record_moment("stem", x);
        }
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            block_inputs.push(x);
            x = ctx.block(block, x)?;
            block_outputs.push(x);
        }
        let features = x;
        let mut outputs = Vec::new();
        if let Some(head) = &self.head {
            let readout = self.spec.as_ref().map(|s| s.readout).unwrap_or_default();
            let coarse = ctx.block(&head.coarse, block_outputs[head.taps[1]])?;
            let up = upsample_nearest2x(&mut ctx.graph, coarse)?;
            let route = concat_channels(&mut ctx.graph, up, block_outputs[head.taps[0]])?;
            let fine = ctx.block(&head.fine, route)?;
            for ((feat, det), stride) in [fine, coarse].into_iter().zip(&head.detect).zip(HEAD_STRIDES) {
                let r = ctx.readout(readout, feat)?;
                let node = ctx.conv(det, "head", r)?;
                outputs.push(ScaleOutput { node, stride });
            }
        }
        Ok(ForwardPass {
            graph: ctx.graph,
            input: input_id,
            outputs,
            features,
            block_inputs,
            block_outputs,
            params: ctx.leaves,
            records: ctx.records,
            moments: ctx.moments,
        })
    }
}
