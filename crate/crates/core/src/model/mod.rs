//! Detector graph: construction from a block table, anchors and BN folding.

mod anchors;
mod arch;
mod fold;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Precision, QuantSpec};
use crate::tensor::{conv_out_len, Shape, Tensor};

pub use anchors::{anchor_grid, decode_box, encode_box, Anchor, AnchorConfig, AnchorSet};
pub use arch::{
    AnchorSpec, ArchConfig, BlockSpec, FeatureSpec, InputSpec, StemSpec, ARCH_VERSION, DEFAULT_ARCH_TOML,
    MAX_CHANNELS, TOY_ARCH_TOML,
};
pub use fold::{bn_scale, fold_bias, fold_bn, scale_out_channels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Pointwise,
    Bn,
    LeakyRelu,
    Concat,
    HeadCls,
    HeadBox,
}

impl LayerKind {
    /// Layers carrying a weight tensor.
    pub fn has_weight(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::Depthwise | LayerKind::Pointwise | LayerKind::HeadCls | LayerKind::HeadBox
        )
    }

    pub fn is_head(self) -> bool {
        matches!(self, LayerKind::HeadCls | LayerKind::HeadBox)
    }
}

/// Where a layer reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Src {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    pub fn neutral(channels: usize, eps: f64) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    /// Block label used for per-block bookkeeping (`stem`, `block3`, `ssh`, ...).
    pub block: String,
    pub kind: LayerKind,
    pub inputs: Vec<Src>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub weight: Option<Tensor>,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BnParams>,
    pub slope: f64,
    pub weight_quant: Option<QuantSpec>,
    pub act_quant: Option<QuantSpec>,
}

impl Layer {
    fn base(name: impl Into<String>, block: &str, kind: LayerKind, inputs: Vec<Src>, in_ch: usize, out_ch: usize) -> Self {
        Layer {
            name: name.into(),
            block: block.to_string(),
            kind,
            inputs,
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
            weight: None,
            bias: None,
            bn: None,
            slope: 0.0,
            weight_quant: None,
            act_quant: None,
        }
    }

    pub fn conv_params(&self) -> crate::tensor::ConvParams {
        crate::tensor::ConvParams::new(self.stride, self.pad, self.groups)
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel]
    }
}

/// Ordered, acyclic layer list with two outputs (class logits, box deltas).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub arch: ArchConfig,
    pub layers: Vec<Layer>,
    pub cls_out: usize,
    pub box_out: usize,
    pub folded: bool,
    /// Quantizer of the network input (raw 8-bit frames).
    pub input_quant: QuantSpec,
}

/// Step of the fixed input quantizer: inputs are `(raw - 128) / 255`.
pub const INPUT_STEP: f64 = 1.0 / 255.0;

pub fn input_quantizer() -> QuantSpec {
    QuantSpec::new(Precision::Int(8), INPUT_STEP, crate::quant::Target::Activation).expect("valid")
}

/// Maps 8-bit RAW pixels to the network's input domain.
pub fn normalize_raw(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| (p as f64 - 128.0) * INPUT_STEP).collect()
}

struct Builder {
    layers: Vec<Layer>,
    slope: f64,
    eps: f64,
    rng: ChaCha8Rng,
    h: usize,
    w: usize,
}

impl Builder {
    fn push(&mut self, l: Layer) -> Src {
        self.layers.push(l);
        Src::Node(self.layers.len() - 1)
    }

    fn he_weight(&mut self, dims: [usize; 4]) -> Tensor {
        let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
        let n = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let shape = Shape::new(dims.to_vec()).expect("nonzero dims");
        Tensor::from_fn(shape, |_| n.sample(&mut self.rng))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        block: &str,
        kind: LayerKind,
        x: Src,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Src {
        let mut l = Layer::base(name, block, kind, vec![x], in_ch, out_ch);
        l.kernel = kernel;
        l.stride = stride;
        l.pad = kernel / 2;
        l.groups = if kind == LayerKind::Depthwise { in_ch } else { 1 };
        l.weight = Some(self.he_weight(l.weight_dims()));
        if bias {
            l.bias = Some(vec![0.0; out_ch]);
        }
        self.h = conv_out_len(self.h, kernel, stride, l.pad).expect("validated geometry");
        self.w = conv_out_len(self.w, kernel, stride, l.pad).expect("validated geometry");
        self.push(l)
    }

    fn bn(&mut self, name: &str, block: &str, x: Src, ch: usize) -> Src {
        let mut l = Layer::base(name, block, LayerKind::Bn, vec![x], ch, ch);
        l.bn = Some(BnParams::neutral(ch, self.eps));
        self.push(l)
    }

    fn leaky(&mut self, name: &str, block: &str, x: Src, ch: usize) -> Src {
        let mut l = Layer::base(name, block, LayerKind::LeakyRelu, vec![x], ch, ch);
        l.slope = self.slope;
        self.push(l)
    }

    /// conv + BN, optionally followed by leaky ReLU.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        name: &str,
        block: &str,
        kind: LayerKind,
        x: Src,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        act: bool,
    ) -> Src {
        let c = self.conv(name, block, kind, x, in_ch, out_ch, kernel, stride, false);
        let b = self.bn(&format!("{name}.bn"), block, c, out_ch);
        if act {
            self.leaky(&format!("{name}.act"), block, b, out_ch)
        } else {
            b
        }
    }
}

/// Builds the detector described by `arch` with He-initialised weights and
/// neutral BN statistics.
pub fn build_network(arch: &ArchConfig, seed: u64) -> Result<NetworkGraph> {
    arch.validate()?;
    let mut b = Builder {
        layers: Vec::new(),
        slope: arch.leaky_slope,
        eps: arch.bn_eps,
        rng: ChaCha8Rng::seed_from_u64(seed),
        h: arch.input.height,
        w: arch.input.width,
    };
    let mut ch = arch.input.channels;
    let mut x = b.conv_bn(
        "stem",
        "stem",
        LayerKind::Conv,
        Src::Input,
        ch,
        arch.stem.out,
        arch.stem.kernel,
        arch.stem.stride,
        true,
    );
    ch = arch.stem.out;
    let mut idx = 0;
    for spec in &arch.blocks {
        for r in 0..spec.repeat {
            let stride = if r == 0 { spec.stride } else { 1 };
            let linear = r >= spec.repeat - spec.linear_depthwise;
            let block = format!("block{idx}");
            let dw_name = format!("{block}.dw");
            x = if linear {
                b.conv(&dw_name, &block, LayerKind::Depthwise, x, ch, ch, 3, stride, false)
            } else {
                b.conv_bn(&dw_name, &block, LayerKind::Depthwise, x, ch, ch, 3, stride, true)
            };
            x = b.conv_bn(&format!("{block}.pw"), &block, LayerKind::Pointwise, x, ch, spec.out, 1, 1, true);
            ch = spec.out;
            idx += 1;
        }
    }
    let (fr, fc) = (arch.feature.reduce, arch.feature.conv);
    x = b.conv_bn("feature.reduce", "feature", LayerKind::Pointwise, x, ch, fr, 1, 1, true);
    x = b.conv_bn("feature.conv", "feature", LayerKind::Conv, x, fr, fc, 3, 1, true);
    ch = fc;
    if let Some(out) = arch.ssh {
        let (half, quarter) = (out / 2, out / 4);
        let c3 = b.conv_bn("ssh.conv3", "ssh", LayerKind::Conv, x, ch, half, 3, 1, false);
        let c5a = b.conv_bn("ssh.conv5a", "ssh", LayerKind::Conv, x, ch, quarter, 3, 1, true);
        let c5 = b.conv_bn("ssh.conv5b", "ssh", LayerKind::Conv, c5a, quarter, quarter, 3, 1, false);
        let c7a = b.conv_bn("ssh.conv7a", "ssh", LayerKind::Conv, c5a, quarter, quarter, 3, 1, true);
        let c7 = b.conv_bn("ssh.conv7b", "ssh", LayerKind::Conv, c7a, quarter, quarter, 3, 1, false);
        let cat = b.push(Layer::base("ssh.concat", "ssh", LayerKind::Concat, vec![c3, c5, c7], out, out));
        x = b.leaky("ssh.act", "ssh", cat, out);
        ch = out;
    }
    let a = arch.anchors.sizes.len();
    b.conv("head.cls", "head", LayerKind::HeadCls, x, ch, 2 * a, 1, 1, true);
    let cls_out = b.layers.len() - 1;
    b.conv("head.box", "head", LayerKind::HeadBox, x, ch, 4 * a, 1, 1, true);
    let box_out = b.layers.len() - 1;

    let anchors = AnchorConfig::from_arch(arch);
    let (rows, cols) = anchors.grid_dims();
    // head convs are 1x1 stride 1, so b.h/b.w is the feature map
    if (b.h, b.w) != (rows, cols) {
        return Err(Error::Config(format!(
            "feature map {}x{} does not match the {rows}x{cols} anchor grid",
            b.h, b.w
        )));
    }
    Ok(NetworkGraph {
        arch: arch.clone(),
        layers: b.layers,
        cls_out,
        box_out,
        folded: false,
        input_quant: input_quantizer(),
    })
}

impl NetworkGraph {
    pub fn anchor_config(&self) -> AnchorConfig {
        AnchorConfig::from_arch(&self.arch)
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        (self.arch.input.channels, self.arch.input.height, self.arch.input.width)
    }

    pub fn arch_hash(&self) -> String {
        self.arch.hash()
    }

    /// Layers reading from node `id`.
    pub fn consumers(&self, id: usize) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&j| self.layers[j].inputs.contains(&Src::Node(id)))
            .collect()
    }

    /// Weight-layer ids in execution order.
    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.has_weight()).collect()
    }

    /// For each conv followed directly by a BN node, the BN node id.
    pub fn bn_after(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.layers.len()];
        for (j, l) in self.layers.iter().enumerate() {
            if l.kind == LayerKind::Bn {
                if let [Src::Node(i)] = l.inputs[..] {
                    out[i] = Some(j);
                }
            }
        }
        out
    }

    /// Quantizer on the tensor produced at `src`.
    pub fn act_quant_of(&self, src: Src) -> Option<QuantSpec> {
        match src {
            Src::Input => Some(self.input_quant),
            Src::Node(i) => self.layers[i].act_quant,
        }
    }

    /// Nodes whose output feeds a weight layer: these carry activation quantizers.
    pub fn act_quant_sites(&self) -> Vec<usize> {
        let mut sites: Vec<usize> = self
            .weight_layers()
            .iter()
            .flat_map(|&i| self.layers[i].inputs.clone())
            .filter_map(|s| match s {
                Src::Node(n) => Some(n),
                Src::Input => None,
            })
            .collect();
        sites.sort_unstable();
        sites.dedup();
        sites
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().any(|l| l.weight_quant.is_some() || l.act_quant.is_some())
    }

    /// `(weight, activation)` precision; `Float` when unquantized.
    pub fn precision(&self) -> (Precision, Precision) {
        let w = self
            .layers
            .iter()
            .find_map(|l| l.weight_quant.map(|q| q.precision))
            .unwrap_or(Precision::Float);
        let a = self
            .layers
            .iter()
            .find_map(|l| l.act_quant.map(|q| q.precision))
            .unwrap_or(Precision::Float);
        (w, a)
    }

    /// Checks that the quantizer attachment is all-or-nothing. Returns
    /// whether the graph is quantized.
    pub fn check_quantizers(&self) -> Result<bool> {
        if !self.is_quantized() {
            return Ok(false);
        }
        for i in self.weight_layers() {
            if self.layers[i].weight_quant.is_none() {
                return Err(Error::Graph(format!(
                    "layer {} has no weight quantizer in a quantized graph",
                    self.layers[i].name
                )));
            }
        }
        for i in self.act_quant_sites() {
            if self.layers[i].act_quant.is_none() {
                return Err(Error::Graph(format!(
                    "layer {} has no activation quantizer in a quantized graph",
                    self.layers[i].name
                )));
            }
        }
        Ok(true)
    }

    /// Removes all quantizers.
    pub fn strip_quantizers(&mut self) {
        for l in &mut self.layers {
            l.weight_quant = None;
            l.act_quant = None;
        }
    }
}

/// Weight layers (convs, depthwise, pointwise and heads).
pub fn layer_count(g: &NetworkGraph) -> usize {
    g.weight_layers().len()
}

pub fn count_bn(g: &NetworkGraph) -> usize {
    g.layers.iter().filter(|l| l.kind == LayerKind::Bn).count()
}

pub fn count_bn_in_block(g: &NetworkGraph, block: &str) -> usize {
    g.layers
        .iter()
        .filter(|l| l.kind == LayerKind::Bn && l.block == block)
        .count()
}

/// Parameter count as deployed: weights plus one bias per output channel of
/// every conv that has a BN (or already has a bias).
pub fn folded_param_count(g: &NetworkGraph) -> usize {
    let bn_after = g.bn_after();
    g.weight_layers()
        .into_iter()
        .map(|i| {
            let l = &g.layers[i];
            let w = l.weight.as_ref().map_or(0, |t| t.numel());
            let b = if l.bias.is_some() || bn_after[i].is_some() { l.out_ch } else { 0 };
            w + b
        })
        .sum()
}
