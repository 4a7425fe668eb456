//! Flat parameter vectors over a graph, and the graph's forward pass on a tape.

use crate::error::{Error, Result};
use crate::model::{bn_scale, fold_bias, BnParams, LayerKind, NetworkGraph, Src};
use crate::tensor::{Shape, Tensor};

use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    WeightStep,
    ActStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

/// Smallest step a learned quantizer may take.
pub const MIN_STEP: f64 = 1e-8;

/// Which graph values are trainable.
///
/// Float graphs train weights, biases and BN affine terms with batch
/// statistics. Quantized graphs keep BN scale and running statistics
/// frozen, train weights, biases and BN shifts, and the quantizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub quantized: bool,
}

impl ParamLayout {
    pub fn new(g: &NetworkGraph) -> Result<Self> {
        let quantized = g.check_quantizers()?;
        let mut entries = Vec::new();
        let mut off = 0;
        let mut add = |layer, kind, len| {
            entries.push(ParamEntry {
                layer,
                kind,
                offset: off,
                len,
            });
            off += len;
        };
        for (i, l) in g.layers.iter().enumerate() {
            if let Some(w) = &l.weight {
                add(i, ParamKind::Weight, w.numel());
                if let Some(b) = &l.bias {
                    add(i, ParamKind::Bias, b.len());
                }
                if quantized {
                    add(i, ParamKind::WeightStep, 1);
                }
            }
            if let Some(bn) = &l.bn {
                if !quantized {
                    add(i, ParamKind::Gamma, bn.channels());
                }
                add(i, ParamKind::Beta, bn.channels());
            }
            if quantized && l.act_quant.is_some() {
                add(i, ParamKind::ActStep, 1);
            }
        }
        Ok(ParamLayout {
            entries,
            total: off,
            quantized,
        })
    }

    pub fn gather(&self, g: &NetworkGraph) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            let l = &g.layers[e.layer];
            match e.kind {
                ParamKind::Weight => out.extend_from_slice(l.weight.as_ref().expect("weight").data()),
                ParamKind::Bias => out.extend_from_slice(l.bias.as_ref().expect("bias")),
                ParamKind::Gamma => out.extend_from_slice(&l.bn.as_ref().expect("bn").gamma),
                ParamKind::Beta => out.extend_from_slice(&l.bn.as_ref().expect("bn").beta),
                ParamKind::WeightStep => out.push(l.weight_quant.expect("quant").step),
                ParamKind::ActStep => out.push(l.act_quant.expect("quant").step),
            }
        }
        out
    }

    /// Writes `p` back into `g`; steps are floored at [`MIN_STEP`].
    pub fn scatter(&self, g: &mut NetworkGraph, p: &[f64]) {
        assert_eq!(p.len(), self.total, "parameter vector length");
        for e in &self.entries {
            let v = &p[e.offset..e.offset + e.len];
            let l = &mut g.layers[e.layer];
            match e.kind {
                ParamKind::Weight => {
                    let w = l.weight.as_mut().expect("weight");
                    *w = Tensor::new(w.shape().clone(), v.to_vec()).expect("same length");
                }
                ParamKind::Bias => l.bias = Some(v.to_vec()),
                ParamKind::Gamma => l.bn.as_mut().expect("bn").gamma = v.to_vec(),
                ParamKind::Beta => l.bn.as_mut().expect("bn").beta = v.to_vec(),
                ParamKind::WeightStep => l.weight_quant.as_mut().expect("quant").step = v[0].max(MIN_STEP),
                ParamKind::ActStep => l.act_quant.as_mut().expect("quant").step = v[0].max(MIN_STEP),
            }
        }
    }

    /// Weight decay applies to conv weights only.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for e in &self.entries {
            if e.kind == ParamKind::Weight {
                m[e.offset..e.offset + e.len].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }
}

/// Per-BN-layer batch statistics: (layer index, mean, variance).
pub type BnStats = Vec<(usize, Vec<f64>, Vec<f64>)>;

/// Forward pass recorded on a tape.
pub struct TapeForward {
    pub cls: Var,
    pub boxes: Var,
    /// Parameter vars in layout order.
    pub params: Vec<Var>,
    /// `(bn layer, batch mean, batch var)` from float-mode BN nodes.
    pub bn_stats: BnStats,
}

fn tensor1(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(Shape::new(vec![n]).expect("nonempty"), v).expect("length")
}

/// Records `g` on `tape` for input batch `x` (already normalized), with the
/// layout's parameters as trainable leaves.
pub fn tape_forward(tape: &mut Tape, g: &NetworkGraph, layout: &ParamLayout, x: &Tensor) -> Result<TapeForward> {
    let quant = layout.quantized;
    let mut pvars = Vec::with_capacity(layout.entries.len());
    let mut lookup = std::collections::HashMap::new();
    let values = layout.gather(g);
    for e in &layout.entries {
        let data = values[e.offset..e.offset + e.len].to_vec();
        let t = match e.kind {
            ParamKind::Weight => {
                Tensor::new(g.layers[e.layer].weight.as_ref().expect("weight").shape().clone(), data)?
            }
            _ => tensor1(data),
        };
        let v = tape.param(t);
        lookup.insert((e.layer, e.kind), v);
        pvars.push(v);
    }
    let p = |i: usize, k: ParamKind| -> Option<Var> { lookup.get(&(i, k)).copied() };
    let x_in = if quant {
        crate::quant::fake_quant_forward(x, &g.input_quant)
    } else {
        x.clone()
    };
    let input = tape.constant(x_in);
    let bn_after = g.bn_after();
    let mut nodes: Vec<Var> = Vec::with_capacity(g.layers.len());
    let mut bn_stats = Vec::new();
    let src = |s: Src, nodes: &Vec<Var>| match s {
        Src::Input => input,
        Src::Node(i) => nodes[i],
    };
    for (i, l) in g.layers.iter().enumerate() {
        let named = |e: Error| match e {
            Error::Shape { msg, .. } => Error::shape(l.name.clone(), msg),
            e => e,
        };
        let mut out = match l.kind {
            k if k.has_weight() => {
                let xin = src(l.inputs[0], &nodes);
                let w = p(i, ParamKind::Weight).expect("weight param");
                if quant {
                    let wq = l.weight_quant.expect("checked");
                    let aq = g.act_quant_of(l.inputs[0]).expect("checked");
                    let s_in = match l.inputs[0] {
                        Src::Input => aq.step,
                        Src::Node(j) => tape.value(p(j, ParamKind::ActStep).expect("act step")).data()[0],
                    };
                    let ws = p(i, ParamKind::WeightStep).expect("weight step");
                    let s_w = tape.value(ws).data()[0];
                    let (weff, beff) = match bn_after[i].and_then(|j| g.layers[j].bn.as_ref().map(|b| (j, b))) {
                        Some((j, bn)) => {
                            let k = bn_scale(bn);
                            let weff = tape.scale_out_channels(w, k.clone());
                            // beta + k*(b - mean), the same arithmetic as folding
                            let no_shift = BnParams {
                                beta: vec![0.0; bn.channels()],
                                ..bn.clone()
                            };
                            let offset = fold_bias(l.bias.as_deref(), &k, &no_shift);
                            let bvar = p(j, ParamKind::Beta).expect("beta param");
                            (weff, Some(tape.add_const(bvar, offset)))
                        }
                        None => (w, p(i, ParamKind::Bias)),
                    };
                    let wq_var = tape.fake_quant(weff, ws, wq).map_err(named)?;
                    let mut y = tape.conv2d(xin, wq_var, l.conv_params()).map_err(named)?;
                    if let Some(b) = beff {
                        let bq = tape.bias_quant(b, s_in * s_w);
                        y = tape.add_channel_bias(y, bq).map_err(named)?;
                    }
                    y
                } else {
                    let mut y = tape.conv2d(xin, w, l.conv_params()).map_err(named)?;
                    if let Some(b) = p(i, ParamKind::Bias) {
                        y = tape.add_channel_bias(y, b).map_err(named)?;
                    }
                    y
                }
            }
            LayerKind::Bn => {
                let xin = src(l.inputs[0], &nodes);
                if quant {
                    xin
                } else {
                    let bn = l.bn.as_ref().ok_or_else(|| Error::Graph(format!("{} has no BN params", l.name)))?;
                    let (y, mean, var) = tape
                        .batch_norm(
                            xin,
                            p(i, ParamKind::Gamma).expect("gamma"),
                            p(i, ParamKind::Beta).expect("beta"),
                            bn.eps,
                        )
                        .map_err(named)?;
                    bn_stats.push((i, mean, var));
                    y
                }
            }
            LayerKind::LeakyRelu => tape.leaky_relu(src(l.inputs[0], &nodes), l.slope),
            LayerKind::Concat => {
                let xs: Vec<Var> = l.inputs.iter().map(|&s| src(s, &nodes)).collect();
                tape.concat(&xs).map_err(named)?
            }
            _ => unreachable!(),
        };
        if quant {
            if let Some(q) = l.act_quant {
                out = tape.fake_quant(out, p(i, ParamKind::ActStep).expect("act step"), q).map_err(named)?;
            }
        }
        nodes.push(out);
    }
    let cls = tape.head_rows(nodes[g.cls_out], 2)?;
    let boxes = tape.head_rows(nodes[g.box_out], 4)?;
    Ok(TapeForward {
        cls,
        boxes,
        params: pvars,
        bn_stats,
    })
}

/// Gradient vector in layout order.
pub fn flat_grads(layout: &ParamLayout, fwd: &TapeForward, grads: &super::tape::Gradients) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.total);
    for (e, v) in layout.entries.iter().zip(&fwd.params) {
        out.extend(grads.get_or_zero(*v, e.len));
    }
    out
}
