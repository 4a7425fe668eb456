use crate::error::{Error, Result};
use crate::model::{LayerKind, NetworkGraph, Src};
use crate::quant::{quantize_value, Precision, QuantSpec};
use crate::tensor::{conv_accumulate, ConvGeom, ConvParams, QTensor, Shape, Tensor};

use super::exec::{head_rows, HeadOutputs};
use super::pack::{pack_ternary, unpack_ternary};

/// Fixed-point form `multiplier * 2^-shift` of a positive real scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RequantParams {
    pub multiplier: i32,
    pub shift: u32,
}

impl RequantParams {
    pub fn from_scale(m: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidStep(m));
        }
        // m = frac * 2^exp, frac in [0.5, 1)
        let mut exp = m.log2().floor() as i32 + 1;
        let mut frac = m / 2f64.powi(exp);
        if frac >= 1.0 {
            frac /= 2.0;
            exp += 1;
        } else if frac < 0.5 {
            frac *= 2.0;
            exp -= 1;
        }
        let mut mult = (frac * 2f64.powi(31)).round() as i64;
        if mult == 1 << 31 {
            mult >>= 1;
            exp += 1;
        }
        let shift = 31 - exp;
        if shift < 0 {
            return Err(Error::Config(format!("requant scale {m} too large")));
        }
        Ok(RequantParams {
            multiplier: mult as i32,
            shift: shift as u32,
        })
    }

    pub fn scale(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-(self.shift as i32))
    }

    /// `floor((acc * multiplier + 2^(shift-1)) / 2^shift)`: round half up.
    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        let p = acc as i128 * self.multiplier as i128;
        if self.shift == 0 {
            return p as i64;
        }
        let sh = self.shift.min(126);
        ((p + (1i128 << (sh - 1))) >> sh) as i64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightStore {
    Plain(Vec<i32>),
    /// 2-bit codes from [`pack_ternary`].
    Ternary(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum IntOut {
    /// Requantize onto an activation grid; `neg` absorbs a following leaky slope.
    Requant {
        pos: RequantParams,
        neg: Option<RequantParams>,
        lo: i32,
        hi: i32,
        step: f64,
    },
    /// Head output: `acc * scale` as floating point.
    Dequant { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum IntOp {
    Conv {
        src: Src,
        weight_dims: [usize; 4],
        params: ConvParams,
        weight: WeightStore,
        bias: Vec<i32>,
        out: IntOut,
    },
    /// Leaky ReLU whose work was already done in the producer's requant.
    Pass { src: Src },
    Concat { srcs: Vec<Src> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntNode {
    pub name: String,
    pub op: IntOp,
}

/// A folded, quantized graph frozen to integer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegerGraph {
    pub nodes: Vec<IntNode>,
    pub input_step: f64,
    pub input_dims: (usize, usize, usize),
    pub cls_out: usize,
    pub box_out: usize,
}

/// Value flowing between integer nodes.
#[derive(Clone, Debug, PartialEq)]
pub enum IntValue {
    Int { data: Vec<i32>, dims: [usize; 4], step: f64 },
    Float(Tensor),
}

impl IntValue {
    pub fn to_float(&self) -> Tensor {
        match self {
            IntValue::Int { data, dims, step } => {
                Tensor::from_vec(dims, data.iter().map(|&q| q as f64 * step).collect()).expect("valid dims")
            }
            IntValue::Float(t) => t.clone(),
        }
    }

    pub fn step(&self) -> Option<f64> {
        match self {
            IntValue::Int { step, .. } => Some(*step),
            IntValue::Float(_) => None,
        }
    }
}

fn symmetric(q: QuantSpec, what: &str) -> Result<QuantSpec> {
    if q.zero_point != 0 {
        return Err(Error::Engine(format!("{what}: integer engine needs symmetric quantizers")));
    }
    Ok(q)
}

/// Activation grid a weight layer's accumulator is requantized onto, with
/// the leaky slope when a leaky ReLU follows.
fn requant_target(g: &NetworkGraph, i: usize) -> Result<(QuantSpec, Option<f64>)> {
    let l = &g.layers[i];
    if let Some(q) = l.act_quant {
        return Ok((q, None));
    }
    let fail = || {
        Error::Engine(format!(
            "layer {}: output has no activation quantizer reachable for requantization",
            l.name
        ))
    };
    let next = match g.consumers(i)[..] {
        [c] => c,
        _ => return Err(fail()),
    };
    let n = &g.layers[next];
    match n.kind {
        LayerKind::LeakyRelu => n.act_quant.map(|q| (q, Some(n.slope))).ok_or_else(fail),
        LayerKind::Concat => {
            if let Some(q) = n.act_quant {
                return Ok((q, None));
            }
            match g.consumers(next)[..] {
                [c] if g.layers[c].kind == LayerKind::LeakyRelu => g.layers[c]
                    .act_quant
                    .map(|q| (q, Some(g.layers[c].slope)))
                    .ok_or_else(fail),
                _ => Err(fail()),
            }
        }
        _ => Err(fail()),
    }
}

fn max_mag(p: Precision) -> Result<i64> {
    let (lo, hi) = p.range()?;
    Ok((lo as i64).abs().max(hi as i64))
}

/// Freezes a folded, fully quantized graph. Rejects layers whose
/// worst-case accumulator `k*k*C_in/g * max|q_w| * max|q_a| + max|bias|`
/// does not fit in i32.
pub fn freeze(g: &NetworkGraph) -> Result<IntegerGraph> {
    if !g.folded {
        return Err(Error::Engine("integer engine requires a folded graph (run fold first)".into()));
    }
    if !g.check_quantizers()? {
        return Err(Error::Engine("integer engine requires a quantized graph".into()));
    }
    let input_q = symmetric(g.input_quant, "input")?;
    let mut nodes = Vec::with_capacity(g.layers.len());
    for (i, l) in g.layers.iter().enumerate() {
        let op = match l.kind {
            k if k.has_weight() => {
                let wq = symmetric(l.weight_quant.expect("checked"), &l.name)?;
                let aq = symmetric(g.act_quant_of(l.inputs[0]).expect("checked"), &l.name)?;
                let w = l.weight.as_ref().expect("weight layer");
                let wi: Vec<i32> = w.data().iter().map(|&v| quantize_value(v, &wq)).collect();
                let acc_scale = aq.step * wq.step;
                let bias: Vec<i32> = match &l.bias {
                    Some(b) => b
                        .iter()
                        .map(|&v| (v / acc_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                        .collect(),
                    None => vec![0; l.out_ch],
                };
                let dims = l.weight_dims();
                let taps = (dims[1] * dims[2] * dims[3]) as i64;
                let bmax = bias.iter().map(|&b| (b as i64).abs()).max().unwrap_or(0);
                let bound = taps * max_mag(wq.precision)? * max_mag(aq.precision)? + bmax;
                if bound > i32::MAX as i64 {
                    return Err(Error::Overflow {
                        layer: l.name.clone(),
                        bound,
                    });
                }
                let out = if k.is_head() {
                    IntOut::Dequant { scale: acc_scale }
                } else {
                    let (q, slope) = requant_target(g, i)?;
                    let q = symmetric(q, &l.name)?;
                    let (lo, hi) = q.qrange();
                    let m = acc_scale / q.step;
                    IntOut::Requant {
                        pos: RequantParams::from_scale(m)?,
                        neg: slope.map(|s| RequantParams::from_scale(m * s)).transpose()?,
                        lo,
                        hi,
                        step: q.step,
                    }
                };
                let weight = if wq.precision == Precision::Ternary {
                    WeightStore::Ternary(pack_ternary(&wi)?)
                } else {
                    WeightStore::Plain(wi)
                };
                IntOp::Conv {
                    src: l.inputs[0],
                    weight_dims: dims,
                    params: l.conv_params(),
                    weight,
                    bias,
                    out,
                }
            }
            LayerKind::LeakyRelu => IntOp::Pass { src: l.inputs[0] },
            LayerKind::Concat => IntOp::Concat { srcs: l.inputs.clone() },
            LayerKind::Bn => return Err(Error::Engine(format!("BN node {} in a folded graph", l.name))),
            _ => unreachable!(),
        };
        nodes.push(IntNode {
            name: l.name.clone(),
            op,
        });
    }
    Ok(IntegerGraph {
        nodes,
        input_step: input_q.step,
        input_dims: g.input_dims(),
        cls_out: g.cls_out,
        box_out: g.box_out,
    })
}

fn int_conv(
    name: &str,
    x: &IntValue,
    weight_dims: &[usize; 4],
    params: ConvParams,
    weight: &WeightStore,
    bias: &[i32],
    out: &IntOut,
) -> Result<IntValue> {
    let IntValue::Int { data, dims, .. } = x else {
        return Err(Error::Engine(format!("layer {name} reads a dequantized tensor")));
    };
    let geom = ConvGeom::new(dims, weight_dims, params).map_err(|e| match e {
        Error::Shape { msg, .. } => Error::shape(name, msg),
        e => e,
    })?;
    let unpacked;
    let w: &[i32] = match weight {
        WeightStore::Plain(w) => w,
        WeightStore::Ternary(b) => {
            unpacked = unpack_ternary(b, weight_dims.iter().product())?;
            &unpacked
        }
    };
    let od = geom.out_dims();
    let plane = od[2] * od[3];
    let mut acc = vec![0i32; od.iter().product()];
    conv_accumulate(&geom, data, w, &mut acc, |a, b| a * b);
    for (i, chunk) in acc.chunks_mut(plane).enumerate() {
        let b = bias[i % od[1]];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(match out {
        IntOut::Dequant { scale } => {
            IntValue::Float(Tensor::new(Shape::new(od.to_vec())?, acc.iter().map(|&a| a as f64 * scale).collect())?)
        }
        IntOut::Requant { pos, neg, lo, hi, step } => {
            let data = acc
                .iter()
                .map(|&a| {
                    let r = match neg {
                        Some(n) if a < 0 => n.apply(a as i64),
                        _ => pos.apply(a as i64),
                    };
                    r.clamp(*lo as i64, *hi as i64) as i32
                })
                .collect();
            IntValue::Int {
                data,
                dims: od,
                step: *step,
            }
        }
    })
}

fn concat_int(name: &str, xs: &[&IntValue]) -> Result<IntValue> {
    let mut parts = Vec::new();
    for x in xs {
        match x {
            IntValue::Int { data, dims, step } => parts.push((data, dims, *step)),
            IntValue::Float(_) => return Err(Error::Engine(format!("{name}: concat of a dequantized tensor"))),
        }
    }
    let (_, d0, s0) = parts[0];
    if parts.iter().any(|(_, d, s)| *s != s0 || d[0] != d0[0] || d[2] != d0[2] || d[3] != d0[3]) {
        return Err(Error::shape(name, "concat inputs disagree in grid or spatial size"));
    }
    let plane = d0[2] * d0[3];
    let c_total: usize = parts.iter().map(|(_, d, _)| d[1]).sum();
    let mut data = Vec::with_capacity(d0[0] * c_total * plane);
    for b in 0..d0[0] {
        for (v, d, _) in &parts {
            let chunk = d[1] * plane;
            data.extend_from_slice(&v[b * chunk..(b + 1) * chunk]);
        }
    }
    Ok(IntValue::Int {
        data,
        dims: [d0[0], c_total, d0[2], d0[3]],
        step: s0,
    })
}

/// Runs all nodes and returns every node output.
pub fn run_integer_nodes(ig: &IntegerGraph, input: &QTensor) -> Result<Vec<IntValue>> {
    let (c, h, w) = ig.input_dims;
    let dims = match *input.shape().dims() {
        [n, ic, ih, iw] if (ic, ih, iw) == (c, h, w) => [n, ic, ih, iw],
        _ => {
            return Err(Error::shape(
                "input",
                format!("expected [N, {c}, {h}, {w}], got {:?}", input.shape().dims()),
            ))
        }
    };
    if input.zero_point() != 0 || (input.step() - ig.input_step).abs() > 1e-12 * ig.input_step {
        return Err(Error::Engine(format!(
            "input grid (step {}, zero point {}) differs from the frozen input quantizer (step {})",
            input.step(),
            input.zero_point(),
            ig.input_step
        )));
    }
    let x0 = IntValue::Int {
        data: input.data().to_vec(),
        dims,
        step: input.step(),
    };
    let mut vals: Vec<IntValue> = Vec::with_capacity(ig.nodes.len());
    for node in &ig.nodes {
        let get = |s: Src, vals: &Vec<IntValue>| -> IntValue {
            match s {
                Src::Input => x0.clone(),
                Src::Node(i) => vals[i].clone(),
            }
        };
        let v = match &node.op {
            IntOp::Conv {
                src,
                weight_dims,
                params,
                weight,
                bias,
                out,
            } => {
                let x = match src {
                    Src::Input => &x0,
                    Src::Node(i) => &vals[*i],
                };
                int_conv(&node.name, x, weight_dims, *params, weight, bias, out)?
            }
            IntOp::Pass { src } => get(*src, &vals),
            IntOp::Concat { srcs } => {
                let xs: Vec<&IntValue> = srcs
                    .iter()
                    .map(|s| match s {
                        Src::Input => &x0,
                        Src::Node(i) => &vals[*i],
                    })
                    .collect();
                concat_int(&node.name, &xs)?
            }
        };
        vals.push(v);
    }
    Ok(vals)
}

pub fn run_frozen(ig: &IntegerGraph, input: &QTensor) -> Result<HeadOutputs> {
    let vals = run_integer_nodes(ig, input)?;
    Ok(HeadOutputs {
        cls: head_rows(&vals[ig.cls_out].to_float(), 2)?,
        boxes: head_rows(&vals[ig.box_out].to_float(), 4)?,
    })
}

/// Freezes `g` and runs it in integer arithmetic.
pub fn run_integer(g: &NetworkGraph, input: &QTensor) -> Result<HeadOutputs> {
    run_frozen(&freeze(g)?, input)
}

/// Raw 8-bit frames as input-grid integers `raw - 128`.
pub fn quantize_raw(pixels: &[u8], n: usize, c: usize, h: usize, w: usize) -> Result<QTensor> {
    let q = crate::model::input_quantizer();
    QTensor::new(
        Shape::nchw(n, c, h, w)?,
        pixels.iter().map(|&p| p as i32 - 128).collect(),
        q.step,
        0,
        q.precision,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn requant_known_values() {
        let r = RequantParams::from_scale(1.0).unwrap();
        assert_eq!((r.multiplier, r.shift), (1 << 30, 30));
        assert_eq!(r.apply(6), 6);
        let h = RequantParams::from_scale(0.5).unwrap();
        assert_eq!(h.apply(3), 2);
        assert_eq!(h.apply(-3), -1);
        assert!(RequantParams::from_scale(0.0).is_err());
    }

    proptest! {
        #[test]
        fn requant_precision(e in -40.0f64..20.0) {
            let m = 2f64.powf(e);
            let r = RequantParams::from_scale(m).unwrap();
            prop_assert!(r.multiplier >= 1 << 30);
            prop_assert!(((m - r.scale()) / m).abs() <= 2f64.powi(-30));
        }

        #[test]
        fn requant_matches_rounding(m in 1e-4f64..4.0, acc in -1_000_000i64..1_000_000) {
            let r = RequantParams::from_scale(m).unwrap();
            let exact = acc as f64 * r.scale();
            prop_assert_eq!(r.apply(acc), (exact + 0.5).floor() as i64);
        }
    }
}
