use serde::{Deserialize, Serialize};

use crate::model::{folded_param_count, layer_count, NetworkGraph, Src};
use crate::quant::Precision;
use crate::tensor::conv_out_len;

/// Accumulator width charged per MAC, as `log2` of a 32-bit accumulator.
pub const ACC_LOG2: u32 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub weights: Precision,
    pub acts: Precision,
    pub num_layers: usize,
    /// Millions of parameters, scaled by storage bits over 32.
    pub params_m: f64,
    /// Multiply-accumulates, in billions.
    pub flops_g: f64,
    pub bops_m: f64,
}

/// Spatial size `(h, w)` of every node output.
pub fn node_sizes(g: &NetworkGraph) -> Vec<(usize, usize)> {
    let (_, h, w) = g.input_dims();
    let mut sizes: Vec<(usize, usize)> = Vec::with_capacity(g.layers.len());
    for l in &g.layers {
        let (ih, iw) = match l.inputs[0] {
            Src::Input => (h, w),
            Src::Node(j) => sizes[j],
        };
        let s = if l.kind.has_weight() {
            (
                conv_out_len(ih, l.kernel, l.stride, l.pad).unwrap_or(0),
                conv_out_len(iw, l.kernel, l.stride, l.pad).unwrap_or(0),
            )
        } else {
            (ih, iw)
        };
        sizes.push(s);
    }
    sizes
}

/// Multiply-accumulates per weight layer for one frame, as `(layer, macs)`.
pub fn layer_macs(g: &NetworkGraph) -> Vec<(usize, u64)> {
    let sizes = node_sizes(g);
    g.weight_layers()
        .into_iter()
        .map(|i| {
            let l = &g.layers[i];
            let (h, w) = sizes[i];
            let per_out = (l.in_ch / l.groups * l.kernel * l.kernel) as u64;
            (i, (l.out_ch * h * w) as u64 * per_out)
        })
        .collect()
}

pub fn total_macs(g: &NetworkGraph) -> u64 {
    layer_macs(g).iter().map(|&(_, m)| m).sum()
}

/// Bits per operand for BOPs; ternary counts as 2.
fn op_bits(p: Precision) -> u64 {
    p.storage_bits() as u64
}

/// Layer count, bit-scaled parameters, MACs and bit operations of `g` run at
/// `(weights, acts)`. Parameters are counted on the folded form, so BN
/// contributes one bias per channel.
pub fn cost_report(g: &NetworkGraph, weights: Precision, acts: Precision) -> CostReport {
    let params = folded_param_count(g) as f64;
    let (bw, ba) = (op_bits(weights), op_bits(acts));
    let macs = total_macs(g);
    let per_mac = bw * ba + bw + ba + ACC_LOG2 as u64;
    CostReport {
        weights,
        acts,
        num_layers: layer_count(g),
        params_m: params * weights.storage_bits() as f64 / 32.0 / 1e6,
        flops_g: macs as f64 / 1e9,
        bops_m: (macs * per_mac) as f64 / 1e6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, ArchConfig};

    #[test]
    fn macs_by_hand_on_toy_stem() {
        let g = build_network(&ArchConfig::toy(), 0).unwrap();
        let (i, m) = layer_macs(&g)[0];
        assert_eq!(g.layers[i].name, "stem");
        // 8 outputs at 60x80, 3x3 taps on one input channel
        assert_eq!(m, 8 * 60 * 80 * 9);
    }

    #[test]
    fn bit_scaling_is_exact() {
        let g = build_network(&ArchConfig::default_arch(), 0).unwrap();
        let fp = cost_report(&g, Precision::Float, Precision::Float);
        for (w, a) in [
            (Precision::Int(8), Precision::Int(8)),
            (Precision::Int(4), Precision::Int(4)),
            (Precision::Int(3), Precision::Int(3)),
            (Precision::Ternary, Precision::Int(3)),
        ] {
            let r = cost_report(&g, w, a);
            assert_eq!(r.params_m, fp.params_m * w.storage_bits() as f64 / 32.0);
            assert_eq!(r.flops_g, fp.flops_g);
            assert_eq!(r.num_layers, fp.num_layers);
        }
    }

    #[test]
    fn bops_fall_with_bits() {
        let g = build_network(&ArchConfig::default_arch(), 0).unwrap();
        let seq = [
            (Precision::Float, Precision::Float),
            (Precision::Int(8), Precision::Int(8)),
            (Precision::Int(4), Precision::Int(4)),
            (Precision::Int(3), Precision::Int(3)),
            (Precision::Ternary, Precision::Int(3)),
        ];
        let b: Vec<f64> = seq.iter().map(|&(w, a)| cost_report(&g, w, a).bops_m).collect();
        assert!(b.windows(2).all(|w| w[1] < w[0]), "{b:?}");
    }
}
