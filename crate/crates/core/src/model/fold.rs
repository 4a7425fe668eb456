use super::{BnParams, LayerKind, NetworkGraph, Src};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel `gamma / sqrt(var + eps)`.
pub fn bn_scale(bn: &BnParams) -> Vec<f64> {
    bn.gamma
        .iter()
        .zip(&bn.var)
        .map(|(g, v)| g / (v + bn.eps).sqrt())
        .collect()
}

/// Multiplies output channel `o` of a conv weight by `k[o]`.
pub fn scale_out_channels(w: &Tensor, k: &[f64]) -> Tensor {
    let per = w.numel() / k.len();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * k[i / per])
        .collect();
    Tensor::new(w.shape().clone(), data).expect("same shape")
}

/// `k * (b - mean) + beta`, with a zero bias when `b` is absent.
pub fn fold_bias(bias: Option<&[f64]>, k: &[f64], bn: &BnParams) -> Vec<f64> {
    (0..k.len())
        .map(|c| {
            let b = bias.map_or(0.0, |b| b[c]);
            k[c] * (b - bn.mean[c]) + bn.beta[c]
        })
        .collect()
}

/// Absorbs every BN into the conv before it and drops the BN nodes.
pub fn fold_bn(g: &NetworkGraph) -> Result<NetworkGraph> {
    if g.folded {
        return Err(Error::AlreadyFolded);
    }
    let mut layers = g.layers.clone();
    let n = layers.len();
    // id remap for removed BN nodes: BN id -> its conv
    let mut redirect: Vec<Src> = (0..n).map(Src::Node).collect();
    let mut keep = vec![true; n];
    for j in 0..n {
        if layers[j].kind != LayerKind::Bn {
            continue;
        }
        let name = layers[j].name.clone();
        let conv = match layers[j].inputs[..] {
            [Src::Node(i)] if layers[i].kind.has_weight() => i,
            _ => return Err(Error::Graph(format!("BN layer {name} is not preceded by a conv"))),
        };
        if g.consumers(conv).len() != 1 {
            return Err(Error::Graph(format!(
                "conv {} feeds more than the BN layer {name}; cannot fold",
                layers[conv].name
            )));
        }
        let bn = layers[j]
            .bn
            .clone()
            .ok_or_else(|| Error::Graph(format!("BN layer {name} has no parameters")))?;
        let k = bn_scale(&bn);
        let c = &mut layers[conv];
        let w = c.weight.as_ref().expect("weight layer");
        c.weight = Some(scale_out_channels(w, &k));
        c.bias = Some(fold_bias(c.bias.as_deref(), &k, &bn));
        // an activation quantizer on the BN output moves to the conv
        if layers[j].act_quant.is_some() {
            layers[conv].act_quant = layers[j].act_quant;
        }
        redirect[j] = Src::Node(conv);
        keep[j] = false;
    }
    let mut new_id = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        if keep[i] {
            new_id[i] = next;
            next += 1;
        }
    }
    let remap = |s: Src| -> Src {
        match s {
            Src::Input => Src::Input,
            Src::Node(i) => match redirect[i] {
                Src::Node(t) => Src::Node(new_id[t]),
                Src::Input => Src::Input,
            },
        }
    };
    let out_layers = layers
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, mut l)| {
            l.inputs = l.inputs.into_iter().map(remap).collect();
            l
        })
        .collect();
    Ok(NetworkGraph {
        arch: g.arch.clone(),
        layers: out_layers,
        cls_out: new_id[g.cls_out],
        box_out: new_id[g.box_out],
        folded: true,
        input_quant: g.input_quant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, count_bn, layer_count, ArchConfig};

    fn bn1(gamma: f64, beta: f64, mean: f64, var: f64) -> BnParams {
        BnParams {
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            var: vec![var],
            eps: 1e-5,
        }
    }

    #[test]
    fn neutral_bn_is_identity() {
        let bn = bn1(1.0, 0.0, 0.0, 1.0 - 1e-5);
        let k = bn_scale(&bn);
        assert!((k[0] - 1.0).abs() < 1e-15);
        let w = Tensor::from_vec(&[1, 1, 1, 2], vec![0.3, -0.7]).unwrap();
        let w2 = scale_out_channels(&w, &k);
        for (a, b) in w2.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((fold_bias(Some(&[0.25]), &k, &bn)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn direct_arithmetic() {
        let bn = bn1(2.0, 1.0, 3.0, 4.0 - 1e-5);
        let k = bn_scale(&bn);
        assert!((k[0] - 1.0).abs() < 1e-12);
        assert!((fold_bias(None, &k, &bn)[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn fold_removes_bn_and_rejects_refold() {
        let g = build_network(&ArchConfig::default_arch(), 0).unwrap();
        let f = fold_bn(&g).unwrap();
        assert_eq!(count_bn(&f), 0);
        assert_eq!(layer_count(&f), 56);
        assert!(f.folded);
        assert!(matches!(fold_bn(&f), Err(Error::AlreadyFolded)));
        assert_eq!(f.layers[f.cls_out].kind, LayerKind::HeadCls);
        assert_eq!(f.layers[f.box_out].kind, LayerKind::HeadBox);
        for (j, l) in f.layers.iter().enumerate() {
            for s in &l.inputs {
                if let Src::Node(i) = s {
                    assert!(*i < j);
                }
            }
        }
    }

    #[test]
    fn orphan_bn_rejected() {
        let mut g = build_network(&ArchConfig::toy(), 0).unwrap();
        let bn_id = g.layers.iter().position(|l| l.kind == LayerKind::Bn).unwrap();
        g.layers[bn_id].inputs = vec![Src::Input];
        assert!(matches!(fold_bn(&g), Err(Error::Graph(_))));
    }
}
