use crate::error::{Error, Result};
use crate::model::{bn_scale, fold_bias, scale_out_channels, LayerKind, NetworkGraph, Src};
use crate::quant::{fake_quant_forward, fake_quant_value, QuantSpec};
use crate::tensor::{concat, conv2d, leaky_relu, Shape, Tensor};

/// Class logits `[N, A, 2]` (background, face) and box deltas `[N, A, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub cls: Tensor,
    pub boxes: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Float,
    FakeQuant,
}

/// Conv weight and bias with a following BN absorbed, using the BN's
/// running statistics. Identical arithmetic to [`crate::model::fold_bn`].
pub fn effective_params(g: &NetworkGraph, i: usize, bn: Option<usize>) -> (Tensor, Option<Vec<f64>>) {
    let l = &g.layers[i];
    let w = l.weight.as_ref().expect("weight layer");
    match bn.and_then(|j| g.layers[j].bn.as_ref()) {
        Some(p) => {
            let k = bn_scale(p);
            (scale_out_channels(w, &k), Some(fold_bias(l.bias.as_deref(), &k, p)))
        }
        None => (w.clone(), l.bias.clone()),
    }
}

/// Rounds a bias onto the `s_in * s_w` grid, saturating at the i32 range.
pub fn bias_fake_quant(b: f64, step: f64) -> f64 {
    (b / step).round().clamp(i32::MIN as f64, i32::MAX as f64) * step
}

fn apply_bn(x: &Tensor, p: &crate::model::BnParams) -> Tensor {
    let k = bn_scale(p);
    let dims = x.dims();
    let (c, plane) = (dims[1], dims[2] * dims[3]);
    let mut data = Vec::with_capacity(x.numel());
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let ch = i % c;
        let (kc, mu, b) = (k[ch], p.mean[ch], p.beta[ch]);
        data.extend(chunk.iter().map(|&v| kc * (v - mu) + b));
    }
    Tensor::new(x.shape().clone(), data).expect("same shape")
}

fn check_input(g: &NetworkGraph, input: &Tensor) -> Result<()> {
    let (c, h, w) = g.input_dims();
    match *input.dims() {
        [_, ic, ih, iw] if (ic, ih, iw) == (c, h, w) => Ok(()),
        _ => Err(Error::shape(
            "input",
            format!("expected [N, {c}, {h}, {w}], got {:?}", input.dims()),
        )),
    }
}

fn fetch<'a>(vals: &'a [Tensor], input: &'a Tensor, s: Src) -> &'a Tensor {
    match s {
        Src::Input => input,
        Src::Node(i) => &vals[i],
    }
}

fn with_layer<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape { msg, .. } => Error::Shape {
            layer: name.to_string(),
            msg,
        },
        other => other,
    })
}

/// Runs every node and returns all node outputs in graph order.
///
/// In `FakeQuant` mode the input is quantized with the graph's input
/// quantizer, weights (BN-absorbed when unfolded) and biases go through
/// their fake-quant nodes, and activation quantizers are applied after the
/// node that carries them.
pub fn forward_nodes(g: &NetworkGraph, input: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
    check_input(g, input)?;
    let quant = mode == Mode::FakeQuant;
    if quant && !g.check_quantizers()? {
        return Err(Error::Graph("fake-quant execution of a graph without quantizers".into()));
    }
    let qin;
    let input = if quant {
        qin = fake_quant_forward(input, &g.input_quant);
        &qin
    } else {
        input
    };
    let bn_after = g.bn_after();
    let mut vals: Vec<Tensor> = Vec::with_capacity(g.layers.len());
    for (i, l) in g.layers.iter().enumerate() {
        let out = match l.kind {
            k if k.has_weight() => {
                let x = fetch(&vals, input, l.inputs[0]);
                if quant {
                    let (w, b) = effective_params(g, i, bn_after[i]);
                    let wq = l.weight_quant.expect("checked");
                    let s_in = g.act_quant_of(l.inputs[0]).expect("checked").step;
                    let w = fake_quant_forward(&w, &wq);
                    let b = b.map(|b| {
                        let step = s_in * wq.step;
                        Tensor::from_vec(&[b.len()], b.iter().map(|&v| bias_fake_quant(v, step)).collect())
                            .expect("nonempty")
                    });
                    with_layer(&l.name, conv2d(x, &w, b.as_ref(), l.conv_params()))?
                } else {
                    let w = l.weight.as_ref().expect("weight layer");
                    let b = l.bias.as_ref().map(|b| Tensor::from_vec(&[b.len()], b.clone()).expect("nonempty"));
                    with_layer(&l.name, conv2d(x, w, b.as_ref(), l.conv_params()))?
                }
            }
            LayerKind::Bn => {
                let x = fetch(&vals, input, l.inputs[0]);
                if quant {
                    // absorbed into the preceding conv
                    x.clone()
                } else {
                    let p = l.bn.as_ref().ok_or_else(|| Error::Graph(format!("{} has no BN params", l.name)))?;
                    apply_bn(x, p)
                }
            }
            LayerKind::LeakyRelu => leaky_relu(fetch(&vals, input, l.inputs[0]), l.slope),
            LayerKind::Concat => {
                let xs: Vec<&Tensor> = l.inputs.iter().map(|&s| fetch(&vals, input, s)).collect();
                with_layer(&l.name, concat(&xs, 1))?
            }
            _ => unreachable!("weight kinds handled above"),
        };
        let out = match (quant, l.act_quant) {
            (true, Some(q)) => fake_quant_forward(&out, &q),
            _ => out,
        };
        vals.push(out);
    }
    Ok(vals)
}

/// `[N, A*k, H, W]` head map to `[N, H*W*A, k]`, anchors row-major then by size.
pub fn head_rows(t: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.shape().as_nchw()?;
    if c % k != 0 {
        return Err(Error::shape("head", format!("{c} channels not a multiple of {k}")));
    }
    let a = c / k;
    let mut out = vec![0.0; t.numel()];
    let src = t.data();
    for b in 0..n {
        for ch in 0..c {
            let (ai, kk) = (ch / k, ch % k);
            for i in 0..h {
                for j in 0..w {
                    let anchor = (i * w + j) * a + ai;
                    out[((b * h * w * a) + anchor) * k + kk] = src[((b * c + ch) * h + i) * w + j];
                }
            }
        }
    }
    Tensor::new(Shape::new(vec![n, h * w * a, k])?, out)
}

pub(crate) fn heads_from(g: &NetworkGraph, vals: &[Tensor]) -> Result<HeadOutputs> {
    Ok(HeadOutputs {
        cls: head_rows(&vals[g.cls_out], 2)?,
        boxes: head_rows(&vals[g.box_out], 4)?,
    })
}

/// Full-precision forward pass on a folded or unfolded graph. Quantizers
/// are ignored.
pub fn run_float(g: &NetworkGraph, input: &Tensor) -> Result<HeadOutputs> {
    heads_from(g, &forward_nodes(g, input, Mode::Float)?)
}

/// Simulated quantization in float arithmetic. A graph with no quantizers
/// runs the float path; a partially quantized graph is rejected.
pub fn run_fake_quant(g: &NetworkGraph, input: &Tensor) -> Result<HeadOutputs> {
    if !g.check_quantizers()? {
        return run_float(g, input);
    }
    heads_from(g, &forward_nodes(g, input, Mode::FakeQuant)?)
}

/// Dequantized weights the fake-quant path actually multiplies with.
pub fn effective_fake_weights(g: &NetworkGraph, i: usize) -> Option<Tensor> {
    let q: QuantSpec = g.layers[i].weight_quant?;
    let (w, _) = effective_params(g, i, g.bn_after()[i]);
    Some(w.map(|v| fake_quant_value(v, &q)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, fold_bn, ArchConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(g: &NetworkGraph, n: usize, seed: u64) -> Tensor {
        let (c, h, w) = g.input_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::nchw(n, c, h, w).unwrap(), |_| rng.random_range(-0.5..0.5))
    }

    pub(crate) fn randomize_bn(g: &mut NetworkGraph, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut g.layers {
            if let Some(bn) = &mut l.bn {
                for c in 0..bn.channels() {
                    bn.gamma[c] = rng.random_range(0.5..1.5);
                    bn.beta[c] = rng.random_range(-0.2..0.2);
                    bn.mean[c] = rng.random_range(-0.2..0.2);
                    bn.var[c] = rng.random_range(0.5..2.0);
                }
            }
        }
    }

    #[test]
    fn default_output_shapes() {
        let g = build_network(&ArchConfig::default_arch(), 0).unwrap();
        let out = run_float(&g, &random_input(&g, 1, 0)).unwrap();
        assert_eq!(out.cls.dims(), &[1, 240, 2]);
        assert_eq!(out.boxes.dims(), &[1, 240, 4]);
    }

    #[test]
    fn zero_weights_propagate_head_bias() {
        let mut g = build_network(&ArchConfig::toy(), 0).unwrap();
        for l in &mut g.layers {
            if let Some(w) = &mut l.weight {
                *w = w.map(|_| 0.0);
            }
        }
        let a = g.arch.anchors.sizes.len();
        let cls = g.cls_out;
        g.layers[cls].bias = Some((0..2 * a).map(|c| c as f64).collect());
        let out = run_float(&g, &random_input(&g, 1, 1)).unwrap();
        for (r, row) in out.cls.data().chunks(2).enumerate() {
            let ai = r % a;
            assert_eq!(row, &[(2 * ai) as f64, (2 * ai + 1) as f64]);
        }
        assert!(out.boxes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn folded_matches_unfolded() {
        let mut g = build_network(&ArchConfig::toy(), 3).unwrap();
        randomize_bn(&mut g, 4);
        let f = fold_bn(&g).unwrap();
        let x = random_input(&g, 2, 5);
        let a = run_float(&g, &x).unwrap();
        let b = run_float(&f, &x).unwrap();
        for (u, v) in a.cls.data().iter().chain(a.boxes.data()).zip(b.cls.data().iter().chain(b.boxes.data())) {
            assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn unquantized_fake_quant_is_float() {
        let g = build_network(&ArchConfig::toy(), 0).unwrap();
        let x = random_input(&g, 1, 2);
        assert_eq!(run_fake_quant(&g, &x).unwrap(), run_float(&g, &x).unwrap());
    }

    #[test]
    fn partial_quantizers_rejected() {
        let mut g = build_network(&ArchConfig::toy(), 0).unwrap();
        let spec = QuantSpec::new(crate::quant::Precision::Int(8), 0.01, crate::quant::Target::Weight).unwrap();
        g.layers[0].weight_quant = Some(spec);
        let err = run_fake_quant(&g, &random_input(&g, 1, 0)).unwrap_err();
        assert!(err.to_string().contains("block0.dw") || err.to_string().contains("layer"));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let g = build_network(&ArchConfig::toy(), 0).unwrap();
        let x = Tensor::zeros(Shape::nchw(1, 1, 10, 10).unwrap());
        assert!(matches!(run_float(&g, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn head_reshape_layout() {
        // A = 2, k = 2, 1x2 map
        let t = Tensor::from_vec(&[1, 4, 1, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let r = head_rows(&t, 2).unwrap();
        assert_eq!(r.dims(), &[1, 4, 2]);
        // cell 0 anchor 0 = channels 0,1 at j=0
        assert_eq!(&r.data()[0..2], &[0.0, 2.0]);
        assert_eq!(&r.data()[2..4], &[4.0, 6.0]);
        assert_eq!(&r.data()[4..6], &[1.0, 3.0]);
    }
}
