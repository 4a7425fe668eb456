//! Reverse-mode gradient tape over the detector's op set.

use crate::error::{Error, Result};
use crate::quant::{fake_quant_backward, fake_quant_forward, QuantSpec};
use crate::tensor::{concat, conv2d, conv_backward_input, conv_backward_weight, ConvGeom, ConvParams, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Gradient function: `(input values, output value, grad of output, which
/// inputs need a gradient) -> grad per input`.
type BackFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    needs_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one [`Tape::backward`] call, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` if the var is disconnected from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient or zeros when disconnected.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(&[1], vec![v]).expect("scalar")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    fn push(&mut self, op: &'static str, value: Tensor, inputs: Vec<usize>, back: BackFn) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs,
            needs_grad,
            back: needs_grad.then_some(back),
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: "param",
            value,
            inputs: vec![],
            needs_grad: true,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: "const",
            value,
            inputs: vec![],
            needs_grad: false,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, p: ConvParams) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(xv.dims(), wv.dims(), p)?;
        let out = conv2d(xv, wv, None, p)?;
        Ok(self.push(
            "conv2d",
            out,
            vec![x.0, w.0],
            Box::new(move |ins, _, g, need| {
                vec![
                    need[0].then(|| conv_backward_input(&geom, g, ins[1].data())),
                    need[1].then(|| conv_backward_weight(&geom, g, ins[0].data())),
                ]
            }),
        ))
    }

    /// `x[n,c,h,w] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (_, c, h, w) = xv.shape().as_nchw()?;
        if bv.numel() != c {
            return Err(Error::shape("bias", format!("{} values for {c} channels", bv.numel())));
        }
        let plane = h * w;
        let bd = bv.data();
        let mut data = Vec::with_capacity(xv.numel());
        for (i, chunk) in xv.data().chunks(plane).enumerate() {
            let b = bd[i % c];
            data.extend(chunk.iter().map(|&v| v + b));
        }
        let out = Tensor::new(xv.shape().clone(), data)?;
        Ok(self.push(
            "add_bias",
            out,
            vec![x.0, b.0],
            Box::new(move |_, _, g, need| {
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    gb
                });
                vec![need[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Batch-statistics BN. Returns the output and the batch `(mean, var)`
    /// (biased variance), for running-average updates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape().as_nchw()?;
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, chunk) in xd.chunks(plane).enumerate() {
            mean[i % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (i, chunk) in xd.chunks(plane).enumerate() {
            let mu = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xd.len());
        for (i, chunk) in xd.chunks(plane).enumerate() {
            let (mu, k) = (mean[i % c], inv[i % c]);
            xhat.extend(chunk.iter().map(|&v| (v - mu) * k));
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xd.len());
        for (i, chunk) in xhat.chunks(plane).enumerate() {
            let (ga, be) = (gd[i % c], bd[i % c]);
            out.extend(chunk.iter().map(|&v| ga * v + be));
        }
        let out = Tensor::new(xv.shape().clone(), out)?;
        let inv_c = inv.clone();
        let var_out = self.push(
            "batch_norm",
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |ins, _, g, need| {
                let gamma = ins[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = i % c;
                    sum_g[ch] += gc.iter().sum::<f64>();
                    sum_gx[ch] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                }
                let gx = need[0].then(|| {
                    let mut gx = Vec::with_capacity(g.len());
                    for (i, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        let ch = i % c;
                        let (k, sg, sgx) = (gamma[ch] * inv_c[ch] / m, sum_g[ch], sum_gx[ch]);
                        gx.extend(gc.iter().zip(xc).map(|(&gi, &xh)| k * (m * gi - sg - xh * sgx)));
                    }
                    gx
                });
                vec![gx, need[1].then(|| sum_gx.clone()), need[2].then(|| sum_g.clone())]
            }),
        );
        Ok((var_out, mean, var))
    }

    /// `w[o, ...] * k[o]` with constant `k`.
    pub fn scale_out_channels(&mut self, w: Var, k: Vec<f64>) -> Var {
        let out = crate::model::scale_out_channels(self.value(w), &k);
        self.push(
            "scale_out",
            out,
            vec![w.0],
            Box::new(move |_, _, g, _| {
                let per = g.len() / k.len();
                vec![Some(g.chunks(per).zip(&k).flat_map(|(c, &kc)| c.iter().map(move |&v| v * kc)).collect())]
            }),
        )
    }

    /// `x + offset` with a constant offset of the same length.
    pub fn add_const(&mut self, x: Var, offset: Vec<f64>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().zip(&offset).map(|(a, b)| a + b).collect();
        let out = Tensor::new(xv.shape().clone(), data).expect("same shape");
        self.push("add_const", out, vec![x.0], Box::new(|_, _, g, _| vec![Some(g.to_vec())]))
    }

    /// Fake quantization with a learnable scalar step: STE for `x`, LSQ for
    /// the step.
    pub fn fake_quant(&mut self, x: Var, step: Var, spec: QuantSpec) -> Result<Var> {
        let s = self.value(step).data()[0];
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidStep(s));
        }
        let spec = QuantSpec { step: s, ..spec };
        let out = fake_quant_forward(self.value(x), &spec);
        Ok(self.push(
            "fake_quant",
            out,
            vec![x.0, step.0],
            Box::new(move |ins, _, g, need| {
                let (gx, gs) = fake_quant_backward(ins[0].data(), &spec, g);
                vec![need[0].then_some(gx), need[1].then(|| vec![gs])]
            }),
        ))
    }

    /// Fake quantization with a fixed step; straight-through gradient.
    pub fn fake_quant_const(&mut self, x: Var, spec: QuantSpec) -> Var {
        let out = fake_quant_forward(self.value(x), &spec);
        self.push(
            "fake_quant_const",
            out,
            vec![x.0],
            Box::new(move |ins, _, g, _| {
                let (gx, _) = fake_quant_backward(ins[0].data(), &spec, g);
                vec![Some(gx)]
            }),
        )
    }

    /// Bias rounded onto the accumulator grid `step`; straight-through.
    pub fn bias_quant(&mut self, b: Var, step: f64) -> Var {
        let out = self.value(b).map(|v| crate::infer::bias_fake_quant(v, step));
        self.push("bias_quant", out, vec![b.0], Box::new(|_, _, g, _| vec![Some(g.to_vec())]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = crate::tensor::leaky_relu(self.value(x), slope);
        self.push(
            "leaky_relu",
            out,
            vec![x.0],
            Box::new(move |ins, _, g, _| {
                vec![Some(
                    ins[0]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
                        .collect(),
                )]
            }),
        )
    }

    /// Channel concatenation of NCHW tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let out = concat(&vals, 1)?;
        let sizes: Vec<usize> = vals.iter().map(|t| t.dims()[1]).collect();
        let (n, _, h, w) = out.shape().as_nchw()?;
        let plane = h * w;
        let total: usize = sizes.iter().sum();
        Ok(self.push(
            "concat",
            out,
            xs.iter().map(|v| v.0).collect(),
            Box::new(move |_, _, g, need| {
                let mut off = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &sz)| {
                        let r = need[k].then(|| {
                            let mut gk = Vec::with_capacity(n * sz * plane);
                            for b in 0..n {
                                let start = (b * total + off) * plane;
                                gk.extend_from_slice(&g[start..start + sz * plane]);
                            }
                            gk
                        });
                        off += sz;
                        r
                    })
                    .collect()
            }),
        ))
    }

    /// `[N, A*k, H, W]` to `[N, H*W*A, k]`.
    pub fn head_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let dims = xv.dims().to_vec();
        let out = crate::infer::head_rows(xv, k)?;
        Ok(self.push(
            "head_rows",
            out,
            vec![x.0],
            Box::new(move |_, _, g, _| {
                let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                let a = c / k;
                let mut gx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let (ai, kk) = (ch / k, ch % k);
                        for i in 0..h {
                            for j in 0..w {
                                let anchor = (i * w + j) * a + ai;
                                gx[((b * c + ch) * h + i) * w + j] = g[((b * h * w * a) + anchor) * k + kk];
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_sq_sum(&mut self, x: Var) -> Var {
        let v = 0.5 * self.value(x).data().iter().map(|v| v * v).sum::<f64>();
        self.push(
            "half_sq_sum",
            scalar(v),
            vec![x.0],
            Box::new(|ins, _, g, _| vec![Some(ins[0].data().iter().map(|v| v * g[0]).collect())]),
        )
    }

    /// `sum(x * c)` with constant `c`; a generic scalar probe for tests.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        let v = self.value(x).data().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        self.push(
            "dot_const",
            scalar(v),
            vec![x.0],
            Box::new(move |_, _, g, _| vec![Some(c.iter().map(|v| v * g[0]).collect())]),
        )
    }

    /// Records a scalar whose gradient with respect to each input was
    /// computed alongside the value.
    pub fn custom_scalar(&mut self, op: &'static str, inputs: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Var {
        self.push(
            op,
            scalar(value),
            inputs.iter().map(|v| v.0).collect(),
            Box::new(move |_, _, g, need| {
                grads
                    .iter()
                    .zip(need)
                    .map(|(gi, &n)| n.then(|| gi.iter().map(|v| v * g[0]).collect()))
                    .collect()
            }),
        )
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].needs_grad).collect();
            let gin = back(&ins, &node.value, &g, &need);
            grads[i] = Some(g);
            for (&j, gj) in node.inputs.iter().zip(gin) {
                let Some(gj) = gj else { continue };
                if !self.nodes[j].needs_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gj),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Reshape helper for tests and examples.
pub fn tensor(dims: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(Shape::new(dims.to_vec()).expect("nonzero dims"), data).expect("matching length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{Precision, Target};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        tensor(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `f` (a scalar function of a flat vector)
    /// against an analytic gradient.
    fn check_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64, tol: f64) {
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-4);
            assert!(
                (fd - analytic[i]).abs() / denom <= tol,
                "index {i}: fd {fd} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn pointwise_conv_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let w = rand_tensor(&mut rng, &[4, 3, 1, 1]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(w.clone());
        let y = t.conv2d(xv, wv, ConvParams::new(1, 0, 1)).unwrap();
        let l = t.half_sq_sum(y);
        let g = t.backward(l).unwrap();
        let yv = t.value(y).clone();
        // dL/dW[o,c] = sum_{n,p} y[n,o,p] x[n,c,p]
        for o in 0..4 {
            for c in 0..3 {
                let mut e = 0.0;
                for n in 0..2 {
                    for p in 0..20 {
                        e += yv.data()[(n * 4 + o) * 20 + p] * x.data()[(n * 3 + c) * 20 + p];
                    }
                }
                assert!((g.get(wv).unwrap()[o * 3 + c] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut t = Tape::new();
        let w = t.param(tensor(&[3], vec![1.0, 2.0, 3.0]));
        let l = t.dot_const(w, vec![0.0; 3]);
        let g = t.backward(l).unwrap();
        assert!(g.get(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disconnected_param_has_no_grad() {
        let mut t = Tape::new();
        let a = t.param(tensor(&[1], vec![1.0]));
        let b = t.param(tensor(&[1], vec![1.0]));
        let l = t.half_sq_sum(a);
        let g = t.backward(l).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.get_or_zero(b, 1), vec![0.0]);
    }

    /// Builds a small graph exercising every float op, returning the loss
    /// for flat parameters `[w1, gamma, beta, w2, bias]`.
    fn small_graph(p: &[f64], x: &Tensor, probe: &[f64]) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let w1 = t.param(tensor(&[4, 1, 3, 3], p[0..36].to_vec()));
        let gamma = t.param(tensor(&[4], p[36..40].to_vec()));
        let beta = t.param(tensor(&[4], p[40..44].to_vec()));
        let w2 = t.param(tensor(&[4, 1, 3, 3], p[44..80].to_vec()));
        let bias = t.param(tensor(&[8], p[80..88].to_vec()));
        let c1 = t.conv2d(xv, w1, ConvParams::new(2, 1, 1)).unwrap();
        let (bn, _, _) = t.batch_norm(c1, gamma, beta, 1e-5).unwrap();
        let a = t.leaky_relu(bn, 0.125);
        let dw = t.conv2d(a, w2, ConvParams::new(1, 1, 4)).unwrap();
        let cat = t.concat(&[a, dw]).unwrap();
        let b = t.add_channel_bias(cat, bias).unwrap();
        let rows = t.head_rows(b, 2).unwrap();
        let l1 = t.dot_const(rows, probe.to_vec());
        let l2 = t.half_sq_sum(rows);
        let _ = l2;
        let g = t.backward(l1).unwrap();
        let mut flat = Vec::new();
        for v in [w1, gamma, beta, w2, bias] {
            flat.extend(g.get(v).unwrap());
        }
        (t.value(l1).data()[0], flat)
    }

    #[test]
    fn float_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 1, 6, 6]);
        let p: Vec<f64> = (0..88).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..2 * 9 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, analytic) = small_graph(&p, &x, &probe);
        let f = |q: &[f64]| small_graph(q, &x, &probe).0;
        check_fd(&f, &p, &analytic, 1e-5, 1e-3);
    }

    #[test]
    fn fake_quant_matches_surrogate_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = QuantSpec::new(Precision::Int(4), 0.1, Target::Activation).unwrap();
        // keep x/s away from rounding boundaries and the clamp edges
        let xs: Vec<f64> = (0..40)
            .map(|_| {
                let k = rng.random_range(-9i32..=8) as f64;
                (k + rng.random_range(-0.3..0.3)) * 0.1
            })
            .collect();
        let probe: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let x = t.param(tensor(&[40], xs.clone()));
        let s = t.param(tensor(&[1], vec![0.1]));
        let q = t.fake_quant(x, s, spec).unwrap();
        let l = t.dot_const(q, probe.clone());
        let g = t.backward(l).unwrap();
        // STE: gradient passes through inside the range
        for (i, &gx) in g.get(x).unwrap().iter().enumerate() {
            let u = xs[i] / 0.1;
            let inside = (-8.0..=7.0).contains(&u);
            assert_eq!(gx, if inside { probe[i] } else { 0.0 });
        }
        // LSQ: derivative of the surrogate x + s*c with c = round(x/s) - x/s
        // frozen inside the range and s*q_bound outside
        let frozen: Vec<(bool, f64)> = xs
            .iter()
            .map(|&v| {
                let u = v / 0.1;
                if u < -8.0 {
                    (false, -8.0)
                } else if u > 7.0 {
                    (false, 7.0)
                } else {
                    (true, u.round() - u)
                }
            })
            .collect();
        let surrogate = |sv: f64| -> f64 {
            xs.iter()
                .zip(&frozen)
                .zip(&probe)
                .map(|((&v, &(inside, c)), &p)| if inside { (v + sv * c) * p } else { sv * c * p })
                .sum()
        };
        let h = 1e-6;
        let fd = (surrogate(0.1 + h) - surrogate(0.1 - h)) / (2.0 * h);
        let scale = crate::quant::lsq_grad_scale(40, Precision::Int(4));
        let an = g.get(s).unwrap()[0] / scale;
        assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-3), "fd {fd} analytic {an}");
    }

    #[test]
    fn fold_ops_grad() {
        let mut t = Tape::new();
        let w = t.param(tensor(&[2, 1, 1, 1], vec![1.0, 2.0]));
        let ws = t.scale_out_channels(w, vec![3.0, 5.0]);
        let b = t.param(tensor(&[2], vec![0.0, 0.0]));
        let bs = t.add_const(b, vec![1.0, 1.0]);
        let bq = t.bias_quant(bs, 0.5);
        let l1 = t.dot_const(ws, vec![1.0, 1.0]);
        let _ = l1;
        let l = t.dot_const(bq, vec![2.0, 3.0]);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap(), &[2.0, 3.0]);
        assert!(g.get(w).is_none());
        let g2 = t.backward(l1).unwrap();
        assert_eq!(g2.get(w).unwrap(), &[3.0, 5.0]);
    }
}
