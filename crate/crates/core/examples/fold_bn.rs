//! Folds every batch norm of the default detector into its convolution and
//! checks the folded network computes the same heads.
//!
//! cargo run --profile test --example fold_bn

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfd::infer::run_float;
use tfd::model::{build_network, count_bn, fold_bn, layer_count, ArchConfig};
use tfd::tensor::{Shape, Tensor};

fn main() -> tfd::Result<()> {
    let mut g = build_network(&ArchConfig::default_arch(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for l in &mut g.layers {
        if let Some(bn) = &mut l.bn {
            for c in 0..bn.channels() {
                bn.gamma[c] = rng.random_range(0.5..1.5);
                bn.beta[c] = rng.random_range(-0.3..0.3);
                bn.mean[c] = rng.random_range(-0.3..0.3);
                bn.var[c] = rng.random_range(0.3..2.0);
            }
        }
    }
    let f = fold_bn(&g)?;
    println!("layers {}, batch norms {} -> {} after folding", layer_count(&g), count_bn(&g), count_bn(&f));

    let (c, h, w) = g.input_dims();
    let x = Tensor::from_fn(Shape::nchw(4, c, h, w)?, |_| rng.random_range(-0.5..0.5));
    let (a, b) = (run_float(&g, &x)?, run_float(&f, &x)?);
    for (name, p, q) in [("cls", &a.cls, &b.cls), ("boxes", &a.boxes, &b.boxes)] {
        let dev = p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        println!("{name:>5}: max |unfolded - folded| {dev:.2e}, relative {:.2e}", dev / p.max_abs());
    }
    Ok(())
}
