//! Symmetric per-tensor quantization at every supported precision, plus the
//! straight-through and LSQ step gradients.
//!
//! cargo run --example quantizer

use tfd::quant::{
    fake_quant_backward, fake_quant_value, init_weight_step, lsq_grad_scale, mse_step, quantize_value, Precision,
    QuantSpec, Target,
};

fn main() -> tfd::Result<()> {
    let xs = [-1.3, -0.62, -0.25, -0.05, 0.0, 0.05, 0.25, 0.5, 0.75, 2.4];
    for p in [Precision::Int(8), Precision::Int(4), Precision::Int(3), Precision::Int(2), Precision::Ternary] {
        let spec = QuantSpec::new(p, 0.25, Target::Weight)?;
        let (lo, hi) = spec.qrange();
        let codes: Vec<i32> = xs.iter().map(|&x| quantize_value(x, &spec)).collect();
        println!("{p:>8} range [{lo}, {hi}] codes {codes:?}");
    }

    // gradients: identity inside the clip range, zero outside; step gets the LSQ term
    let spec = QuantSpec::new(Precision::Int(3), 0.25, Target::Activation)?;
    let g = vec![1.0; xs.len()];
    let (gx, gs) = fake_quant_backward(&xs, &spec, &g);
    println!("\nint3 s=0.25");
    for (x, d) in xs.iter().zip(&gx) {
        println!("  x {x:>6.2} -> {:>6.3}  dL/dx {d}", fake_quant_value(*x, &spec));
    }
    println!("  dL/ds {gs:.4} (grad scale {:.4})", lsq_grad_scale(xs.len(), Precision::Int(3)));

    // step initialisation on a heavy-tailed sample
    let mut v: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.7).sin() * 0.3).collect();
    v.push(6.0);
    println!(
        "\nstep init, int4: weight rule {:.4}, MSE search {:.4}, max/qmax {:.4}",
        init_weight_step(&v, Precision::Int(4))?,
        mse_step(&v, Precision::Int(4), Target::Activation)?,
        6.0 / 7.0
    );
    Ok(())
}
