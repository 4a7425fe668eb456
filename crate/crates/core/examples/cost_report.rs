//! Parameter memory, multiply-accumulates and bit operations of the default
//! detector at each deployed precision.
//!
//! cargo run --example cost_report

use tfd::eval::{cost_report, precision_label};
use tfd::model::{build_network, ArchConfig};
use tfd::quant::Precision;

fn main() -> tfd::Result<()> {
    let g = build_network(&ArchConfig::default_arch(), 0)?;
    println!("{:>10} {:>10} {:>10} {:>12}", "bits", "Params(M)", "FLOPs(G)", "BOPs(M)");
    for (w, a) in [
        (Precision::Float, Precision::Float),
        (Precision::Int(8), Precision::Int(8)),
        (Precision::Int(4), Precision::Int(4)),
        (Precision::Int(3), Precision::Int(3)),
        (Precision::Ternary, Precision::Int(3)),
    ] {
        let c = cost_report(&g, w, a);
        println!("{:>10} {:>10.4} {:>10.4} {:>12.1}", precision_label(w, a), c.params_m, c.flops_g, c.bops_m);
    }
    Ok(())
}
