use crate::error::{Error, Result};
use crate::model::NetworkGraph;
use crate::quant::{init_weight_step, mse_step, Precision, QuantSpec, Target};
use crate::tensor::Tensor;

use super::exec::{effective_params, forward_nodes, Mode};

/// Attaches weight quantizers to every weight layer and activation
/// quantizers to every node feeding one, with steps initialised from the
/// weights and from a float pass over `calib`. Activation steps minimise
/// the squared quantization error of the calibration values.
///
/// `Float` weights or activations strip all quantizers.
pub fn attach_quantizers(g: &NetworkGraph, w: Precision, a: Precision, calib: &Tensor) -> Result<NetworkGraph> {
    let mut out = g.clone();
    out.strip_quantizers();
    match (w.is_quantized(), a.is_quantized()) {
        (false, false) => return Ok(out),
        (true, true) => {}
        _ => {
            return Err(Error::Config(format!(
                "weights ({w}) and activations ({a}) must both be quantized or both float"
            )))
        }
    }
    let vals = forward_nodes(&out, calib, Mode::Float)?;
    let bn_after = out.bn_after();
    for i in out.weight_layers() {
        let (ew, _) = effective_params(&out, i, bn_after[i]);
        let s = init_weight_step(ew.data(), w)?;
        out.layers[i].weight_quant = Some(QuantSpec::new(w, s, Target::Weight)?);
    }
    for i in out.act_quant_sites() {
        let s = mse_step(vals[i].data(), a, Target::Activation)?;
        out.layers[i].act_quant = Some(QuantSpec::new(a, s, Target::Activation)?);
    }
    Ok(out)
}
