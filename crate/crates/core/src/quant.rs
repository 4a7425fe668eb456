//! Symmetric per-tensor quantizer, fake quantization with straight-through
//! gradients, learned step sizes and the sharpness-aware update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{QTensor, Tensor};
use crate::train::optim::Optimizer;

/// Bit width of a quantizer. `Float` disables quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Precision {
    Float,
    Int(u8),
    Ternary,
}

impl Precision {
    pub fn is_quantized(self) -> bool {
        !matches!(self, Precision::Float)
    }

    /// Integer grid `(q_min, q_max)`.
    pub fn range(self) -> Result<(i32, i32)> {
        match self {
            Precision::Int(b) if (2..=16).contains(&b) => {
                let half = 1i32 << (b - 1);
                Ok((-half, half - 1))
            }
            Precision::Int(b) => Err(Error::Config(format!("unsupported bit width {b}"))),
            Precision::Ternary => Ok((-1, 1)),
            Precision::Float => Err(Error::Config("float precision has no integer range".into())),
        }
    }

    /// Bits charged per stored value.
    pub fn storage_bits(self) -> u32 {
        match self {
            Precision::Float => 32,
            Precision::Int(b) => b as u32,
            Precision::Ternary => 2,
        }
    }

    pub fn qmax(self) -> Result<i32> {
        Ok(self.range()?.1)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Float => f.write_str("fp32"),
            Precision::Int(b) => write!(f, "int{b}"),
            Precision::Ternary => f.write_str("ternary"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let p = match t.as_str() {
            "fp32" | "float" | "32" => Precision::Float,
            "ternary" | "ter" | "t" => Precision::Ternary,
            _ => {
                let digits = t.strip_prefix("int").unwrap_or(&t);
                let b: u8 = digits
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown precision `{s}`")))?;
                Precision::Int(b)
            }
        };
        if let Precision::Int(_) = p {
            p.range()?;
        }
        Ok(p)
    }
}

impl TryFrom<String> for Precision {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Precision> for String {
    fn from(p: Precision) -> String {
        p.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Weight,
    Activation,
}

/// One quantizer attachment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub precision: Precision,
    pub step: f64,
    pub zero_point: i32,
    pub target: Target,
}

impl QuantSpec {
    /// Symmetric quantizer (`zero_point = 0`).
    pub fn new(precision: Precision, step: f64, target: Target) -> Result<Self> {
        Self::with_zero_point(precision, step, 0, target)
    }

    pub fn with_zero_point(precision: Precision, step: f64, zero_point: i32, target: Target) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidStep(step));
        }
        precision.range()?;
        Ok(QuantSpec {
            precision,
            step,
            zero_point,
            target,
        })
    }

    pub fn qrange(&self) -> (i32, i32) {
        // validated at construction
        self.precision.range().expect("quantized precision")
    }

    fn check(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidStep(self.step));
        }
        self.precision.range().map(|_| ())
    }
}

pub fn qrange(spec: &QuantSpec) -> (i32, i32) {
    spec.qrange()
}

/// Half-away-from-zero, the crate-wide rounding mode. Same result as
/// `f64::round` without the libm call.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    let a = x.abs();
    // every double at or above 2^52 is already an integer
    if a < 4_503_599_627_370_496.0 {
        let t = a as i64 as f64;
        let r = if a - t >= 0.5 { t + 1.0 } else { t };
        r.copysign(x)
    } else {
        x
    }
}

/// A quantizer's grid with the range lookup hoisted out of per-element loops.
#[derive(Clone, Copy, Debug)]
struct Grid {
    lo: f64,
    hi: f64,
    z: f64,
    step: f64,
}

impl Grid {
    fn of(spec: &QuantSpec) -> Self {
        let (lo, hi) = spec.qrange();
        Grid {
            lo: lo as f64,
            hi: hi as f64,
            z: spec.zero_point as f64,
            step: spec.step,
        }
    }

    #[inline]
    fn level(&self, x: f64) -> f64 {
        (round_half_away(x / self.step) - self.z).clamp(self.lo, self.hi)
    }

    #[inline]
    fn fake(&self, x: f64) -> f64 {
        (self.level(x) + self.z) * self.step
    }
}

#[inline]
pub fn quantize_value(x: f64, spec: &QuantSpec) -> i32 {
    Grid::of(spec).level(x) as i32
}

#[inline]
pub fn fake_quant_value(x: f64, spec: &QuantSpec) -> f64 {
    Grid::of(spec).fake(x)
}

pub fn quantize(x: &Tensor, spec: &QuantSpec) -> Result<QTensor> {
    spec.check()?;
    let grid = Grid::of(spec);
    let data = x.data().iter().map(|&v| grid.level(v) as i32).collect();
    QTensor::new(x.shape().clone(), data, spec.step, spec.zero_point, spec.precision)
}

/// `(q + z) * s`; rejects values outside the code range of `spec`.
pub fn dequantize(q: &[i32], spec: &QuantSpec) -> Result<Vec<f64>> {
    spec.check()?;
    let (lo, hi) = spec.qrange();
    q.iter()
        .map(|&v| {
            if v < lo || v > hi {
                Err(Error::OutOfRange {
                    value: v as i64,
                    min: lo as i64,
                    max: hi as i64,
                })
            } else {
                Ok((v + spec.zero_point) as f64 * spec.step)
            }
        })
        .collect()
}

pub fn fake_quant_forward(x: &Tensor, spec: &QuantSpec) -> Tensor {
    let grid = Grid::of(spec);
    x.map(|v| grid.fake(v))
}

/// LSQ gradient normalizer `1/sqrt(N * q_max)`.
pub fn lsq_grad_scale(numel: usize, precision: Precision) -> f64 {
    let qmax = precision.qmax().unwrap_or(1).max(1) as f64;
    1.0 / (numel as f64 * qmax).sqrt()
}

/// Straight-through input gradient and LSQ step gradient.
///
/// Returns `(grad_x, grad_s)` where `grad_s` already carries the LSQ scale.
pub fn fake_quant_backward(x: &[f64], spec: &QuantSpec, grad_out: &[f64]) -> (Vec<f64>, f64) {
    assert_eq!(x.len(), grad_out.len(), "fake_quant_backward length mismatch");
    let (lo, hi) = spec.qrange();
    let (lo, hi) = (lo as f64, hi as f64);
    let z = spec.zero_point as f64;
    let mut gs = 0.0;
    let gx = x
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| {
            let u = v / spec.step;
            let shifted = u - z;
            if shifted < lo {
                gs += g * (lo + z);
                0.0
            } else if shifted > hi {
                gs += g * (hi + z);
                0.0
            } else {
                gs += g * (round_half_away(u) - u);
                g
            }
        })
        .collect();
    (gx, gs * lsq_grad_scale(x.len(), spec.precision))
}

/// `sign(w) * [|w| >= s/2]`.
pub fn ternary_quantize(w: &Tensor, step: f64) -> Result<QTensor> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidStep(step));
    }
    let data = w
        .data()
        .iter()
        .map(|&v| if v.abs() >= step / 2.0 { v.signum() as i32 } else { 0 })
        .collect();
    QTensor::new(w.shape().clone(), data, step, 0, Precision::Ternary)
}

/// Initial weight step `2 * mean|w| / sqrt(q_max)`.
pub fn init_weight_step(w: &[f64], precision: Precision) -> Result<f64> {
    let qmax = precision.qmax()? as f64;
    let mean = w.iter().map(|v| v.abs()).sum::<f64>() / w.len().max(1) as f64;
    let s = 2.0 * mean / qmax.sqrt();
    Ok(if s > 0.0 && s.is_finite() { s } else { 1e-3 })
}

/// Step minimizing the squared quantization error of `values`, searched over
/// `max|v| / q_max * f` for `f` on a grid in `(0, 1]`. Uses at most
/// `MSE_SAMPLE` evenly strided values.
pub fn mse_step(values: &[f64], precision: Precision, target: Target) -> Result<f64> {
    const GRID: usize = 100;
    let stride = values.len().div_ceil(MSE_SAMPLE).max(1);
    let sample: Vec<f64> = values.iter().step_by(stride).copied().collect();
    let max_abs = sample.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let base = init_activation_step(max_abs, precision)?;
    if max_abs == 0.0 {
        return Ok(base);
    }
    let mut best = (f64::INFINITY, base);
    for k in 1..=GRID {
        let step = base * k as f64 / GRID as f64;
        let spec = QuantSpec::new(precision, step, target)?;
        let grid = Grid::of(&spec);
        let err: f64 = sample.iter().map(|&v| (grid.fake(v) - v).powi(2)).sum();
        if err < best.0 {
            best = (err, step);
        }
    }
    Ok(best.1)
}

/// Sample cap for [`mse_step`].
pub const MSE_SAMPLE: usize = 65_536;

/// Initial activation step `max|a| / q_max` from a calibration batch.
pub fn init_activation_step(max_abs: f64, precision: Precision) -> Result<f64> {
    let qmax = precision.qmax()? as f64;
    let s = max_abs / qmax;
    Ok(if s > 0.0 && s.is_finite() { s } else { 1e-3 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamConfig {
    pub rho: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig { rho: 0.05 }
    }
}

impl SamConfig {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("sam rho must be >= 0, got {rho}")));
        }
        Ok(SamConfig { rho })
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// `params + rho * grads / (|grads| + 1e-12)`.
pub fn sam_perturb(params: &[f64], grads: &[f64], cfg: &SamConfig) -> Vec<f64> {
    assert_eq!(params.len(), grads.len(), "sam_perturb length mismatch");
    let scale = cfg.rho / (l2_norm(grads) + 1e-12);
    params.iter().zip(grads).map(|(p, g)| p + scale * g).collect()
}

/// One sharpness-aware step. `loss_grad` evaluates loss and gradient at the
/// given parameters. Returns the loss at the unperturbed point.
///
/// With `rho == 0` the second pass is skipped, so the update is exactly the
/// optimizer's plain step on the first gradient.
pub fn salsq_step<F, O>(params: &mut [f64], mut loss_grad: F, opt: &mut O, cfg: &SamConfig) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    O: Optimizer + ?Sized,
{
    let (loss, g1) = loss_grad(params)?;
    if !loss.is_finite() || g1.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("loss {loss} in first pass")));
    }
    if cfg.rho == 0.0 {
        opt.step(params, &g1);
        return Ok(loss);
    }
    let perturbed = sam_perturb(params, &g1, cfg);
    let (loss2, g2) = loss_grad(&perturbed)?;
    if !loss2.is_finite() || g2.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("loss {loss2} in perturbed pass")));
    }
    opt.step(params, &g2);
    Ok(loss)
}
