//! `TFDW1` checkpoint files.
//!
//! Layout: the 5-byte magic, a little-endian `u32` header length, a JSON
//! header, then the payload. Per layer the payload holds the weight (f64 LE,
//! or 2-bit codes for folded ternary layers), the bias and the BN vectors
//! `gamma, beta, mean, var`, each f64 LE. The header carries the full arch
//! table, its hash and a sha256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::{pack_ternary, unpack_ternary};
use crate::model::{build_network, fold_bn, ArchConfig, BnParams, LayerKind, NetworkGraph};
use crate::quant::{quantize, Precision, QuantSpec};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 5] = b"TFDW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightEncoding {
    F64Le,
    Ternary2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub weight_shape: Option<[usize; 4]>,
    pub encoding: Option<WeightEncoding>,
    pub bias_len: Option<usize>,
    pub bn_channels: Option<usize>,
    pub bn_eps: Option<f64>,
    pub weight_quant: Option<QuantSpec>,
    pub act_quant: Option<QuantSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub arch_hash: String,
    pub folded: bool,
    /// Bit-stage tag such as `fp32` or `wtera3`.
    pub stage: String,
    pub input_quant: QuantSpec,
    pub layers: Vec<LayerRecord>,
    pub payload_sha256: String,
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn packs_ternary(folded: bool, q: Option<&QuantSpec>) -> bool {
    folded && q.is_some_and(|q| q.precision == Precision::Ternary)
}

/// Serializes `g` under the stage tag `stage`.
pub fn encode_checkpoint(g: &NetworkGraph, stage: &str) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut layers = Vec::with_capacity(g.layers.len());
    for l in &g.layers {
        let mut enc = None;
        if let Some(w) = &l.weight {
            if packs_ternary(g.folded, l.weight_quant.as_ref()) {
                let codes = quantize(w, l.weight_quant.as_ref().expect("checked"))?;
                payload.extend(pack_ternary(codes.data())?);
                enc = Some(WeightEncoding::Ternary2);
            } else {
                put_f64s(&mut payload, w.data());
                enc = Some(WeightEncoding::F64Le);
            }
        }
        if let Some(b) = &l.bias {
            put_f64s(&mut payload, b);
        }
        if let Some(bn) = &l.bn {
            for v in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
                put_f64s(&mut payload, v);
            }
        }
        layers.push(LayerRecord {
            name: l.name.clone(),
            kind: l.kind,
            weight_shape: l.weight.as_ref().map(|_| l.weight_dims()),
            encoding: enc,
            bias_len: l.bias.as_ref().map(Vec::len),
            bn_channels: l.bn.as_ref().map(BnParams::channels),
            bn_eps: l.bn.as_ref().map(|b| b.eps),
            weight_quant: l.weight_quant,
            act_quant: l.act_quant,
        });
    }
    let header = CheckpointHeader {
        arch: g.arch.clone(),
        arch_hash: g.arch_hash(),
        folded: g.folded,
        stage: stage.to_string(),
        input_quant: g.input_quant,
        layers,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + head.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend(head);
    out.extend(payload);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Reads the header without touching the payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing TFDW1 magic".into()));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let end = 9usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let h: CheckpointHeader = serde_json::from_slice(&bytes[9..end])?;
    Ok((h, end))
}

/// Parses a checkpoint. The stored arch must hash to the stored hash, and to
/// `expected` when given; every layer is checked against the graph that arch
/// builds.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ArchConfig>) -> Result<(NetworkGraph, CheckpointHeader)> {
    let (h, start) = read_header(bytes)?;
    let stored = h.arch.hash();
    if stored != h.arch_hash {
        return Err(Error::Checkpoint(format!(
            "arch hash mismatch: header says {}, table hashes to {stored}",
            h.arch_hash
        )));
    }
    if let Some(e) = expected {
        if e.hash() != h.arch_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was built for arch {}, refusing to load as {}",
                h.arch_hash,
                e.hash()
            )));
        }
    }
    let payload = &bytes[start..];
    if hex::encode(Sha256::digest(payload)) != h.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let mut g = build_network(&h.arch, 0)?;
    if h.folded {
        g = fold_bn(&g)?;
    }
    if g.layers.len() != h.layers.len() {
        return Err(Error::Checkpoint(format!(
            "{} layer records, arch builds {}",
            h.layers.len(),
            g.layers.len()
        )));
    }
    let mut r = Reader { buf: payload, at: 0 };
    for (l, rec) in g.layers.iter_mut().zip(&h.layers) {
        let mismatch = |what: &str| Error::Checkpoint(format!("layer {}: {what} does not match the arch", rec.name));
        if l.name != rec.name || l.kind != rec.kind {
            return Err(mismatch("name or kind"));
        }
        match (&l.weight, rec.weight_shape, rec.encoding) {
            (None, None, None) => {}
            (Some(_), Some(shape), Some(enc)) if shape == l.weight_dims() => {
                let n: usize = shape.iter().product();
                let data = match enc {
                    WeightEncoding::F64Le => r.f64s(n, &rec.name)?,
                    WeightEncoding::Ternary2 => {
                        let q = rec
                            .weight_quant
                            .filter(|q| packs_ternary(h.folded, Some(q)))
                            .ok_or_else(|| mismatch("ternary encoding without a folded ternary quantizer"))?;
                        let codes = unpack_ternary(r.take(n.div_ceil(4), &rec.name)?, n)?;
                        codes.into_iter().map(|c| c as f64 * q.step).collect()
                    }
                };
                l.weight = Some(Tensor::new(Shape::new(shape.to_vec())?, data)?);
            }
            _ => return Err(mismatch("weight shape")),
        }
        match (&l.bias, rec.bias_len) {
            (None, None) => {}
            (Some(b), Some(n)) if b.len() == n => l.bias = Some(r.f64s(n, &rec.name)?),
            _ => return Err(mismatch("bias")),
        }
        match (&l.bn, rec.bn_channels, rec.bn_eps) {
            (None, None, None) => {}
            (Some(bn), Some(c), Some(eps)) if bn.channels() == c => {
                l.bn = Some(BnParams {
                    gamma: r.f64s(c, &rec.name)?,
                    beta: r.f64s(c, &rec.name)?,
                    mean: r.f64s(c, &rec.name)?,
                    var: r.f64s(c, &rec.name)?,
                    eps,
                });
            }
            _ => return Err(mismatch("BN parameters")),
        }
        l.weight_quant = rec.weight_quant;
        l.act_quant = rec.act_quant;
    }
    if r.at != payload.len() {
        return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len() - r.at)));
    }
    g.input_quant = h.input_quant;
    g.check_quantizers()?;
    Ok((g, h))
}

pub fn save_checkpoint(path: &Path, g: &NetworkGraph, stage: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(g, stage)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ArchConfig>) -> Result<(NetworkGraph, CheckpointHeader)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, expected)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::{attach_quantizers, run_fake_quant};
    use crate::quant::fake_quant_forward;

    fn calib(g: &NetworkGraph) -> Tensor {
        let (c, h, w) = g.input_dims();
        Tensor::from_fn(Shape::nchw(2, c, h, w).unwrap(), |i| ((i * 7919 % 255) as f64 - 128.0) / 255.0)
    }

    #[test]
    fn float_round_trip_is_exact() {
        let g = build_network(&ArchConfig::toy(), 5).unwrap();
        let bytes = encode_checkpoint(&g, "fp32").unwrap();
        assert_eq!(&bytes[..5], MAGIC);
        let (back, h) = decode_checkpoint(&bytes, Some(&ArchConfig::toy())).unwrap();
        assert_eq!(back, g);
        assert_eq!(h.stage, "fp32");
        assert_eq!(encode_checkpoint(&back, "fp32").unwrap(), bytes);
    }

    #[test]
    fn quantized_unfolded_round_trip_is_exact() {
        let g = build_network(&ArchConfig::toy(), 5).unwrap();
        let q = attach_quantizers(&g, Precision::Int(4), Precision::Int(4), &calib(&g)).unwrap();
        let (back, _) = decode_checkpoint(&encode_checkpoint(&q, "w4a4").unwrap(), None).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn folded_ternary_is_packed_and_equivalent() {
        let g = build_network(&ArchConfig::toy(), 5).unwrap();
        let x = calib(&g);
        let q = fold_bn(&attach_quantizers(&g, Precision::Ternary, Precision::Int(3), &x).unwrap()).unwrap();
        let bytes = encode_checkpoint(&q, "wtera3").unwrap();
        let (h, _) = read_header(&bytes).unwrap();
        let packed = h.layers.iter().filter(|r| r.encoding == Some(WeightEncoding::Ternary2)).count();
        assert_eq!(packed, q.weight_layers().len());
        let float_bytes = q.layers.iter().filter_map(|l| l.weight.as_ref()).map(|w| 8 * w.numel()).sum::<usize>();
        assert!(bytes.len() < float_bytes / 4, "{} vs {float_bytes}", bytes.len());
        let (back, _) = decode_checkpoint(&bytes, None).unwrap();
        for (a, b) in q.layers.iter().zip(&back.layers) {
            if let (Some(wa), Some(wb), Some(s)) = (&a.weight, &b.weight, &a.weight_quant) {
                assert_eq!(fake_quant_forward(wa, s), *wb);
            }
        }
        let (ya, yb) = (run_fake_quant(&q, &x).unwrap(), run_fake_quant(&back, &x).unwrap());
        assert_eq!(ya.cls, yb.cls);
        assert_eq!(ya.boxes, yb.boxes);
    }

    #[test]
    fn refuses_wrong_arch_and_corruption() {
        let g = build_network(&ArchConfig::toy(), 5).unwrap();
        let bytes = encode_checkpoint(&g, "fp32").unwrap();
        let e = decode_checkpoint(&bytes, Some(&ArchConfig::default_arch())).unwrap_err();
        assert!(e.to_string().contains("refusing"), "{e}");
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(decode_checkpoint(&bad, None).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8], None).is_err());
        assert!(decode_checkpoint(b"TFDW0xxxx", None).is_err());
        // a header whose arch was edited no longer matches its hash
        let (mut h, start) = read_header(&bytes).unwrap();
        h.arch.leaky_slope = 0.2;
        let head = serde_json::to_vec(&h).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(head.len() as u32).to_le_bytes());
        forged.extend(head);
        forged.extend_from_slice(&bytes[start..]);
        assert!(decode_checkpoint(&forged, None).unwrap_err().to_string().contains("hash"));
    }
}
