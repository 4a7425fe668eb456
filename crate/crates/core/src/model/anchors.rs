use serde::{Deserialize, Serialize};

use super::ArchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// `(width, height)` of the network input.
    pub input_size: (usize, usize),
    pub stride: usize,
    pub sizes: Vec<f64>,
    pub variances: (f64, f64),
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            input_size: (160, 120),
            stride: 16,
            sizes: vec![24.0, 48.0, 96.0],
            variances: (0.1, 0.2),
        }
    }
}

impl AnchorConfig {
    pub fn from_arch(arch: &ArchConfig) -> Self {
        AnchorConfig {
            input_size: (arch.input.width, arch.input.height),
            stride: arch.anchors.stride,
            sizes: arch.anchors.sizes.clone(),
            variances: arch.anchors.variances,
        }
    }

    /// `(rows, cols)`; partial cells at the bottom/right edge count as a row/column.
    pub fn grid_dims(&self) -> (usize, usize) {
        let (w, h) = self.input_size;
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }
}

/// Square anchor in centre form, input-pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub variances: (f64, f64),
    pub image_size: (usize, usize),
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchors at cell centres, row-major over cells, then by size.
pub fn anchor_grid(cfg: &AnchorConfig) -> AnchorSet {
    let (rows, cols) = cfg.grid_dims();
    let s = cfg.stride as f64;
    let mut anchors = Vec::with_capacity(rows * cols * cfg.per_cell());
    for i in 0..rows {
        for j in 0..cols {
            for &size in &cfg.sizes {
                anchors.push(Anchor {
                    cx: (j as f64 + 0.5) * s,
                    cy: (i as f64 + 0.5) * s,
                    w: size,
                    h: size,
                });
            }
        }
    }
    AnchorSet {
        anchors,
        variances: cfg.variances,
        image_size: cfg.input_size,
    }
}

/// Regression target of corner box `b` relative to `a`.
pub fn encode_box(a: &Anchor, b: &[f64; 4], var: (f64, f64)) -> [f64; 4] {
    let (gw, gh) = (b[2] - b[0], b[3] - b[1]);
    let (gcx, gcy) = (b[0] + gw / 2.0, b[1] + gh / 2.0);
    [
        (gcx - a.cx) / (var.0 * a.w),
        (gcy - a.cy) / (var.0 * a.h),
        (gw / a.w).ln() / var.1,
        (gh / a.h).ln() / var.1,
    ]
}

/// Inverse of [`encode_box`], without clipping.
pub fn decode_box(a: &Anchor, d: &[f64], var: (f64, f64)) -> [f64; 4] {
    let cx = a.cx + d[0] * var.0 * a.w;
    let cy = a.cy + d[1] * var.0 * a.h;
    let w = a.w * (d[2] * var.1).exp();
    let h = a.h * (d[3] * var.1).exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid() {
        let set = anchor_grid(&AnchorConfig::default());
        assert_eq!(set.len(), 240);
        assert_eq!((set.anchors[0].cx, set.anchors[0].cy), (8.0, 8.0));
        assert_eq!(set.anchors[1].w, 48.0);
        // second cell is to the right of the first
        assert_eq!(set.anchors[3].cx, 24.0);
    }

    #[test]
    fn larger_input() {
        let cfg = AnchorConfig {
            input_size: (320, 240),
            ..AnchorConfig::default()
        };
        assert_eq!(anchor_grid(&cfg).len(), 900);
    }

    #[test]
    fn encode_decode_identity_on_anchor() {
        let a = Anchor {
            cx: 40.0,
            cy: 24.0,
            w: 48.0,
            h: 48.0,
        };
        let d = encode_box(&a, &a.corners(), (0.1, 0.2));
        assert!(d.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(decode_box(&a, &[0.0; 4], (0.1, 0.2)), a.corners());
    }

    proptest! {
        #[test]
        fn grid_tiles_cell_lattice(w in 1usize..400, h in 1usize..300, stride in 1usize..32, n in 1usize..4) {
            let cfg = AnchorConfig { input_size: (w, h), stride, sizes: (1..=n).map(|k| k as f64 * 10.0).collect(), variances: (0.1, 0.2) };
            let set = anchor_grid(&cfg);
            let (rows, cols) = cfg.grid_dims();
            prop_assert_eq!(set.len(), rows * cols * n);
            for (k, a) in set.anchors.iter().enumerate() {
                let cell = k / n;
                let (i, j) = (cell / cols, cell % cols);
                prop_assert_eq!(a.cx, (j as f64 + 0.5) * stride as f64);
                prop_assert_eq!(a.cy, (i as f64 + 0.5) * stride as f64);
            }
        }

        #[test]
        fn encode_decode_round_trip(x0 in 0.0f64..150.0, y0 in 0.0f64..110.0, bw in 1.0f64..100.0, bh in 1.0f64..100.0, k in 0usize..240) {
            let set = anchor_grid(&AnchorConfig::default());
            let a = set.anchors[k];
            let b = [x0, y0, (x0 + bw).min(160.0), (y0 + bh).min(120.0)];
            prop_assume!(b[2] > b[0] && b[3] > b[1]);
            let back = decode_box(&a, &encode_box(&a, &b, set.variances), set.variances);
            for i in 0..4 {
                prop_assert!((back[i] - b[i]).abs() <= 1e-5);
            }
        }
    }
}
