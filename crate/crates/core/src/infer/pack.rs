//! 2-bit ternary weight packing, four weights per byte, lowest bits first.
//! Codes: `00` = 0, `01` = +1, `11` = -1; `10` is reserved.

use crate::error::{Error, Result};

pub fn pack_ternary(w: &[i32]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; w.len().div_ceil(4)];
    for (i, &v) in w.iter().enumerate() {
        let code = match v {
            0 => 0b00,
            1 => 0b01,
            -1 => 0b11,
            _ => {
                return Err(Error::OutOfRange {
                    value: v as i64,
                    min: -1,
                    max: 1,
                })
            }
        };
        out[i / 4] |= code << (2 * (i % 4));
    }
    Ok(out)
}

pub fn unpack_ternary(bytes: &[u8], n: usize) -> Result<Vec<i32>> {
    if bytes.len() != n.div_ceil(4) {
        return Err(Error::Checkpoint(format!(
            "{} packed bytes cannot hold exactly {n} ternary weights",
            bytes.len()
        )));
    }
    (0..n)
        .map(|i| match (bytes[i / 4] >> (2 * (i % 4))) & 0b11 {
            0b00 => Ok(0),
            0b01 => Ok(1),
            0b11 => Ok(-1),
            _ => Err(Error::Checkpoint(format!("reserved ternary code at weight {i}"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_bytes() {
        assert_eq!(pack_ternary(&[1, -1, 0, 1, -1]).unwrap(), vec![0b01_00_11_01, 0b11]);
        assert!(pack_ternary(&[2]).is_err());
        assert!(unpack_ternary(&[0b10], 1).is_err());
        assert!(unpack_ternary(&[0, 0], 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(w in proptest::collection::vec(-1i32..=1, 0..300)) {
            let p = pack_ternary(&w).unwrap();
            prop_assert_eq!(p.len(), w.len().div_ceil(4));
            prop_assert_eq!(unpack_ternary(&p, w.len()).unwrap(), w);
        }
    }
}
