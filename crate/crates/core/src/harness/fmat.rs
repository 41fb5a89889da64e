//! FMAT: a minimal little-endian matrix container.
//!
//! ```text
//! 0..4    b"FMAT"
//! 4..8    version (u32 LE) = 1
//! 8..12   rows (u32 LE)
//! 12..16  cols (u32 LE)
//! 16..    rows*cols f64 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_fmat(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::arg("row count exceeds u32"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::arg("column count exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_fmat(bytes: &[u8]) -> Result<Matrix> {
    let format = |offset: usize, message: String| Error::Format { offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(format(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format(8, format!("dimensions {rows}x{cols} overflow")))?;
    let expected = HEADER_LEN
        .checked_add(payload)
        .ok_or_else(|| format(8, format!("dimensions {rows}x{cols} overflow")))?;
    if bytes.len() < expected {
        return Err(format(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes for {rows}x{cols}"),
        ));
    }
    if bytes.len() > expected {
        return Err(format(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_fmat(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode_fmat(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fmat(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmat(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_matrix_is_header_only() {
        let bytes = encode_fmat(&Matrix::zeros(0, 0)).unwrap();
        assert_eq!(bytes, b"FMAT\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00");
        assert_eq!(decode_fmat(&bytes).unwrap(), Matrix::zeros(0, 0));
    }

    #[test]
    fn two_by_three_exact_bytes() {
        let m = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 1e-3]]);
        let mut expected: Vec<u8> = b"FMAT".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        // IEEE-754 bit patterns written out by hand
        for bits in [
            0x3FF0_0000_0000_0000u64, // 1.0
            0xC000_0000_0000_0000,    // -2.0
            0x3FE0_0000_0000_0000,    // 0.5
            0x0000_0000_0000_0000,    // 0.0
            0x4008_0000_0000_0000,    // 3.0
            0x3F50_624D_D2F1_A9FC,    // 1e-3
        ] {
            expected.extend_from_slice(&bits.to_le_bytes());
        }
        assert_eq!(encode_fmat(&m).unwrap(), expected);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let good = encode_fmat(&Matrix::filled(2, 2, 1.0)).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_fmat(&bad_magic), Err(Error::Format { offset: 0, .. })));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_fmat(&bad_version), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_fmat(&good[..10]), Err(Error::Format { offset: 10, .. })));
        assert!(matches!(decode_fmat(&good[..40]), Err(Error::Format { offset: 40, .. })));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_fmat(&trailing), Err(Error::Format { offset: 48, .. })));
        let mut huge = good[..16].to_vec();
        huge[8..16].copy_from_slice(&[0xff; 8]);
        assert!(matches!(decode_fmat(&huge), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = crate::numerics::RngState::new(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| f64::from_bits(rng.next_u64()));
            let back = decode_fmat(&encode_fmat(&m).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
