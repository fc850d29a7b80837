//! Matrix file formats: the `IPCA1` binary container and plain CSV.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       5     magic  b"IPCA1"
//! 5       1     dtype  1 = f64
//! 6       1     order  0 = row-major
//! 7       8     rows   u64
//! 15      8     cols   u64
//! 23      8*n   payload, rows*cols f64 in row-major order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"IPCA1";
pub const DTYPE_F64: u8 = 1;
pub const ORDER_ROW_MAJOR: u8 = 0;
pub const HEADER_LEN: usize = 23;

pub fn encode_container(m: &DMatrix<f64>) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F64);
    out.push(ORDER_ROW_MAJOR);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Parse("container shorter than its header".into()));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::Parse("bad container magic".into()));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(Error::Parse(format!("unsupported dtype tag {}", bytes[5])));
    }
    if bytes[6] != ORDER_ROW_MAJOR {
        return Err(Error::Parse(format!("unsupported order tag {}", bytes[6])));
    }
    let rows = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[15..23].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Parse("container dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Parse(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (k, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        m[(k / cols.max(1), k % cols.max(1))] = v;
    }
    Ok(m)
}

pub fn write_container(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_container(m))?;
    w.flush()?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

/// Reads a headerless numeric CSV. Rows must all have the same width.
pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse("ragged CSV rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Writes a CSV with a header row. Floats use the shortest round-trip form.
pub fn write_csv_matrix(path: impl AsRef<Path>, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if !header.is_empty() && header.len() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} header names for {} columns",
            header.len(),
            m.ncols()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if !header.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a matrix by extension: `.csv` as headerless CSV, anything else as a container.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv_matrix(path),
        _ => read_container(path),
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = encode_container(&m);
        assert_eq!(&b[..5], b"IPCA1");
        assert_eq!(b[5], 1);
        assert_eq!(b[6], 0);
        assert_eq!(u64::from_le_bytes(b[7..15].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[15..23].try_into().unwrap()), 3);
        // row-major: second value is m[(0,1)]
        assert_eq!(f64::from_le_bytes(b[31..39].try_into().unwrap()), 2.0);
        assert_eq!(b.len(), 23 + 48);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = DMatrix::<f64>::zeros(3, 3);
        let mut b = encode_container(&m);
        b.pop();
        assert!(matches!(decode_container(&b), Err(Error::Parse(_))));
        let mut bad = encode_container(&m);
        bad[0] = b'X';
        assert!(decode_container(&bad).is_err());
    }

    #[test]
    fn empty_matrix() {
        let m = DMatrix::<f64>::zeros(0, 4);
        assert_eq!(decode_container(&encode_container(&m)).unwrap().shape(), (0, 4));
    }

    #[test]
    fn csv_text_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-300, 7.0]);
        write_csv_matrix(&p, &[], &m).unwrap();
        assert_eq!(read_csv_matrix(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn container_round_trip_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let m = DMatrix::from_fn(rows, cols, |i, j| {
                f64::from_bits(seed.wrapping_mul(31 + i as u64).wrapping_add(j as u64) >> 2)
            });
            let back = decode_container(&encode_container(&m)).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
