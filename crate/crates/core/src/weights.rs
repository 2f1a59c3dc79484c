//! Named-matrix weight files.
//!
//! Layout: an ASCII header followed by raw data.
//!
//! ```text
//! TPLW 1
//! <name> <rows> <cols>
//! ...
//! end
//! <f64 little-endian values, each matrix row-major, in header order>
//! ```

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{io_err, Error, Result};

const MAGIC: &str = "TPLW 1";

pub fn encode(entries: &[(String, DMatrix<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}").unwrap();
    for (name, m) in entries {
        writeln!(out, "{} {} {}", name, m.nrows(), m.ncols()).unwrap();
    }
    writeln!(out, "end").unwrap();
    for (_, m) in entries {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, DMatrix<f64>)>> {
    let bad = |m: &str| Error::WeightFormat(m.to_string());
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[pos..];
        let nl = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("unterminated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8"))?.to_string();
        pos += nl + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        return Err(bad("missing TPLW 1 magic"));
    }
    let mut shapes = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(bad(&format!("bad header line {line:?}")));
        };
        let rows: usize = rows.parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = cols.parse().map_err(|_| bad("bad column count"))?;
        shapes.push((name.to_string(), rows, cols));
    }
    let mut data = &bytes[pos..];
    let mut out = Vec::with_capacity(shapes.len());
    for (name, rows, cols) in shapes {
        let n = rows * cols * 8;
        if data.len() < n {
            return Err(bad(&format!("truncated data for {name}")));
        }
        let vals: Vec<f64> = data[..n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, DMatrix::from_row_slice(rows, cols, &vals)));
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after data"));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, DMatrix<f64>)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Vec<(String, DMatrix<f64>)>> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

/// Looks up `name` and checks its shape.
pub fn take(entries: &[(String, DMatrix<f64>)], name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let m = entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m.clone())
        .ok_or_else(|| Error::WeightFormat(format!("missing matrix {name}")))?;
    if m.shape() != (rows, cols) {
        return Err(Error::WeightFormat(format!("{name} has shape {:?}, expected ({rows}, {cols})", m.shape())));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -6.5]);
        let b = DMatrix::from_row_slice(1, 1, &[0.25]);
        let bytes = encode(&[("a".into(), a.clone()), ("b.x".into(), b.clone())]);
        let header = b"TPLW 1\na 2 3\nb.x 1 1\nend\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 8], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), header.len() + 7 * 8);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
        assert!(take(&back, "a", 3, 2).is_err());
        assert!(take(&back, "zz", 1, 1).is_err());
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode(&[("a".into(), DMatrix::zeros(2, 2))]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"XXXX\nend\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
