//! `MIFT` tensor files.
//!
//! Layout: the 4 magic bytes `MIFT`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{"dtype":"f32","shape":[..],"layout":"row-major","endian":"little"}`,
//! then `product(shape)` little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MIFT";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    layout: String,
    endian: String,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            s => return Err(Error::ShapeMismatch(format!("expected a 2-d tensor, got shape {s:?}"))),
        };
        Ok(Array2::from_shape_vec((r, c), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("shape checked"))
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteData(what.to_string()))
        }
    }
}

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        shape: t.shape.clone(),
        layout: "row-major".into(),
        endian: "little".into(),
    })?;
    let io = |e| Error::io("<tensor stream>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    let mut payload = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload).map_err(io)?;
    Ok(())
}

/// Reads one tensor; the stream must contain exactly the declared payload
/// after the header when `exact` is set.
pub fn read_tensor_from<R: Read>(r: &mut R, exact: bool) -> Result<Tensor> {
    let fmt = |m: &str| Error::Format(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| fmt("truncated header length"))?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(fmt("header too large"));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|_| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.dtype != "f32" || header.layout != "row-major" || header.endian != "little" {
        return Err(Error::Format(format!(
            "unsupported encoding {}/{}/{}",
            header.dtype, header.layout, header.endian
        )));
    }
    let n: usize = header.shape.iter().product();
    let expected = n * 4;
    let mut payload = vec![0u8; expected];
    let got = read_up_to(r, &mut payload)?;
    if got != expected {
        return Err(Error::Format(format!("payload is {got} bytes, header declares {expected}")));
    }
    if exact {
        let mut extra = [0u8; 1];
        if read_up_to(r, &mut extra)? != 0 {
            return Err(Error::Format(format!("payload exceeds the declared {expected} bytes")));
        }
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor {
        shape: header.shape,
        data,
    })
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<tensor stream>", e)),
        }
    }
    Ok(filled)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor_to(&mut w, t)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut BufReader::new(f), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &Tensor) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, t).unwrap();
        buf
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let header = br#"{"dtype":"f32","shape":[3,2],"layout":"row-major","endian":"little"}"#;
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header);
        buf.extend_from_slice(&[0u8; 20]);
        assert!(matches!(read_tensor_from(&mut buf.as_slice(), true), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic() {
        let mut buf = encode(&Tensor::new(vec![1], vec![1.0]).unwrap());
        buf[0] = b'X';
        assert!(matches!(read_tensor_from(&mut buf.as_slice(), true), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(rows in 0usize..6, cols in 1usize..5, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let bytes = encode(&t);
            let back = read_tensor_from(&mut bytes.as_slice(), true).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back, t);
        }
    }
}
