//! Minimal NPY (format version 1.0) reader/writer for little-endian `f32`
//! C-order arrays. Depth and alpha maps are exchanged in this format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn encode_f32(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Validation(format!("shape {shape:?} holds {expected} values, got {}", data.len())));
    }
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!("({})", shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")),
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    // magic(6) + version(2) + header_len(2) + dict + '\n' is padded to 64 bytes.
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("not an npy file".into()));
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        v => return Err(Error::Format(format!("unsupported npy version {v}"))),
    };
    let header = bytes
        .get(offset..offset + header_len)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| Error::Format("truncated npy header".into()))?;
    if !header.contains("'descr': '<f4'") {
        return Err(Error::Format(format!("expected little-endian f32, header {header:?}")));
    }
    if header.contains("'fortran_order': True") {
        return Err(Error::Format("fortran-order arrays are not supported".into()));
    }
    let start = header
        .find("'shape': (")
        .ok_or_else(|| Error::Format("npy header has no shape".into()))?
        + "'shape': (".len();
    let end = header[start..]
        .find(')')
        .ok_or_else(|| Error::Format("unterminated shape".into()))?;
    let shape = header[start..start + end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    let body = &bytes[offset + header_len..];
    if body.len() != 4 * count {
        return Err(Error::Format(format!("npy body holds {} bytes, expected {}", body.len(), 4 * count)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

pub fn write_f32(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_f32(shape, data)?).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    decode_f32(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_aligned_and_round_trips() {
        let data = [1.0f32, -2.5, f32::INFINITY, 0.0, 3.0, 4.0];
        let bytes = encode_f32(&[2, 3], &data).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
        let (shape, back) = decode_f32(&bytes).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_shape_mismatch() {
        assert!(encode_f32(&[2, 2], &[1.0]).is_err());
    }
}
