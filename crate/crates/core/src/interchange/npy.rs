//! Reader and writer for the NPY v1.0 tensor layout.
//!
//! Only little-endian `f4`/`f8` payloads in C order are accepted. The header
//! is padded with spaces so that the payload starts on a 64-byte boundary,
//! matching what numpy itself writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{FmapError, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A dense row-major tensor. Values are held as `f64`; `f32` payloads widen
/// exactly, so a load/save cycle of an `f32` file is bit-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: Dtype,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: Dtype) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FmapError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, dtype })
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

fn header_text(dtype: Dtype, shape: &[usize]) -> String {
    let dims = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        dims
    );
    // magic(6) + version(2) + length(2) + header + '\n'
    let unpadded = 10 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    header
}

/// Serialize a tensor into NPY bytes.
pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let header = header_text(tensor.dtype, &tensor.shape);
    let header_len = u16::try_from(header.len())
        .map_err(|_| FmapError::Format("npy header longer than 65535 bytes".into()))?;
    let mut out = Vec::with_capacity(10 + header.len() + tensor.data.len() * tensor.dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match tensor.dtype {
        Dtype::F32 => {
            for &v in &tensor.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}'");
    let start = header
        .find(&needle)
        .ok_or_else(|| FmapError::Format(format!("npy header lacks key {key}")))?;
    let rest = header[start + needle.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| FmapError::Format(format!("npy header: missing ':' after {key}")))?
        .trim_start();
    Ok(rest)
}

fn parse_header(header: &str) -> Result<(Dtype, Vec<usize>)> {
    let descr = dict_value(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| FmapError::Format("npy header: malformed descr".into()))?;
    let dtype = match descr {
        "<f4" => Dtype::F32,
        "<f8" => Dtype::F64,
        other => {
            return Err(FmapError::Format(format!(
                "unsupported npy dtype {other:?} (expected <f4 or <f8)"
            )))
        }
    };

    let order = dict_value(header, "fortran_order")?;
    if order.starts_with("True") {
        return Err(FmapError::Format("fortran-ordered npy arrays are not supported".into()));
    } else if !order.starts_with("False") {
        return Err(FmapError::Format("npy header: malformed fortran_order".into()));
    }

    let shape = dict_value(header, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| FmapError::Format("npy header: malformed shape".into()))?;
    let dims = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| FmapError::Format(format!("npy header: bad dimension {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, dims))
}

/// Parse NPY bytes.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(FmapError::Format("missing npy magic".into()));
    }
    let (major, _minor) = (bytes[6], bytes[7]);
    let (header_start, header_len) = match major {
        1 => (10, u16::from_le_bytes([bytes[8], bytes[9]]) as usize),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(FmapError::Format("truncated npy header".into()));
            }
            (
                12,
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            )
        }
        v => return Err(FmapError::Format(format!("unsupported npy version {v}"))),
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(FmapError::Format("truncated npy header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| FmapError::Format("npy header is not valid text".into()))?;
    let (dtype, shape) = parse_header(header)?;

    let count: usize = shape.iter().product();
    let payload = &bytes[payload_start..];
    if payload.len() != count * dtype.size() {
        return Err(FmapError::Format(format!(
            "npy payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            count * dtype.size()
        )));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Tensor::new(shape, data, dtype)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FmapError::io(path, e))?;
    decode(&bytes)
}

/// Write via a temporary sibling and rename, so readers never observe a
/// partially written file.
pub fn write(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| FmapError::Argument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(FmapError::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_64_byte_aligned() {
        let t = Tensor::new(vec![2, 2, 3], vec![0.0; 12], Dtype::F32).unwrap();
        let bytes = encode(&t).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes.len(), 10 + header_len + 48);
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        assert!(header.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2, 3), }"));
        assert!(header.ends_with('\n'));
    }

    #[test]
    fn one_dimensional_shape_has_trailing_comma() {
        let t = Tensor::new(vec![5], vec![1.0; 5], Dtype::F64).unwrap();
        let bytes = encode(&t).unwrap();
        let text = String::from_utf8_lossy(&bytes[10..]);
        assert!(text.contains("'shape': (5,)"));
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn decodes_numpy_written_header() {
        // Header as emitted by numpy 1.x for np.zeros((2,3), '<f4').
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        let mut header = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }".to_string();
        while !(10 + header.len() + 1).is_multiple_of(64) {
            header.push(' ');
        }
        header.push('\n');
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for i in 0..6 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape, vec![2, 3]);
        assert_eq!(t.data, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(decode(b"NOTNPY0000"), Err(FmapError::Format(_))));
        let t = Tensor::new(vec![2], vec![1.0, 2.0], Dtype::F32).unwrap();
        let mut bytes = encode(&t).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(FmapError::Format(_))));

        let good = encode(&t).unwrap();
        let mut swapped = good.clone();
        let pos = swapped.windows(3).position(|w| w == b"<f4").unwrap();
        swapped[pos] = b'>';
        assert!(matches!(decode(&swapped), Err(FmapError::Format(_))));
        let mut fortran = good;
        let pos = fortran.windows(5).position(|w| w == b"False").unwrap();
        fortran[pos..pos + 5].copy_from_slice(b"True ");
        assert!(matches!(decode(&fortran), Err(FmapError::Format(_))));
    }
}
