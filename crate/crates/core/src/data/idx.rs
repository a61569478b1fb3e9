//! Reader for the big-endian IDX format used by MNIST.

use std::path::Path;

use crate::error::{QkanError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Rows of `rows * cols` pixels, normalized to mean 0.5 and std 0.5 on
    /// the `[0, 1]` scale, i.e. `(p / 255 - 0.5) / 0.5`.
    Images { rows: usize, cols: usize, pixels: Vec<Vec<f64>> },
    Labels(Vec<u8>),
}

impl IdxData {
    pub fn len(&self) -> usize {
        match self {
            IdxData::Images { pixels, .. } => pixels.len(),
            IdxData::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    let bytes = std::fs::read(path).map_err(|e| QkanError::io(path, e))?;
    parse_idx(&bytes, path)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| QkanError::Parse {
            path: path.to_path_buf(),
            message: format!("truncated header at byte offset {offset}"),
        })
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxData> {
    let magic = be_u32(bytes, 0, path)?;
    let dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(QkanError::Parse {
                path: path.to_path_buf(),
                message: format!("bad magic 0x{other:08x} at byte offset 0"),
            })
        }
    };
    let mut shape = Vec::with_capacity(dims);
    for i in 0..dims {
        shape.push(be_u32(bytes, 4 + 4 * i, path)? as usize);
    }
    let body = 4 + 4 * dims;
    let need = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let available = bytes.len() - body;
    match need {
        Some(n) if n <= available => {}
        _ => {
            return Err(QkanError::Parse {
                path: path.to_path_buf(),
                message: format!(
                    "truncated body at byte offset {}: header declares {:?}",
                    bytes.len(),
                    shape
                ),
            })
        }
    }
    let data = &bytes[body..];
    if dims == 1 {
        return Ok(IdxData::Labels(data[..shape[0]].to_vec()));
    }
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    let size = rows * cols;
    let pixels = (0..n)
        .map(|i| {
            data[i * size..(i + 1) * size]
                .iter()
                .map(|&p| (p as f64 / 255.0 - 0.5) / 0.5)
                .collect()
        })
        .collect();
    Ok(IdxData::Images { rows, cols, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn empty_image_file() {
        let bytes = header(0x803, &[0, 28, 28]);
        let d = parse_idx(&bytes, Path::new("e")).unwrap();
        assert!(d.is_empty());
        assert!(matches!(d, IdxData::Images { rows: 28, cols: 28, .. }));
    }

    #[test]
    fn magic_accept_and_reject() {
        assert!(parse_idx(&header(0x0000_0803, &[0, 1, 1]), Path::new("a")).is_ok());
        let err = parse_idx(&header(0x0000_0804, &[0, 1, 1]), Path::new("b")).unwrap_err();
        assert!(err.to_string().contains("bad magic 0x00000804"), "{err}");
    }

    #[test]
    fn pixel_normalization() {
        let mut bytes = header(0x803, &[1, 1, 3]);
        bytes.extend_from_slice(&[0, 255, 51]);
        match parse_idx(&bytes, Path::new("p")).unwrap() {
            IdxData::Images { pixels, .. } => {
                assert_eq!(pixels[0][0], -1.0);
                assert_eq!(pixels[0][1], 1.0);
                assert!((pixels[0][2] - (0.2 - 0.5) / 0.5).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels() {
        let mut bytes = header(0x801, &[3]);
        bytes.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx(&bytes, Path::new("l")).unwrap(), IdxData::Labels(vec![7, 0, 9]));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = header(0x803, &[2, 2, 2]);
        bytes.extend_from_slice(&[1, 2, 3]);
        let err = parse_idx(&bytes, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("byte offset 19"), "{err}");
        let err = parse_idx(&[0, 0, 8], Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("byte offset 0"));
        let err = parse_idx(&header(0x803, &[1, 2]), Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("byte offset 12"));
    }
}
