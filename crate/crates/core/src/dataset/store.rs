//! On-disk patch storage: packed coefficient files or baseline JPEG files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jpeg::{encode_jpeg, parse_jpeg, CoeffPlane, FrameInfo, QuantMatrix};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageFormat {
    /// `DJPG` packed int16 coefficients.
    #[default]
    Packed,
    /// Grayscale baseline JPEG.
    Jpeg,
}

impl StorageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            StorageFormat::Packed => "djpg",
            StorageFormat::Jpeg => "jpg",
        }
    }
}

impl std::str::FromStr for StorageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "packed" => Ok(StorageFormat::Packed),
            "jpeg" => Ok(StorageFormat::Jpeg),
            _ => Err(Error::Config(format!("storage must be packed or jpeg, got {s:?}"))),
        }
    }
}

const PACKED_MAGIC: &[u8; 4] = b"DJPG";
const PACKED_VERSION: u32 = 1;
const PACKED_HEADER: usize = 16 + 64;

/// Magic, version, block grid size, Q-matrix (u8, raster) and the
/// coefficients as little-endian int16, block by block.
pub fn write_packed(plane: &CoeffPlane, q: &QuantMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(PACKED_HEADER + plane.blocks.len() * 128);
    out.extend_from_slice(PACKED_MAGIC);
    out.extend_from_slice(&PACKED_VERSION.to_le_bytes());
    out.extend_from_slice(&(plane.width_blocks as u32).to_le_bytes());
    out.extend_from_slice(&(plane.height_blocks as u32).to_le_bytes());
    out.extend(q.steps().iter().map(|&s| s as u8));
    for (bi, block) in plane.blocks.iter().enumerate() {
        for (index, &v) in block.iter().enumerate() {
            let v = i16::try_from(v).map_err(|_| Error::CoefficientOutOfRange { block: bi, index, value: v })?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_packed(data: &[u8]) -> Result<(CoeffPlane, QuantMatrix)> {
    if data.len() < PACKED_HEADER || &data[..4] != PACKED_MAGIC {
        return Err(Error::Format("not a DJPG packed patch".into()));
    }
    let word = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap());
    if word(4) != PACKED_VERSION {
        return Err(Error::Format(format!("unsupported packed version {}", word(4))));
    }
    let (wb, hb) = (word(8) as usize, word(12) as usize);
    let steps: [u16; 64] = std::array::from_fn(|k| u16::from(data[16 + k]));
    let q = QuantMatrix::new(steps)?;
    let body = &data[PACKED_HEADER..];
    if body.len() != wb * hb * 128 {
        return Err(Error::Format(format!(
            "{} coefficient bytes for a {wb}x{hb} grid",
            body.len()
        )));
    }
    let blocks = body
        .chunks_exact(128)
        .map(|c| std::array::from_fn(|k| i32::from(i16::from_le_bytes([c[2 * k], c[2 * k + 1]]))))
        .collect();
    Ok((CoeffPlane::new(1, wb, hb, blocks)?, q))
}

pub(crate) fn save_patch(path: &Path, plane: &CoeffPlane, q: &QuantMatrix, format: StorageFormat) -> Result<()> {
    let bytes = match format {
        StorageFormat::Packed => write_packed(plane, q)?,
        StorageFormat::Jpeg => {
            let frame = FrameInfo::grayscale((plane.width_blocks * 8) as u16, (plane.height_blocks * 8) as u16);
            encode_jpeg(std::slice::from_ref(plane), std::slice::from_ref(q), &frame)?
        }
    };
    std::fs::write(path, bytes).map_err(Error::at_path(path))
}

pub(crate) fn load_patch(path: &Path, format: StorageFormat) -> Result<(CoeffPlane, QuantMatrix)> {
    let data = std::fs::read(path).map_err(Error::at_path(path))?;
    match format {
        StorageFormat::Packed => read_packed(&data),
        StorageFormat::Jpeg => {
            let dec = parse_jpeg(&data)?;
            let (plane, q) = dec.luma();
            Ok((plane.clone(), *q))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_roundtrip() {
        let blocks = (0..6).map(|i| std::array::from_fn(|k| (k as i32 - 30) * (i + 1) * 37)).collect();
        let plane = CoeffPlane::new(1, 3, 2, blocks).unwrap();
        let q = QuantMatrix::from_zigzag(&std::array::from_fn(|k| k as u16 + 1)).unwrap();
        let bytes = write_packed(&plane, &q).unwrap();
        assert_eq!(&bytes[..4], b"DJPG");
        assert_eq!(read_packed(&bytes).unwrap(), (plane, q));
        assert!(read_packed(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_packed(b"JUNK").is_err());
    }
}
