//! Baseline JPEG plumbing: Q-matrices, coefficient planes, bitstream
//! parsing/encoding and the 8×8 block transforms.
//!
//! Coefficients are always kept *quantized*; nothing in this module
//! dequantizes on the parse path.

mod dct;
mod decoder;
mod encoder;
mod huffman;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dct::{forward_block, inverse_block};
pub use decoder::{parse_jpeg, DecodedJpeg};
pub use encoder::{encode_jpeg, encode_jpeg_with_options, EncodeOptions};
pub use huffman::{HuffmanClass, HuffmanTable};

/// Natural (raster) index of the i-th coefficient in zig-zag scan order.
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// An 8×8 table of quantization step sizes, stored in raster order
/// (row = vertical frequency `k1`, column = horizontal frequency `k2`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<u16>", into = "Vec<u16>")]
pub struct QuantMatrix {
    steps: [u16; 64],
}

impl QuantMatrix {
    pub fn new(steps: [u16; 64]) -> Result<Self> {
        if let Some((i, &s)) = steps.iter().enumerate().find(|(_, &s)| !(1..=255).contains(&s)) {
            return Err(Error::domain(format!(
                "q-factor {s} at raster index {i} outside [1, 255]"
            )));
        }
        Ok(Self { steps })
    }

    pub fn from_rows(rows: [[u16; 8]; 8]) -> Result<Self> {
        let mut steps = [0u16; 64];
        for (r, row) in rows.iter().enumerate() {
            steps[r * 8..r * 8 + 8].copy_from_slice(row);
        }
        Self::new(steps)
    }

    /// Every entry equal to `step`.
    pub fn uniform(step: u16) -> Result<Self> {
        Self::new([step; 64])
    }

    pub fn steps(&self) -> &[u16; 64] {
        &self.steps
    }

    /// Step at 0-based row/column.
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.steps[row * 8 + col]
    }

    /// Step at 1-based scalar frequency `k` in raster order.
    pub fn at_freq(&self, k: usize) -> Result<u16> {
        let (k1, k2) = freq_1d_to_2d(k)?;
        Ok(self.get(k1 - 1, k2 - 1))
    }

    /// Entries in zig-zag scan order, as stored in a DQT segment.
    pub fn zigzag(&self) -> [u16; 64] {
        std::array::from_fn(|i| self.steps[ZIGZAG[i]])
    }

    pub fn from_zigzag(zz: &[u16; 64]) -> Result<Self> {
        let mut steps = [0u16; 64];
        for (i, &v) in zz.iter().enumerate() {
            steps[ZIGZAG[i]] = v;
        }
        Self::new(steps)
    }
}

impl TryFrom<Vec<u16>> for QuantMatrix {
    type Error = Error;

    fn try_from(v: Vec<u16>) -> Result<Self> {
        let steps: [u16; 64] = v
            .try_into()
            .map_err(|v: Vec<u16>| Error::domain(format!("expected 64 q-factors, got {}", v.len())))?;
        Self::new(steps)
    }
}

impl From<QuantMatrix> for Vec<u16> {
    fn from(q: QuantMatrix) -> Self {
        q.steps.to_vec()
    }
}

impl std::fmt::Display for QuantMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for row in self.steps.chunks(8) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:>3}")).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn scale_table(base: &[u16; 64], quality: u32) -> Result<QuantMatrix> {
    if !(1..=100).contains(&quality) {
        return Err(Error::domain(format!("quality {quality} outside [1, 100]")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let steps = base.map(|b| ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as u16);
    QuantMatrix::new(steps)
}

/// Annex-K luminance table scaled to `quality` with the conventional
/// linear rule (quality 50 is the base table, 100 is all ones).
pub fn standard_qmatrix(quality: u32) -> Result<QuantMatrix> {
    scale_table(&BASE_LUMA, quality)
}

/// Chrominance counterpart of [`standard_qmatrix`].
pub fn standard_chroma_qmatrix(quality: u32) -> Result<QuantMatrix> {
    scale_table(&BASE_CHROMA, quality)
}

/// Raster scalar index `k = (k1 - 1)·8 + k2` of a 1-based frequency pair.
pub fn freq_2d_to_1d(k1: usize, k2: usize) -> Result<usize> {
    if !(1..=8).contains(&k1) || !(1..=8).contains(&k2) {
        return Err(Error::domain(format!("frequency ({k1}, {k2}) outside [1, 8]²")));
    }
    Ok((k1 - 1) * 8 + k2)
}

/// Inverse of [`freq_2d_to_1d`].
pub fn freq_1d_to_2d(k: usize) -> Result<(usize, usize)> {
    if !(1..=64).contains(&k) {
        return Err(Error::domain(format!("frequency index {k} outside [1, 64]")));
    }
    Ok(if k.is_multiple_of(8) { (k / 8, 8) } else { (k / 8 + 1, k % 8) })
}

/// One 8×8 block of quantized coefficients in raster order.
pub type Block = [i32; 64];

/// Quantized coefficients of one component, block-raster order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CoeffPlane {
    pub component_id: u8,
    pub width_blocks: usize,
    pub height_blocks: usize,
    pub blocks: Vec<Block>,
}

impl CoeffPlane {
    pub fn new(component_id: u8, width_blocks: usize, height_blocks: usize, blocks: Vec<Block>) -> Result<Self> {
        if blocks.len() != width_blocks * height_blocks {
            return Err(Error::Dimension(format!(
                "{} blocks for a {width_blocks}x{height_blocks} grid",
                blocks.len()
            )));
        }
        if let Some(v) = blocks.iter().flatten().find(|v| i16::try_from(**v).is_err()) {
            return Err(Error::domain(format!("coefficient {v} outside signed 16-bit range")));
        }
        Ok(Self {
            component_id,
            width_blocks,
            height_blocks,
            blocks,
        })
    }

    pub fn zeros(component_id: u8, width_blocks: usize, height_blocks: usize) -> Self {
        Self {
            component_id,
            width_blocks,
            height_blocks,
            blocks: vec![[0; 64]; width_blocks * height_blocks],
        }
    }

    pub fn block(&self, bx: usize, by: usize) -> &Block {
        &self.blocks[by * self.width_blocks + bx]
    }

    /// Top-left `w × h` block sub-grid.
    pub fn sub_grid(&self, width_blocks: usize, height_blocks: usize) -> Result<CoeffPlane> {
        if width_blocks > self.width_blocks || height_blocks > self.height_blocks {
            return Err(Error::Dimension(format!(
                "sub-grid {width_blocks}x{height_blocks} larger than plane {}x{}",
                self.width_blocks, self.height_blocks
            )));
        }
        let blocks = (0..height_blocks)
            .flat_map(|by| (0..width_blocks).map(move |bx| (bx, by)))
            .map(|(bx, by)| *self.block(bx, by))
            .collect();
        Ok(CoeffPlane {
            component_id: self.component_id,
            width_blocks,
            height_blocks,
            blocks,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ComponentInfo {
    pub id: u8,
    pub h_sampling: u8,
    pub v_sampling: u8,
    pub quant_table: u8,
}

/// Frame header contents relevant to the coefficient planes.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct FrameInfo {
    pub width: u16,
    pub height: u16,
    pub components: Vec<ComponentInfo>,
}

impl FrameInfo {
    /// Single-component frame using quantization table 0.
    pub fn grayscale(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            components: vec![ComponentInfo {
                id: 1,
                h_sampling: 1,
                v_sampling: 1,
                quant_table: 0,
            }],
        }
    }

    /// Three-component 4:4:4 frame; luma uses table 0, both chroma planes table 1.
    pub fn ycbcr444(width: u16, height: u16) -> Self {
        let comp = |id, quant_table| ComponentInfo {
            id,
            h_sampling: 1,
            v_sampling: 1,
            quant_table,
        };
        Self {
            width,
            height,
            components: vec![comp(1, 0), comp(2, 1), comp(3, 1)],
        }
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn width_blocks(&self) -> usize {
        usize::from(self.width).div_ceil(8)
    }

    pub fn height_blocks(&self) -> usize {
        usize::from(self.height).div_ceil(8)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Dimension("zero frame dimension".into()));
        }
        match self.components.len() {
            1 => Ok(()),
            3 => {
                if self.components.iter().all(|c| c.h_sampling == 1 && c.v_sampling == 1) {
                    Ok(())
                } else {
                    Err(Error::UnsupportedMarker {
                        marker: 0xC0,
                        reason: "chroma subsampling is not supported (4:4:4 only)".into(),
                    })
                }
            }
            n => Err(Error::UnsupportedMarker {
                marker: 0xC0,
                reason: format!("{n} components (expected 1 or 3)"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freq_index_examples() {
        assert_eq!(freq_2d_to_1d(1, 1).unwrap(), 1);
        assert_eq!(freq_2d_to_1d(8, 8).unwrap(), 64);
        assert_eq!(freq_2d_to_1d(2, 3).unwrap(), 11);
        assert_eq!(freq_1d_to_2d(16).unwrap(), (2, 8));
        assert!(freq_2d_to_1d(0, 3).is_err());
        assert!(freq_2d_to_1d(3, 9).is_err());
        assert!(freq_1d_to_2d(0).is_err());
        assert!(freq_1d_to_2d(65).is_err());
    }

    #[test]
    fn freq_maps_are_inverse() {
        for k1 in 1..=8 {
            for k2 in 1..=8 {
                let k = freq_2d_to_1d(k1, k2).unwrap();
                assert_eq!(freq_1d_to_2d(k).unwrap(), (k1, k2));
            }
        }
        for k in 1..=64 {
            let (k1, k2) = freq_1d_to_2d(k).unwrap();
            assert_eq!(freq_2d_to_1d(k1, k2).unwrap(), k);
        }
    }

    #[test]
    fn standard_tables() {
        let q50 = standard_qmatrix(50).unwrap();
        assert_eq!(q50.steps(), &BASE_LUMA);
        assert_eq!(q50.get(0, 0), 16);
        assert_eq!(standard_qmatrix(100).unwrap(), QuantMatrix::uniform(1).unwrap());
        assert!(standard_qmatrix(0).is_err());
        assert!(standard_qmatrix(101).is_err());
        // libjpeg's quality 75 luminance table starts 8 6 5 8 12 20 26 31
        assert_eq!(&standard_qmatrix(75).unwrap().steps()[..8], &[8, 6, 5, 8, 12, 20, 26, 31]);
        // quality 10 saturates at 255 in the high frequencies
        assert_eq!(standard_qmatrix(10).unwrap().get(7, 7), 255);
    }

    #[test]
    fn zigzag_is_a_permutation() {
        let mut seen = [false; 64];
        for &z in &ZIGZAG {
            assert!(!seen[z]);
            seen[z] = true;
        }
        // every step of the scan moves to an adjacent anti-diagonal or stays on it
        for w in ZIGZAG.windows(2) {
            let d = |i: usize| i / 8 + i % 8;
            assert!(d(w[1]) == d(w[0]) || d(w[1]) == d(w[0]) + 1);
        }
    }

    #[test]
    fn quant_matrix_rejects_out_of_range() {
        assert!(QuantMatrix::uniform(0).is_err());
        assert!(QuantMatrix::uniform(256).is_err());
        let q = standard_qmatrix(80).unwrap();
        assert_eq!(QuantMatrix::from_zigzag(&q.zigzag()).unwrap(), q);
        assert_eq!(q.at_freq(11).unwrap(), q.get(1, 2));
    }

    #[test]
    fn quant_matrix_json_roundtrip() {
        let q = standard_qmatrix(90).unwrap();
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(serde_json::from_str::<QuantMatrix>(&s).unwrap(), q);
        assert!(serde_json::from_str::<QuantMatrix>("[1,2,3]").is_err());
    }

    #[test]
    fn plane_invariants() {
        assert!(CoeffPlane::new(1, 2, 2, vec![[0; 64]; 3]).is_err());
        let mut b = [0; 64];
        b[5] = 40_000;
        assert!(CoeffPlane::new(1, 1, 1, vec![b]).is_err());
        let mut p = CoeffPlane::zeros(1, 4, 4);
        p.blocks[5][0] = 9;
        let s = p.sub_grid(2, 2).unwrap();
        assert_eq!(s.blocks.len(), 4);
        assert_eq!(s.block(1, 1)[0], 9);
        assert!(p.sub_grid(5, 1).is_err());
    }
}
