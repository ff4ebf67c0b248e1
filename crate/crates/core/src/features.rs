//! Per-frequency coefficient histograms and the two-channel HQ input.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jpeg::{CoeffPlane, QuantMatrix, ZIGZAG};

/// Number of AC frequencies.
pub const AC_COUNT: usize = 63;

/// Ordering of the 63 AC frequencies along the sequence axis.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqOrder {
    #[default]
    Raster,
    Zigzag,
}

impl FreqOrder {
    /// Raster index (0..64) of the AC frequency at each sequence position.
    pub fn positions(self) -> [usize; AC_COUNT] {
        match self {
            FreqOrder::Raster => std::array::from_fn(|i| i + 1),
            FreqOrder::Zigzag => std::array::from_fn(|i| ZIGZAG[i + 1]),
        }
    }

    fn flag(self) -> u8 {
        match self {
            FreqOrder::Raster => 0,
            FreqOrder::Zigzag => 1,
        }
    }

    fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(FreqOrder::Raster),
            1 => Ok(FreqOrder::Zigzag),
            _ => Err(Error::Format(format!("unknown order flag {flag}"))),
        }
    }
}

impl std::str::FromStr for FreqOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(FreqOrder::Raster),
            "zigzag" => Ok(FreqOrder::Zigzag),
            _ => Err(Error::Config(format!("order must be raster or zigzag, got {s:?}"))),
        }
    }
}

/// Histograms of the 63 AC frequencies over bins `[-b, b]`, in raster
/// frequency order (k = 2..64).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HistogramSet {
    pub b: usize,
    /// `63 × (2b+1)`, frequency-major.
    pub counts: Vec<u32>,
}

impl HistogramSet {
    pub fn bins(&self) -> usize {
        2 * self.b + 1
    }

    /// Histogram of AC frequency `k` in 1-based raster numbering (2..=64).
    pub fn frequency(&self, k: usize) -> &[u32] {
        assert!((2..=64).contains(&k), "AC frequency {k} outside 2..=64");
        let w = self.bins();
        &self.counts[(k - 2) * w..(k - 1) * w]
    }

    /// Count of value `i` at frequency `k`.
    pub fn count(&self, k: usize, i: i32) -> u32 {
        let b = self.b as i32;
        if i < -b || i > b {
            return 0;
        }
        self.frequency(k)[(i + b) as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Count each AC coefficient value in `[-b, b]`; values outside are dropped.
pub fn extract_histograms(plane: &CoeffPlane, b: usize) -> Result<HistogramSet> {
    if b == 0 {
        return Err(Error::domain("bin range b must be at least 1"));
    }
    let w = 2 * b + 1;
    let bi = b as i32;
    let mut counts = vec![0u32; AC_COUNT * w];
    for block in &plane.blocks {
        for (f, &v) in block.iter().enumerate().skip(1) {
            if (-bi..=bi).contains(&v) {
                counts[(f - 1) * w + (v + bi) as usize] += 1;
            }
        }
    }
    Ok(HistogramSet { b, counts })
}

/// Network input: per frequency and bin, (histogram count, q-factor).
#[derive(Clone, PartialEq, Debug)]
pub struct HqInput {
    pub b: usize,
    pub order: FreqOrder,
    /// `63 × (2b+1) × 2`, channel innermost.
    pub values: Vec<f64>,
}

impl HqInput {
    pub fn bins(&self) -> usize {
        2 * self.b + 1
    }

    pub fn at(&self, position: usize, bin: usize, channel: usize) -> f64 {
        self.values[(position * self.bins() + bin) * 2 + channel]
    }
}

pub fn assemble_hq(h: &HistogramSet, q: &QuantMatrix, order: FreqOrder) -> HqInput {
    let w = h.bins();
    let mut values = Vec::with_capacity(AC_COUNT * w * 2);
    for f in order.positions() {
        let qf = f64::from(q.steps()[f]);
        for &c in &h.counts[(f - 1) * w..f * w] {
            values.push(f64::from(c));
            values.push(qf);
        }
    }
    HqInput { b: h.b, order, values }
}

/// One labeled histogram with the final Q-matrix of its patch.
#[derive(Clone, PartialEq, Debug)]
pub struct FeatureRecord {
    /// 1 for double-compressed, 0 for single.
    pub label: u8,
    pub hist: HistogramSet,
    pub q: QuantMatrix,
}

impl FeatureRecord {
    pub fn hq(&self, order: FreqOrder) -> HqInput {
        assemble_hq(&self.hist, &self.q, order)
    }
}

/// A packed set of feature records sharing `b` and frequency order.
#[derive(Clone, PartialEq, Debug)]
pub struct FeatureSet {
    pub b: usize,
    pub order: FreqOrder,
    pub records: Vec<FeatureRecord>,
}

const FEATURE_MAGIC: &[u8; 4] = b"DJPF";
const FEATURE_VERSION: u32 = 1;

impl FeatureSet {
    /// Serialize with counts laid out in `self.order`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&(self.b as u32).to_le_bytes())?;
        w.write_all(&[self.order.flag()])?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        let bins = 2 * self.b + 1;
        let mut buf = Vec::with_capacity(1 + AC_COUNT * bins * 4 + 64);
        for r in &self.records {
            if r.hist.b != self.b {
                return Err(Error::shape(format!("record with b = {} in a b = {} set", r.hist.b, self.b)));
            }
            buf.clear();
            buf.push(r.label);
            for f in self.order.positions() {
                for &c in &r.hist.counts[(f - 1) * bins..f * bins] {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
            }
            buf.extend(r.q.steps().iter().map(|&s| s as u8));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 17];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated feature header".into()))?;
        if &head[..4] != FEATURE_MAGIC {
            return Err(Error::Format("not a DJPF feature file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
        if word(4) != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature version {}", word(4))));
        }
        let b = word(8) as usize;
        if b == 0 || b > 1 << 16 {
            return Err(Error::Format(format!("bin range {b}")));
        }
        let order = FreqOrder::from_flag(head[12])?;
        let n = word(13) as usize;
        let bins = 2 * b + 1;
        let mut buf = vec![0u8; 1 + AC_COUNT * bins * 4 + 64];
        let positions = order.positions();
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated feature record {i}")))?;
            let mut counts = vec![0u32; AC_COUNT * bins];
            for (pos, &f) in positions.iter().enumerate() {
                for j in 0..bins {
                    let o = 1 + (pos * bins + j) * 4;
                    counts[(f - 1) * bins + j] = u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
                }
            }
            let qo = 1 + AC_COUNT * bins * 4;
            let steps: [u16; 64] = std::array::from_fn(|k| u16::from(buf[qo + k]));
            records.push(FeatureRecord {
                label: buf[0],
                hist: HistogramSet { b, counts },
                q: QuantMatrix::new(steps)?,
            });
        }
        Ok(FeatureSet { b, order, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(Error::at_path(path))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(Error::at_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(Error::at_path(path))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_start_at_first_ac() {
        assert_eq!(FreqOrder::Raster.positions()[0], 1);
        assert_eq!(FreqOrder::Zigzag.positions()[0], 1);
        assert_eq!(FreqOrder::Zigzag.positions()[1], 8);
        assert_eq!(FreqOrder::Zigzag.positions()[62], 63);
        assert!("diagonal".parse::<FreqOrder>().is_err());
    }

    #[test]
    fn zero_bins_rejected() {
        let plane = CoeffPlane::zeros(1, 1, 1);
        assert!(extract_histograms(&plane, 0).is_err());
    }
}
