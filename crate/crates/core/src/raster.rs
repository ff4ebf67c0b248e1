//! Minimal lossless raster I/O (binary and ASCII netpbm) and luma conversion.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit single-channel image, row-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Crop to the largest multiple of 8 in each dimension.
    pub fn crop_to_blocks(&self) -> GrayImage {
        self.crop(0, 0, self.width / 8 * 8, self.height / 8 * 8)
            .expect("crop inside bounds")
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Dimension(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(GrayImage {
            width: w,
            height: h,
            pixels,
        })
    }

    /// The 8×8 block at block coordinates (bx, by).
    pub fn block(&self, bx: usize, by: usize) -> [u8; 64] {
        std::array::from_fn(|i| self.get(bx * 8 + i % 8, by * 8 + i / 8))
    }
}

/// Decoded raster: grayscale or interleaved RGB.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Raster {
    Gray(GrayImage),
    Rgb {
        width: usize,
        height: usize,
        pixels: Vec<u8>,
    },
}

impl Raster {
    /// Full-range BT.601 luma, rounded to nearest.
    pub fn to_luma(&self) -> GrayImage {
        match self {
            Raster::Gray(g) => g.clone(),
            Raster::Rgb { width, height, pixels } => GrayImage {
                width: *width,
                height: *height,
                pixels: pixels.chunks_exact(3).map(|p| rgb_to_luma(p[0], p[1], p[2])).collect(),
            },
        }
    }
}

pub fn rgb_to_luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    y.round().clamp(0.0, 255.0) as u8
}

struct Tokens<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn next_token(&mut self) -> Result<&[u8]> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.data.get(self.pos) == Some(&b'#') {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        Ok(&self.data[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.next_token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad netpbm number {:?}", String::from_utf8_lossy(t))))
    }
}

/// Decode P2/P3/P5/P6 netpbm data with maxval 255.
pub fn decode_pnm(data: &[u8]) -> Result<Raster> {
    let mut t = Tokens { data, pos: 0 };
    let magic = t.next_token()?.to_vec();
    let channels = match magic.as_slice() {
        b"P2" | b"P5" => 1,
        b"P3" | b"P6" => 3,
        _ => return Err(Error::Format("not a P2/P3/P5/P6 netpbm file".into())),
    };
    let width = t.number()?;
    let height = t.number()?;
    let maxval = t.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let n = width * height * channels;
    let pixels = if magic[1] == b'5' || magic[1] == b'6' {
        let start = t.pos + 1;
        data.get(start..start + n)
            .ok_or_else(|| Error::Format("truncated netpbm raster".into()))?
            .to_vec()
    } else {
        (0..n)
            .map(|_| t.number().and_then(|v| u8::try_from(v).map_err(|_| Error::Format("sample > 255".into()))))
            .collect::<Result<_>>()?
    };
    Ok(if channels == 1 {
        Raster::Gray(GrayImage { width, height, pixels })
    } else {
        Raster::Rgb { width, height, pixels }
    })
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let data = std::fs::read(path).map_err(Error::at_path(path))?;
    decode_pnm(&data)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(Error::at_path(path))
}
