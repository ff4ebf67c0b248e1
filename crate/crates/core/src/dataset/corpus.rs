//! Synthetic uncompressed grayscale images: multi-octave value noise,
//! flat-shaded shapes with hard edges, a global gradient and sensor noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{write_pgm, GrayImage};

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 50,
            width: 512,
            height: 512,
            seed: 0,
        }
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a lattice with the given cell size.
fn value_noise(width: usize, height: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = y / cell;
        let ty = smooth((y % cell) as f64 / cell as f64);
        for x in 0..width {
            let gx = x / cell;
            let tx = smooth((x % cell) as f64 / cell as f64);
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(gx, gy) * (1.0 - tx) + at(gx + 1, gy) * tx;
            let bottom = at(gx, gy + 1) * (1.0 - tx) + at(gx + 1, gy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// One synthetic image; a pure function of the generator state.
pub fn synth_image(width: usize, height: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let n = width * height;
    let mut field = vec![0.0; n];

    let roughness = rng.random_range(0.2..0.9);
    for cell in [128usize, 64, 32, 16, 8, 4, 2] {
        let amp = (cell as f64 / 128.0).powf(roughness);
        for (f, v) in field.iter_mut().zip(value_noise(width, height, cell, rng)) {
            *f += amp * v;
        }
    }

    let shapes = rng.random_range(4..24);
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let rx = rng.random_range(2.0..(width as f64 / 3.0).max(3.0));
        let ry = rng.random_range(2.0..(height as f64 / 3.0).max(3.0));
        let level = rng.random_range(-1.5..1.5);
        let ellipse = rng.random_bool(0.5);
        // some regions carry fine texture instead of a flat fill
        let grain = if rng.random_bool(0.5) { rng.random_range(0.1..0.6) } else { 0.0 };
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    let t = if grain > 0.0 { grain * rng.random_range(-1.0..1.0) } else { 0.0 };
                    field[y * width + x] = 0.4 * field[y * width + x] + level + t;
                }
            }
        }
    }

    let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    for y in 0..height {
        for x in 0..width {
            field[y * width + x] += gx * x as f64 / width as f64 + gy * y as f64 / height as f64;
        }
    }

    let mean = field.iter().sum::<f64>() / n as f64;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-9);
    let target_mean = rng.random_range(70.0..180.0);
    let target_sd = rng.random_range(20.0..55.0);
    let noise = Normal::new(0.0, rng.random_range(1.0..5.0)).expect("positive sd");
    let pixels = field
        .iter()
        .map(|v| {
            let p = target_mean + target_sd * (v - mean) / sd + noise.sample(rng);
            p.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage {
        width,
        height,
        pixels,
    }
}

/// Write `count` images as `synth_NNNN.pgm` into `out_dir`.
pub fn synth_corpus(out_dir: &Path, config: &CorpusConfig) -> Result<Vec<PathBuf>> {
    if config.count == 0 || config.width < 8 || config.height < 8 {
        return Err(Error::Config(format!(
            "corpus of {} images at {}x{}",
            config.count, config.width, config.height
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::at_path(out_dir))?;
    (0..config.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let img = synth_image(config.width, config.height, &mut rng);
            let path = out_dir.join(format!("synth_{i:04}.pgm"));
            write_pgm(&path, &img)?;
            Ok(path)
        })
        .collect()
}
