use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use super::{Block, QuantMatrix};

/// basis[x][u] = C(u)/2 · cos((2x+1)uπ/16)
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        std::array::from_fn(|x| {
            std::array::from_fn(|u| {
                let c = if u == 0 { FRAC_1_SQRT_2 } else { 1.0 };
                0.5 * c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
            })
        })
    })
}

/// Orthonormal 2-D DCT-II of a level-shifted block (raster in, raster out).
pub(crate) fn fdct(samples: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u]
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[x][u] * samples[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[y][v] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub(crate) fn idct(coeffs: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    // columns first: tmp[y][u]
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| b[y][v] * coeffs[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| b[x][u] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Level shift, DCT, divide by `q`, round half away from zero.
pub fn forward_block(pixels: &[u8; 64], q: &QuantMatrix) -> Block {
    let shifted = pixels.map(|p| f64::from(p) - 128.0);
    let coeffs = fdct(&shifted);
    let steps = q.steps();
    std::array::from_fn(|i| (coeffs[i] / f64::from(steps[i])).round() as i32)
}

/// Dequantize, inverse DCT, add 128, round and clamp to `[0, 255]`.
pub fn inverse_block(coeffs: &Block, q: &QuantMatrix) -> [u8; 64] {
    let steps = q.steps();
    let deq: [f64; 64] = std::array::from_fn(|i| f64::from(coeffs[i]) * f64::from(steps[i]));
    idct(&deq).map(|v| (v + 128.0).round().clamp(0.0, 255.0) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones() -> QuantMatrix {
        QuantMatrix::uniform(1).unwrap()
    }

    /// Direct quadruple-sum definition, independent of the separable path.
    fn fdct_naive(s: &[f64; 64]) -> [f64; 64] {
        std::array::from_fn(|i| {
            let (v, u) = (i / 8, i % 8);
            let cu = if u == 0 { FRAC_1_SQRT_2 } else { 1.0 };
            let cv = if v == 0 { FRAC_1_SQRT_2 } else { 1.0 };
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += s[y * 8 + x]
                        * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
                        * ((2 * y + 1) as f64 * v as f64 * PI / 16.0).cos();
                }
            }
            0.25 * cu * cv * acc
        })
    }

    #[test]
    fn constant_blocks() {
        let q = standard_q();
        assert_eq!(forward_block(&[128; 64], &q), [0; 64]);
        let f = forward_block(&[136; 64], &ones());
        assert_eq!(f[0], 64);
        assert!(f[1..].iter().all(|&c| c == 0));
        let mut dc = [0; 64];
        dc[0] = 64;
        assert_eq!(inverse_block(&dc, &ones()), [136; 64]);
        assert_eq!(inverse_block(&[0; 64], &q), [128; 64]);
        dc[0] = 10_000;
        assert_eq!(inverse_block(&dc, &ones()), [255; 64]);
        dc[0] = -10_000;
        assert_eq!(inverse_block(&dc, &ones()), [0; 64]);
    }

    fn standard_q() -> QuantMatrix {
        crate::jpeg::standard_qmatrix(75).unwrap()
    }

    #[test]
    fn separable_matches_naive() {
        let s: [f64; 64] = std::array::from_fn(|i| ((i * 37 + 11) % 255) as f64 - 128.0);
        let a = fdct(&s);
        let b = fdct_naive(&s);
        for i in 0..64 {
            assert!((a[i] - b[i]).abs() < 1e-10);
        }
        let back = idct(&a);
        for i in 0..64 {
            assert!((back[i] - s[i]).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn unit_q_roundtrip_within_one(px in proptest::array::uniform32(0u8..=255u8), px2 in proptest::array::uniform32(0u8..=255u8)) {
            let mut pixels = [0u8; 64];
            pixels[..32].copy_from_slice(&px);
            pixels[32..].copy_from_slice(&px2);
            let back = inverse_block(&forward_block(&pixels, &ones()), &ones());
            for i in 0..64 {
                prop_assert!((i32::from(back[i]) - i32::from(pixels[i])).abs() <= 1);
            }
        }

    }
}
