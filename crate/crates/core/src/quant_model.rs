//! Probability model of single- and double-quantized DCT coefficients.
//!
//! A coefficient `U ~ f_U` quantized once by `q1` gives `S = [U / q1]`;
//! quantized again by `q2` after dequantization it gives
//! `D = [S · q1 / q2]`. Both PMFs are computed by integrating `f_U` over
//! the exact preimage interval of each output bin. Rounding is half-up
//! (`floor(x + 0.5)`), which is the convention the interval bounds encode.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SUPPORT: RangeInclusive<i32> = -200..=200;

/// Per-bin absolute tolerance of the quadrature.
pub const BIN_TOLERANCE: f64 = 1e-10;

/// Density of the unquantized coefficient.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum DensitySpec {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: f64, sd: f64 },
    Laplacian { loc: f64, scale: f64 },
}

impl DensitySpec {
    pub fn uniform(low: f64, high: f64) -> Result<Self> {
        if !(high > low) || !low.is_finite() || !high.is_finite() {
            return Err(Error::domain(format!("uniform bounds [{low}, {high}]")));
        }
        Ok(DensitySpec::Uniform { low, high })
    }

    pub fn gaussian(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !mean.is_finite() || !sd.is_finite() {
            return Err(Error::domain(format!("gaussian sd {sd}")));
        }
        Ok(DensitySpec::Gaussian { mean, sd })
    }

    pub fn laplacian(loc: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !loc.is_finite() || !scale.is_finite() {
            return Err(Error::domain(format!("laplacian scale {scale}")));
        }
        Ok(DensitySpec::Laplacian { loc, scale })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DensitySpec::Uniform { low, high } => Self::uniform(low, high).map(|_| ()),
            DensitySpec::Gaussian { mean, sd } => Self::gaussian(mean, sd).map(|_| ()),
            DensitySpec::Laplacian { loc, scale } => Self::laplacian(loc, scale).map(|_| ()),
        }
    }

    pub fn pdf(&self, u: f64) -> f64 {
        match *self {
            DensitySpec::Uniform { low, high } => {
                if (low..high).contains(&u) {
                    1.0 / (high - low)
                } else {
                    0.0
                }
            }
            DensitySpec::Gaussian { mean, sd } => {
                let z = (u - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
            }
            DensitySpec::Laplacian { loc, scale } => (-(u - loc).abs() / scale).exp() / (2.0 * scale),
        }
    }

    /// Points where the density is not smooth.
    fn breakpoints(&self) -> Vec<f64> {
        match *self {
            DensitySpec::Uniform { low, high } => vec![low, high],
            DensitySpec::Gaussian { mean, .. } => vec![mean],
            DensitySpec::Laplacian { loc, .. } => vec![loc],
        }
    }

    /// Interval that holds all but a negligible tail of the mass.
    fn effective_range(&self) -> (f64, f64) {
        match *self {
            DensitySpec::Uniform { low, high } => (low, high),
            DensitySpec::Gaussian { mean, sd } => (mean - 40.0 * sd, mean + 40.0 * sd),
            DensitySpec::Laplacian { loc, scale } => (loc - 800.0 * scale, loc + 800.0 * scale),
        }
    }

    /// ∫ f over [a, b) with absolute tolerance `tol`.
    pub fn integrate(&self, a: f64, b: f64, tol: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        let (lo, hi) = self.effective_range();
        let (a, b) = (a.max(lo), b.min(hi));
        if !(b > a) {
            return 0.0;
        }
        let mut cuts = vec![a];
        cuts.extend(self.breakpoints().into_iter().filter(|&p| p > a && p < b));
        cuts.push(b);
        let pieces = (cuts.len() - 1) as f64;
        cuts.windows(2)
            .map(|w| adaptive_gk(&|u| self.pdf(u), w[0], w[1], tol / pieces, 0))
            .sum()
    }

    /// Total mass over the real line, computed by quadrature.
    pub fn total_mass(&self) -> f64 {
        let (lo, hi) = self.effective_range();
        self.integrate(lo, hi, 1e-12)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            DensitySpec::Uniform { low, high } => rng.random_range(low..high),
            DensitySpec::Gaussian { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
            DensitySpec::Laplacian { loc, scale } => {
                let p: f64 = rng.random_range(-0.5..0.5);
                loc - scale * p.signum() * (1.0 - 2.0 * p.abs()).ln()
            }
        }
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod estimate with its embedded 7-point Gauss error.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, (kronrod - gauss).abs() * h)
}

fn adaptive_gk(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (est, err) = gk15(f, a, b);
    if err <= tol || depth >= 48 || b - a < 1e-12 {
        return est;
    }
    let m = 0.5 * (a + b);
    adaptive_gk(f, a, m, tol / 2.0, depth + 1) + adaptive_gk(f, m, b, tol / 2.0, depth + 1)
}

/// Probability mass on a contiguous integer support.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Pmf {
    pub d_min: i32,
    pub probs: Vec<f64>,
}

impl Pmf {
    pub fn d_max(&self) -> i32 {
        self.d_min + self.probs.len() as i32 - 1
    }

    pub fn support(&self) -> RangeInclusive<i32> {
        self.d_min..=self.d_max()
    }

    pub fn get(&self, d: i32) -> f64 {
        if d < self.d_min || d > self.d_max() {
            return 0.0;
        }
        self.probs[(d - self.d_min) as usize]
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.probs.iter().enumerate().map(|(i, &p)| (self.d_min + i as i32, p))
    }

    /// `d,P(d)` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("d,P(d)\n");
        for (d, p) in self.iter() {
            s.push_str(&format!("{d},{p:.17e}\n"));
        }
        s
    }
}

/// Half the L1 distance, over the union of both supports.
pub fn total_variation(a: &Pmf, b: &Pmf) -> f64 {
    let lo = a.d_min.min(b.d_min);
    let hi = a.d_max().max(b.d_max());
    0.5 * (lo..=hi).map(|d| (a.get(d) - b.get(d)).abs()).sum::<f64>()
}

fn check_q(q: u32, name: &str) -> Result<()> {
    if (1..=255).contains(&q) {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} = {q} outside [1, 255]")))
    }
}

fn check_support(support: &RangeInclusive<i32>) -> Result<()> {
    if support.start() > support.end() {
        return Err(Error::domain("empty support"));
    }
    Ok(())
}

/// `⌈n / d⌉` for `d > 0`.
fn ceil_div(n: i64, d: i64) -> i64 {
    -((-n).div_euclid(d))
}

/// Preimage `[q1(m - 0.5), q1(m_hi - 0.5))` of a bin, written so the
/// single- and double-quantized paths evaluate identical floating-point bounds.
fn bin_bounds(q1: u32, m_lo: i64, m_hi: i64) -> (f64, f64) {
    let q1 = f64::from(q1);
    (q1 * (m_lo as f64 - 0.5), q1 * (m_hi as f64 - 0.5))
}

/// PMF of `S = [U / q1]`.
pub fn pmf_single(q1: u32, density: &DensitySpec, support: RangeInclusive<i32>) -> Result<Pmf> {
    check_q(q1, "q1")?;
    check_support(&support)?;
    density.validate()?;
    let d_min = *support.start();
    let probs = support
        .map(|s| {
            let (a, b) = bin_bounds(q1, i64::from(s), i64::from(s) + 1);
            density.integrate(a, b, BIN_TOLERANCE)
        })
        .collect();
    Ok(Pmf { d_min, probs })
}

/// Range of single-quantized values `s` that requantize to `d`, as the
/// half-open integer interval `[⌈q2(d-½)/q1⌉, ⌈q2(d+½)/q1⌉)`.
pub fn double_preimage(q1: u32, q2: u32, d: i32) -> (i64, i64) {
    let (q1, q2, d) = (i64::from(q1), i64::from(q2), i64::from(d));
    (ceil_div(q2 * (2 * d - 1), 2 * q1), ceil_div(q2 * (2 * d + 1), 2 * q1))
}

/// PMF of `D = [[U / q1] · q1 / q2]`.
pub fn pmf_double(q1: u32, q2: u32, density: &DensitySpec, support: RangeInclusive<i32>) -> Result<Pmf> {
    check_q(q1, "q1")?;
    check_q(q2, "q2")?;
    check_support(&support)?;
    density.validate()?;
    let d_min = *support.start();
    let probs = support
        .map(|d| {
            let (lo, hi) = double_preimage(q1, q2, d);
            if lo >= hi {
                return 0.0;
            }
            let (a, b) = bin_bounds(q1, lo, hi);
            density.integrate(a, b, BIN_TOLERANCE)
        })
        .collect();
    Ok(Pmf { d_min, probs })
}

/// Relation between the first and second q-factor at one frequency.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// `q1 > q2` and `q2 | q1`
    S1,
    /// `q1 > q2` and `q2 ∤ q1`
    S2,
    /// `q1 < q2` and `q1 | q2`
    S3,
    /// `q1 < q2` and `q1 ∤ q2`
    S4,
    /// `q1 = q2`
    S5,
}

pub fn classify_scenario(q1: u32, q2: u32) -> Result<ScenarioKind> {
    check_q(q1, "q1")?;
    check_q(q2, "q2")?;
    Ok(match q1.cmp(&q2) {
        std::cmp::Ordering::Equal => ScenarioKind::S5,
        std::cmp::Ordering::Greater if q1.is_multiple_of(q2) => ScenarioKind::S1,
        std::cmp::Ordering::Greater => ScenarioKind::S2,
        std::cmp::Ordering::Less if q2.is_multiple_of(q1) => ScenarioKind::S3,
        std::cmp::Ordering::Less => ScenarioKind::S4,
    })
}

/// Half-up rounding of `u / q`.
pub fn quantize(u: f64, q: u32) -> i64 {
    (u / f64::from(q) + 0.5).floor() as i64
}

/// Exact integer requantization `[s · q1 / q2]`, half-up.
pub fn requantize(s: i64, q1: u32, q2: u32) -> i64 {
    let (q1, q2) = (i64::from(q1), i64::from(q2));
    (2 * s * q1 + q2).div_euclid(2 * q2)
}

/// Monte-Carlo PMF: draw from `density`, quantize by `q1` (and `q2` when
/// given), normalize counts by the number of draws. Mass falling outside
/// `support` is dropped.
pub fn empirical_pmf(
    q1: u32,
    q2: Option<u32>,
    samples: usize,
    density: &DensitySpec,
    seed: u64,
    support: RangeInclusive<i32>,
) -> Result<Pmf> {
    check_q(q1, "q1")?;
    if let Some(q2) = q2 {
        check_q(q2, "q2")?;
    }
    check_support(&support)?;
    density.validate()?;
    if samples == 0 {
        return Err(Error::domain("empirical PMF needs at least one sample"));
    }
    let d_min = *support.start();
    let d_max = *support.end();
    let mut counts = vec![0u64; (d_max - d_min + 1) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let u = density.sample(&mut rng);
        let s = quantize(u, q1);
        let d = match q2 {
            Some(q2) => requantize(s, q1, q2),
            None => s,
        };
        if d >= i64::from(d_min) && d <= i64::from(d_max) {
            counts[(d - i64::from(d_min)) as usize] += 1;
        }
    }
    let n = samples as f64;
    Ok(Pmf {
        d_min,
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Bins at or below `eps` that sit next to a bin above `eps`.
pub fn missing_bins(p: &Pmf, eps: f64) -> Result<Vec<i32>> {
    if !(eps >= 0.0) {
        return Err(Error::domain(format!("eps = {eps}")));
    }
    let above = |d: i32| p.support().contains(&d) && p.get(d) > eps;
    Ok(p.support()
        .filter(|&d| p.get(d) <= eps && (above(d - 1) || above(d + 1)))
        .collect())
}

/// Interior local maxima (`P(d) > P(d±1)`), excluding `d = 0`.
pub fn local_maxima(p: &Pmf) -> Vec<i32> {
    (p.d_min + 1..p.d_max())
        .filter(|&d| d != 0 && p.get(d) > p.get(d - 1) && p.get(d) > p.get(d + 1))
        .collect()
}
