use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;
/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C` linear projections of one (histogram, q-factor) pair:
/// `out_c = α_c·h + β_c·q + γ_c`.
pub fn per_bin_affine(h: f64, q: f64, alpha: &[f64], beta: &[f64], gamma: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .zip(beta)
        .zip(gamma)
        .map(|((a, b), g)| a * h + b * q + g)
        .collect()
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Mean binary cross-entropy with clamped predictions.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Infer,
}

/// Per-channel batch normalization with learned scale and shift and
/// running statistics.
#[derive(Clone, PartialEq, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running = momentum · running + (1 - momentum) · batch`.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.data.iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.data.iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    pub mode: BnMode,
    pub rows: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch mean and (biased) variance per channel; empty in infer mode.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalize `x` laid out as `rows × channels` (channel innermost).
/// Running statistics are not touched; in train mode the batch
/// statistics are returned in the cache for [`BatchNorm::update_running`].
pub fn batch_norm_forward(x: &[f64], channels: usize, bn: &BatchNorm, mode: BnMode) -> Result<(Vec<f64>, BnCache)> {
    if bn.channels() != channels || channels == 0 || !x.len().is_multiple_of(channels) {
        return Err(Error::shape(format!(
            "batch norm over {} channels given {} values in {channels} channels",
            bn.channels(),
            x.len()
        )));
    }
    let rows = x.len() / channels;
    let (mean, var) = match mode {
        BnMode::Train => {
            if rows == 0 {
                return Err(Error::shape("batch norm over an empty batch"));
            }
            let mut mean = vec![0.0; channels];
            for row in x.chunks_exact(channels) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; channels];
            for row in x.chunks_exact(channels) {
                for c in 0..channels {
                    var[c] += (row[c] - mean[c]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        }
        BnMode::Infer => (bn.running_mean.data.clone(), bn.running_var.data.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(channels) {
        for c in 0..channels {
            let h = (row[c] - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(bn.gamma.data[c] * h + bn.beta.data[c]);
        }
    }
    let (mean, var) = match mode {
        BnMode::Train => (mean, var),
        BnMode::Infer => (Vec::new(), Vec::new()),
    };
    Ok((
        y,
        BnCache {
            mode,
            rows,
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Gradient w.r.t. the input; scale and shift gradients are added to `grads`.
pub fn batch_norm_backward(cache: &BnCache, dy: &[f64], bn: &BatchNorm, grads: &mut BatchNorm) -> Vec<f64> {
    let ch = bn.channels();
    let rows = cache.rows as f64;
    let mut sum_dy = vec![0.0; ch];
    let mut sum_dy_xhat = vec![0.0; ch];
    for (d, h) in dy.chunks_exact(ch).zip(cache.xhat.chunks_exact(ch)) {
        for c in 0..ch {
            sum_dy[c] += d[c];
            sum_dy_xhat[c] += d[c] * h[c];
        }
    }
    for c in 0..ch {
        grads.gamma.data[c] += sum_dy_xhat[c];
        grads.beta.data[c] += sum_dy[c];
    }
    let mut dx = Vec::with_capacity(dy.len());
    for (d, h) in dy.chunks_exact(ch).zip(cache.xhat.chunks_exact(ch)) {
        for c in 0..ch {
            let g = bn.gamma.data[c] * cache.inv_std[c];
            dx.push(match cache.mode {
                BnMode::Train => g * (d[c] - sum_dy[c] / rows - h[c] * sum_dy_xhat[c] / rows),
                BnMode::Infer => g * d[c],
            });
        }
    }
    dx
}
