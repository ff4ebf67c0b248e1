//! The detector: HQ projector, stacked BiLSTM encoder with an optional
//! residual connection, pooling over frequencies and a sigmoid head.

mod checkpoint;
mod config;

use rand::Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{ModelConfig, ParamCount, Pooling, Projector};

use crate::error::{Error, Result};
use crate::features::{FeatureRecord, HqInput, AC_COUNT};
use crate::nn::{
    batch_norm_backward, batch_norm_forward, bce_loss, dropout_mask, glorot_uniform, sigmoid, BatchNorm, BiLstm,
    BiMasks, BnCache, BnMode, LstmCache, Tensor,
};

const STEPS: usize = AC_COUNT;

/// A batch of HQ inputs, `len × 63 × (2b+1) × 2`.
#[derive(Clone, PartialEq, Debug)]
pub struct HqBatch {
    pub len: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl HqBatch {
    pub fn from_inputs(inputs: &[HqInput]) -> Result<Self> {
        let bins = inputs.first().map_or(1, HqInput::bins);
        let mut values = Vec::with_capacity(inputs.len() * STEPS * bins * 2);
        for x in inputs {
            if x.bins() != bins || x.values.len() != STEPS * bins * 2 {
                return Err(Error::shape("HQ inputs of differing bin range"));
            }
            values.extend_from_slice(&x.values);
        }
        Ok(Self {
            len: inputs.len(),
            bins,
            values,
        })
    }

    pub fn from_records(records: &[&FeatureRecord], config: &ModelConfig) -> Result<Self> {
        let inputs: Vec<HqInput> = records.iter().map(|r| r.hq(config.order)).collect();
        Self::from_inputs(&inputs)
    }

    fn example_width(&self) -> usize {
        STEPS * self.bins * 2
    }

    /// Examples `start..end` as their own batch.
    pub fn slice(&self, start: usize, end: usize) -> HqBatch {
        let w = self.example_width();
        HqBatch {
            len: end - start,
            bins: self.bins,
            values: self.values[start * w..end * w].to_vec(),
        }
    }

    fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(c).step_by(2).copied()
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct HqProjector {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub gamma: Tensor,
    pub bn: BatchNorm,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, PartialEq, Debug)]
pub struct ConvProjector {
    /// Weights for (h, q).
    pub w: Tensor,
    pub b: Tensor,
    pub bn: BatchNorm,
}

#[derive(Clone, PartialEq, Debug)]
pub enum ProjectorParams {
    None,
    Hq(HqProjector),
    SingleConv(ConvProjector),
}

#[derive(Clone, PartialEq, Debug)]
pub enum EncoderParams {
    /// Logistic regression on the flattened projector output.
    Flat { w: Tensor, b: Tensor },
    Recurrent {
        layers: Vec<BiLstm>,
        /// Attention scoring vector and bias, WAM pooling only.
        wam: Option<(Tensor, Tensor)>,
        head_v: Tensor,
        head_b: Tensor,
    },
}

/// Model parameters. Gradients use the same type.
#[derive(Clone, PartialEq, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub projector: ProjectorParams,
    pub encoder: EncoderParams,
}

/// A named parameter or buffer.
pub struct Entry<T> {
    pub name: String,
    pub tensor: T,
    pub trainable: bool,
}

fn entry<T>(name: impl Into<String>, tensor: T, trainable: bool) -> Entry<T> {
    Entry {
        name: name.into(),
        tensor,
        trainable,
    }
}

impl Model {
    /// Parameters in their neutral state: weights zero, BN scale and
    /// running variance one.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.bins();
        let projector = match config.projector {
            Projector::None => ProjectorParams::None,
            Projector::Hq => {
                let c = config.filters;
                ProjectorParams::Hq(HqProjector {
                    alpha: Tensor::zeros(&[c]),
                    beta: Tensor::zeros(&[c]),
                    gamma: Tensor::zeros(&[c]),
                    bn: BatchNorm::new(c + 2),
                    out_w: Tensor::zeros(&[c + 2]),
                    out_b: Tensor::zeros(&[1]),
                })
            }
            Projector::SingleConv => ProjectorParams::SingleConv(ConvProjector {
                w: Tensor::zeros(&[2]),
                b: Tensor::zeros(&[1]),
                bn: BatchNorm::new(1),
            }),
        };
        let encoder = if config.depth == 0 {
            EncoderParams::Flat {
                w: Tensor::zeros(&[STEPS * w]),
                b: Tensor::zeros(&[1]),
            }
        } else {
            let n = config.n;
            EncoderParams::Recurrent {
                layers: (0..config.depth).map(|l| BiLstm::zeros(n, config.layer_input(l))).collect(),
                wam: (config.pooling == Pooling::Wam).then(|| (Tensor::zeros(&[2 * n]), Tensor::zeros(&[1]))),
                head_v: Tensor::zeros(&[config.pooled_dim()]),
                head_b: Tensor::zeros(&[1]),
            }
        };
        Ok(Self {
            config: *config,
            projector,
            encoder,
        })
    }

    /// Glorot-uniform kernels, orthogonal recurrent matrices, forget
    /// biases one, other biases zero, BN scale one and shift zero.
    pub fn build(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        match &mut model.projector {
            ProjectorParams::None => {}
            ProjectorParams::Hq(p) => {
                // each projection is a 1×1 convolution over two channels
                let c = config.filters;
                let k = glorot_uniform(&[2, c], 2, c, rng);
                for j in 0..c {
                    p.alpha.data[j] = k.data[j];
                    p.beta.data[j] = k.data[c + j];
                }
                p.out_w = glorot_uniform(&[c + 2], c + 2, 1, rng);
            }
            ProjectorParams::SingleConv(p) => p.w = glorot_uniform(&[2], 2, 1, rng),
        }
        match &mut model.encoder {
            EncoderParams::Flat { w, .. } => *w = glorot_uniform(&[w.len()], w.len(), 1, rng),
            EncoderParams::Recurrent {
                layers, wam, head_v, ..
            } => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    *layer = BiLstm::init(config.n, config.layer_input(l), rng);
                }
                if let Some((w, _)) = wam {
                    *w = glorot_uniform(&[w.len()], w.len(), 1, rng);
                }
                *head_v = glorot_uniform(&[head_v.len()], head_v.len(), 1, rng);
            }
        }
        Ok(model)
    }

    /// Same layout with every tensor zero, used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config).expect("config already validated");
        for e in z.entries_mut() {
            e.tensor.data.fill(0.0);
        }
        z
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn entries(&self) -> Vec<Entry<&Tensor>> {
        let mut v = Vec::new();
        match &self.projector {
            ProjectorParams::None => {}
            ProjectorParams::Hq(p) => {
                v.push(entry("proj.alpha", &p.alpha, true));
                v.push(entry("proj.beta", &p.beta, true));
                v.push(entry("proj.gamma", &p.gamma, true));
                push_bn(&mut v, &p.bn);
                v.push(entry("proj.out.w", &p.out_w, true));
                v.push(entry("proj.out.b", &p.out_b, true));
            }
            ProjectorParams::SingleConv(p) => {
                v.push(entry("proj.conv.w", &p.w, true));
                v.push(entry("proj.conv.b", &p.b, true));
                push_bn(&mut v, &p.bn);
            }
        }
        match &self.encoder {
            EncoderParams::Flat { w, b } => {
                v.push(entry("flat.w", w, true));
                v.push(entry("flat.b", b, true));
            }
            EncoderParams::Recurrent {
                layers,
                wam,
                head_v,
                head_b,
            } => {
                for (l, layer) in layers.iter().enumerate() {
                    for (dir, p) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                        v.push(entry(format!("lstm{}.{dir}.w", l + 1), &p.w, true));
                        v.push(entry(format!("lstm{}.{dir}.v", l + 1), &p.v, true));
                        v.push(entry(format!("lstm{}.{dir}.b", l + 1), &p.b, true));
                    }
                }
                if let Some((w, b)) = wam {
                    v.push(entry("wam.w", w, true));
                    v.push(entry("wam.b", b, true));
                }
                v.push(entry("head.v", head_v, true));
                v.push(entry("head.b", head_b, true));
            }
        }
        v
    }

    /// Mutable view of [`Model::entries`], same order.
    pub fn entries_mut(&mut self) -> Vec<Entry<&mut Tensor>> {
        let mut v = Vec::new();
        match &mut self.projector {
            ProjectorParams::None => {}
            ProjectorParams::Hq(p) => {
                v.push(entry("proj.alpha", &mut p.alpha, true));
                v.push(entry("proj.beta", &mut p.beta, true));
                v.push(entry("proj.gamma", &mut p.gamma, true));
                push_bn_mut(&mut v, &mut p.bn);
                v.push(entry("proj.out.w", &mut p.out_w, true));
                v.push(entry("proj.out.b", &mut p.out_b, true));
            }
            ProjectorParams::SingleConv(p) => {
                v.push(entry("proj.conv.w", &mut p.w, true));
                v.push(entry("proj.conv.b", &mut p.b, true));
                push_bn_mut(&mut v, &mut p.bn);
            }
        }
        match &mut self.encoder {
            EncoderParams::Flat { w, b } => {
                v.push(entry("flat.w", w, true));
                v.push(entry("flat.b", b, true));
            }
            EncoderParams::Recurrent {
                layers,
                wam,
                head_v,
                head_b,
            } => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    for (dir, p) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                        v.push(entry(format!("lstm{}.{dir}.w", l + 1), &mut p.w, true));
                        v.push(entry(format!("lstm{}.{dir}.v", l + 1), &mut p.v, true));
                        v.push(entry(format!("lstm{}.{dir}.b", l + 1), &mut p.b, true));
                    }
                }
                if let Some((w, b)) = wam {
                    v.push(entry("wam.w", w, true));
                    v.push(entry("wam.b", b, true));
                }
                v.push(entry("head.v", head_v, true));
                v.push(entry("head.b", head_b, true));
            }
        }
        v
    }

    /// Trainable tensors only, in entry order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.entries().into_iter().filter(|e| e.trainable).map(|e| e.tensor).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries_mut().into_iter().filter(|e| e.trainable).map(|e| e.tensor).collect()
    }

    /// Parameter count from the allocated tensors.
    pub fn param_count(&self) -> ParamCount {
        let (mut trainable, mut non_trainable) = (0, 0);
        for e in self.entries() {
            if e.trainable {
                trainable += e.tensor.len();
            } else {
                non_trainable += e.tensor.len();
            }
        }
        ParamCount {
            trainable,
            non_trainable,
            total: trainable + non_trainable,
        }
    }

    fn bn_mut(&mut self) -> Option<&mut BatchNorm> {
        match &mut self.projector {
            ProjectorParams::None => None,
            ProjectorParams::Hq(p) => Some(&mut p.bn),
            ProjectorParams::SingleConv(p) => Some(&mut p.bn),
        }
    }

    /// Fold batch statistics from a training step into the running averages.
    pub fn update_bn_running(&mut self, stats: &BnStats) {
        if let Some(bn) = self.bn_mut() {
            bn.update_running(&stats.mean, &stats.var);
        }
    }

    /// Per-sequence dropout masks for one example, one set per BiLSTM layer.
    pub fn sample_masks(&self, rng: &mut impl Rng) -> Vec<BiMasks> {
        let c = &self.config;
        (0..c.depth)
            .map(|l| {
                let m = c.layer_input(l);
                [
                    dropout_mask(m, c.dropout, rng),
                    dropout_mask(c.n, c.recurrent_dropout, rng),
                    dropout_mask(m, c.dropout, rng),
                    dropout_mask(c.n, c.recurrent_dropout, rng),
                ]
            })
            .collect()
    }

    fn check_batch(&self, batch: &HqBatch) -> Result<()> {
        if batch.bins != self.config.bins() || batch.values.len() != batch.len * batch.example_width() {
            return Err(Error::shape(format!(
                "batch with {} bins for a model with b = {}",
                batch.bins, self.config.b
            )));
        }
        Ok(())
    }
}

fn push_bn<'a>(v: &mut Vec<Entry<&'a Tensor>>, bn: &'a BatchNorm) {
    v.push(entry("proj.bn.gamma", &bn.gamma, true));
    v.push(entry("proj.bn.beta", &bn.beta, true));
    v.push(entry("proj.bn.running_mean", &bn.running_mean, false));
    v.push(entry("proj.bn.running_var", &bn.running_var, false));
}

fn push_bn_mut<'a>(v: &mut Vec<Entry<&'a mut Tensor>>, bn: &'a mut BatchNorm) {
    v.push(entry("proj.bn.gamma", &mut bn.gamma, true));
    v.push(entry("proj.bn.beta", &mut bn.beta, true));
    v.push(entry("proj.bn.running_mean", &mut bn.running_mean, false));
    v.push(entry("proj.bn.running_var", &mut bn.running_var, false));
}

/// Batch statistics of the projector's batch normalization.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct ProjCache {
    /// Pre-normalization channels, `rows × ch`.
    pre_h: Vec<f64>,
    pre_q: Vec<f64>,
    bn: BnCache,
    /// Post-normalization values, `rows × ch`.
    y: Vec<f64>,
}

enum EncCache {
    Flat,
    Recurrent {
        layer_caches: Vec<(LstmCache, LstmCache)>,
        /// Final-layer outputs, `batch·63 × 2n`.
        seq: Vec<f64>,
        /// WAM weights, `batch × 63`.
        attention: Vec<f64>,
        pooled: Vec<f64>,
    },
}

/// Outputs of a forward pass that callers may inspect.
#[derive(Clone, PartialEq, Debug)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Encoder input `x_k`, `batch × 63 × (2b+1)`.
    pub encoder_input: Vec<f64>,
    /// WAM weights `batch × 63`; empty for other pooling.
    pub attention: Vec<f64>,
    /// Pooled feature vectors, `batch × pooled_dim`; empty at depth 0.
    pub pooled: Vec<f64>,
}

/// Loss, predictions and parameter gradients of one batch.
pub struct StepOutput {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grads: Model,
    pub bn_stats: Option<BnStats>,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl Model {
    fn project(&self, batch: &HqBatch, mode: BnMode) -> Result<(Vec<f64>, Option<ProjCache>)> {
        let h: Vec<f64> = batch.channel(0).collect();
        match &self.projector {
            ProjectorParams::None => Ok((h, None)),
            ProjectorParams::Hq(p) => {
                let q: Vec<f64> = batch.channel(1).collect();
                let c = p.alpha.len();
                let ch = c + 2;
                let mut pre = Vec::with_capacity(h.len() * ch);
                for (&hv, &qv) in h.iter().zip(&q) {
                    pre.push(hv);
                    pre.push(qv);
                    for j in 0..c {
                        pre.push(p.alpha.data[j] * hv + p.beta.data[j] * qv + p.gamma.data[j]);
                    }
                }
                let (y, bn) = batch_norm_forward(&pre, ch, &p.bn, mode)?;
                let x = y
                    .chunks_exact(ch)
                    .map(|row| row.iter().zip(&p.out_w.data).map(|(a, w)| relu(*a) * w).sum::<f64>() + p.out_b.data[0])
                    .collect();
                Ok((
                    x,
                    Some(ProjCache {
                        pre_h: h,
                        pre_q: q,
                        bn,
                        y,
                    }),
                ))
            }
            ProjectorParams::SingleConv(p) => {
                let q: Vec<f64> = batch.channel(1).collect();
                let pre: Vec<f64> = h
                    .iter()
                    .zip(&q)
                    .map(|(hv, qv)| p.w.data[0] * hv + p.w.data[1] * qv + p.b.data[0])
                    .collect();
                let (y, bn) = batch_norm_forward(&pre, 1, &p.bn, mode)?;
                let x = y.iter().map(|&v| relu(v)).collect();
                Ok((
                    x,
                    Some(ProjCache {
                        pre_h: h,
                        pre_q: q,
                        bn,
                        y,
                    }),
                ))
            }
        }
    }

    fn project_backward(&self, cache: &ProjCache, dx: &[f64], grads: &mut Model) {
        match (&self.projector, &mut grads.projector) {
            (ProjectorParams::Hq(p), ProjectorParams::Hq(g)) => {
                let c = p.alpha.len();
                let ch = c + 2;
                let mut dy = vec![0.0; cache.y.len()];
                for (r, &d) in dx.iter().enumerate() {
                    g.out_b.data[0] += d;
                    for k in 0..ch {
                        let y = cache.y[r * ch + k];
                        if y > 0.0 {
                            g.out_w.data[k] += d * y;
                            dy[r * ch + k] = d * p.out_w.data[k];
                        }
                    }
                }
                let dpre = batch_norm_backward(&cache.bn, &dy, &p.bn, &mut g.bn);
                for (r, row) in dpre.chunks_exact(ch).enumerate() {
                    let (hv, qv) = (cache.pre_h[r], cache.pre_q[r]);
                    for j in 0..c {
                        let d = row[2 + j];
                        g.alpha.data[j] += d * hv;
                        g.beta.data[j] += d * qv;
                        g.gamma.data[j] += d;
                    }
                }
            }
            (ProjectorParams::SingleConv(p), ProjectorParams::SingleConv(g)) => {
                let dy: Vec<f64> = dx
                    .iter()
                    .zip(&cache.y)
                    .map(|(&d, &y)| if y > 0.0 { d } else { 0.0 })
                    .collect();
                let dpre = batch_norm_backward(&cache.bn, &dy, &p.bn, &mut g.bn);
                for (r, &d) in dpre.iter().enumerate() {
                    g.w.data[0] += d * cache.pre_h[r];
                    g.w.data[1] += d * cache.pre_q[r];
                    g.b.data[0] += d;
                }
            }
            _ => {}
        }
    }

    /// Encoder, pooling and head on `x` (`batch × 63 × (2b+1)`).
    fn encode(&self, x: &[f64], batch: usize, masks: Option<&[BiMasks]>) -> Result<(Vec<f64>, EncCache)> {
        match &self.encoder {
            EncoderParams::Flat { w, b } => {
                let logits = x
                    .chunks_exact(w.len())
                    .map(|row| row.iter().zip(&w.data).map(|(a, c)| a * c).sum::<f64>() + b.data[0])
                    .collect();
                Ok((logits, EncCache::Flat))
            }
            EncoderParams::Recurrent {
                layers,
                wam,
                head_v,
                head_b,
            } => {
                let n2 = 2 * self.config.n;
                let mut outs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
                let mut caches = Vec::with_capacity(layers.len());
                for (l, layer) in layers.iter().enumerate() {
                    let input: Vec<f64>;
                    let inp: &[f64] = if l == 0 {
                        x
                    } else if l == 2 && self.config.residual {
                        input = outs[0].iter().zip(&outs[1]).map(|(a, b)| a + b).collect();
                        &input
                    } else {
                        &outs[l - 1]
                    };
                    let (out, cache) = layer.forward(inp, batch, STEPS, masks.map(|m| &m[l]))?;
                    outs.push(out);
                    caches.push(cache);
                }
                let seq = outs.pop().expect("depth ≥ 1");
                let pd = self.config.pooled_dim();
                let mut pooled = vec![0.0; batch * pd];
                let mut attention = Vec::new();
                for bi in 0..batch {
                    let s = &seq[bi * STEPS * n2..(bi + 1) * STEPS * n2];
                    let dst = &mut pooled[bi * pd..(bi + 1) * pd];
                    let first = &s[..n2];
                    let last = &s[(STEPS - 1) * n2..];
                    match self.config.pooling {
                        Pooling::Wam => {
                            let (w, bw) = wam.as_ref().expect("WAM parameters");
                            let scores: Vec<f64> = s
                                .chunks_exact(n2)
                                .map(|st| st.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>() + bw.data[0])
                                .collect();
                            let a = softmax(&scores);
                            for (st, &ai) in s.chunks_exact(n2).zip(&a) {
                                dst.iter_mut().zip(st).for_each(|(d, v)| *d += ai * v);
                            }
                            attention.extend(a);
                        }
                        Pooling::Last => dst.copy_from_slice(last),
                        Pooling::First => dst.copy_from_slice(first),
                        Pooling::AddFirstLast => {
                            for j in 0..n2 {
                                dst[j] = first[j] + last[j];
                            }
                        }
                        Pooling::ConcatFirstLast => {
                            dst[..n2].copy_from_slice(first);
                            dst[n2..].copy_from_slice(last);
                        }
                    }
                }
                let logits = pooled
                    .chunks_exact(pd)
                    .map(|p| p.iter().zip(&head_v.data).map(|(a, b)| a * b).sum::<f64>() + head_b.data[0])
                    .collect();
                Ok((
                    logits,
                    EncCache::Recurrent {
                        layer_caches: caches,
                        seq,
                        attention,
                        pooled,
                    },
                ))
            }
        }
    }

    fn encode_backward(&self, cache: &EncCache, x: &[f64], batch: usize, dlogit: &[f64], grads: &mut Model) -> Vec<f64> {
        match (&self.encoder, cache, &mut grads.encoder) {
            (EncoderParams::Flat { w, .. }, EncCache::Flat, EncoderParams::Flat { w: gw, b: gb }) => {
                let width = w.len();
                let mut dx = vec![0.0; x.len()];
                for bi in 0..batch {
                    let d = dlogit[bi];
                    gb.data[0] += d;
                    let row = &x[bi * width..(bi + 1) * width];
                    for j in 0..width {
                        gw.data[j] += d * row[j];
                        dx[bi * width + j] = d * w.data[j];
                    }
                }
                dx
            }
            (
                EncoderParams::Recurrent {
                    layers, wam, head_v, ..
                },
                EncCache::Recurrent {
                    layer_caches,
                    seq,
                    attention,
                    pooled,
                },
                EncoderParams::Recurrent {
                    layers: g_layers,
                    wam: g_wam,
                    head_v: g_head_v,
                    head_b: g_head_b,
                },
            ) => {
                let n2 = 2 * self.config.n;
                let pd = self.config.pooled_dim();
                let mut dseq = vec![0.0; seq.len()];
                for bi in 0..batch {
                    let d = dlogit[bi];
                    g_head_b.data[0] += d;
                    let p = &pooled[bi * pd..(bi + 1) * pd];
                    let dp: Vec<f64> = head_v.data.iter().map(|v| d * v).collect();
                    g_head_v.data.iter_mut().zip(p).for_each(|(g, v)| *g += d * v);
                    let s = &seq[bi * STEPS * n2..(bi + 1) * STEPS * n2];
                    let ds = &mut dseq[bi * STEPS * n2..(bi + 1) * STEPS * n2];
                    let last = (STEPS - 1) * n2;
                    match self.config.pooling {
                        Pooling::Wam => {
                            let (w, _) = wam.as_ref().expect("WAM parameters");
                            let (gw, gbw) = g_wam.as_mut().expect("WAM gradients");
                            let a = &attention[bi * STEPS..(bi + 1) * STEPS];
                            // d score_t = a_t (da_t - Σ_u a_u da_u), with da_t = dp · s_t
                            let da: Vec<f64> = s
                                .chunks_exact(n2)
                                .map(|st| st.iter().zip(&dp).map(|(x, y)| x * y).sum())
                                .collect();
                            let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                            for t in 0..STEPS {
                                let de = a[t] * (da[t] - mean);
                                gbw.data[0] += de;
                                let st = &s[t * n2..(t + 1) * n2];
                                let dst = &mut ds[t * n2..(t + 1) * n2];
                                for j in 0..n2 {
                                    gw.data[j] += de * st[j];
                                    dst[j] += a[t] * dp[j] + de * w.data[j];
                                }
                            }
                        }
                        Pooling::Last => ds[last..].iter_mut().zip(&dp).for_each(|(a, b)| *a += b),
                        Pooling::First => ds[..n2].iter_mut().zip(&dp).for_each(|(a, b)| *a += b),
                        Pooling::AddFirstLast => {
                            for j in 0..n2 {
                                ds[j] += dp[j];
                                ds[last + j] += dp[j];
                            }
                        }
                        Pooling::ConcatFirstLast => {
                            for j in 0..n2 {
                                ds[j] += dp[j];
                                ds[last + j] += dp[n2 + j];
                            }
                        }
                    }
                }
                let depth = layers.len();
                let mut douts: Vec<Vec<f64>> = (0..depth).map(|_| Vec::new()).collect();
                douts[depth - 1] = dseq;
                let mut dx = Vec::new();
                for l in (0..depth).rev() {
                    let dout = std::mem::take(&mut douts[l]);
                    let dinp = layers[l].backward(&layer_caches[l], &dout, &mut g_layers[l]);
                    if l == 0 {
                        dx = dinp;
                        break;
                    }
                    add_into(&mut douts[l - 1], &dinp);
                    if l == 2 && self.config.residual {
                        add_into(&mut douts[0], &dinp);
                    }
                }
                dx
            }
            _ => unreachable!("gradient model shares the parameter layout"),
        }
    }

    /// Probabilities and intermediate values for a whole batch.
    pub fn forward(&self, batch: &HqBatch, mode: BnMode, masks: Option<&[Vec<BiMasks>]>) -> Result<Forward> {
        self.check_batch(batch)?;
        let (x, _) = self.project(batch, mode)?;
        let joined = masks.map(|m| join_masks(m, 0, batch.len));
        let (logits, cache) = self.encode(&x, batch.len, joined.as_deref())?;
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        let (attention, pooled) = match cache {
            EncCache::Flat => (Vec::new(), Vec::new()),
            EncCache::Recurrent { attention, pooled, .. } => (attention, pooled),
        };
        Ok(Forward {
            logits,
            probs,
            encoder_input: x,
            attention,
            pooled,
        })
    }

    /// Inference-mode probabilities, evaluated in chunks of `chunk` examples.
    pub fn predict(&self, batch: &HqBatch, chunk: usize) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..batch.len).step_by(chunk).collect();
        let parts: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let sub = batch.slice(s, (s + chunk).min(batch.len));
                self.forward(&sub, BnMode::Infer, None).map(|f| f.probs)
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }

    /// Mean binary cross-entropy of the batch and its gradient w.r.t. every
    /// trainable parameter. The projector runs on the whole batch (batch
    /// normalization couples examples); the encoder runs on fixed chunks of
    /// `chunk` examples whose gradients are summed in chunk order, so the
    /// result does not depend on the number of worker threads.
    pub fn loss_and_grads(
        &self,
        batch: &HqBatch,
        targets: &[f64],
        mode: BnMode,
        masks: Option<&[Vec<BiMasks>]>,
        chunk: usize,
    ) -> Result<StepOutput> {
        self.check_batch(batch)?;
        if targets.len() != batch.len || batch.len == 0 {
            return Err(Error::shape(format!("{} targets for a batch of {}", targets.len(), batch.len)));
        }
        if masks.is_some_and(|m| m.len() != batch.len) {
            return Err(Error::shape("one mask set per example required"));
        }
        let (x, proj_cache) = self.project(batch, mode)?;
        let width = STEPS * self.config.bins();
        let scale = 1.0 / batch.len as f64;
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..batch.len).step_by(chunk).collect();
        let parts: Vec<(Vec<f64>, Vec<f64>, Model)> = starts
            .par_iter()
            .map(|&s| -> Result<_> {
                let e = (s + chunk).min(batch.len);
                let xs = &x[s * width..e * width];
                let joined = masks.map(|m| join_masks(m, s, e));
                let (logits, cache) = self.encode(xs, e - s, joined.as_deref())?;
                let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
                let dlogit: Vec<f64> = probs.iter().zip(&targets[s..e]).map(|(p, y)| (p - y) * scale).collect();
                let mut grads = self.zeros_like();
                let dx = self.encode_backward(&cache, xs, e - s, &dlogit, &mut grads);
                Ok((probs, dx, grads))
            })
            .collect::<Result<_>>()?;

        let mut grads = self.zeros_like();
        let mut probs = Vec::with_capacity(batch.len);
        let mut dx = Vec::with_capacity(x.len());
        for (p, d, g) in parts {
            probs.extend(p);
            dx.extend(d);
            for (acc, part) in grads.params_mut().into_iter().zip(g.params()) {
                acc.add_assign(part);
            }
        }
        let mut bn_stats = None;
        if let Some(cache) = &proj_cache {
            self.project_backward(cache, &dx, &mut grads);
            if mode == BnMode::Train {
                bn_stats = Some(BnStats {
                    mean: cache.bn.mean.clone(),
                    var: cache.bn.var.clone(),
                });
            }
        }
        let loss = bce_loss(&probs, targets);
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(StepOutput {
            loss,
            probs,
            grads,
            bn_stats,
        })
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn add_into(acc: &mut Vec<f64>, v: &[f64]) {
    if acc.is_empty() {
        acc.extend_from_slice(v);
    } else {
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
}

/// Stack per-example masks of examples `start..end` into per-layer batch masks.
fn join_masks(masks: &[Vec<BiMasks>], start: usize, end: usize) -> Vec<BiMasks> {
    let depth = masks.first().map_or(0, Vec::len);
    (0..depth)
        .map(|l| std::array::from_fn(|k| masks[start..end].iter().flat_map(|m| m[l][k].iter().copied()).collect()))
        .collect()
}
