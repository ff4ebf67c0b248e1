use rand::Rng;

use super::{gemm, glorot_uniform, orthogonal, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Gate blocks inside the stacked weights, in this order.
pub const GATE_F: usize = 0;
pub const GATE_I: usize = 1;
pub const GATE_O: usize = 2;
pub const GATE_C: usize = 3;

/// One LSTM with `n` hidden units over `m`-dimensional inputs. The four
/// gate matrices are stacked row-wise as `[f; i; o; c]`.
#[derive(Clone, PartialEq, Debug)]
pub struct LstmParams {
    pub n: usize,
    pub m: usize,
    /// `4n × m` input weights.
    pub w: Tensor,
    /// `4n × n` recurrent weights.
    pub v: Tensor,
    /// `4n` biases.
    pub b: Tensor,
}

impl LstmParams {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            w: Tensor::zeros(&[4 * n, m]),
            v: Tensor::zeros(&[4 * n, n]),
            b: Tensor::zeros(&[4 * n]),
        }
    }

    /// Glorot-uniform input weights, one orthogonal `n × n` recurrent
    /// matrix per gate, forget bias one and other biases zero.
    pub fn init(n: usize, m: usize, rng: &mut impl Rng) -> Self {
        let w = glorot_uniform(&[4 * n, m], m, 4 * n, rng);
        let mut v = Tensor::zeros(&[4 * n, n]);
        for g in 0..4 {
            let q = orthogonal(n, rng);
            v.data[g * n * n..(g + 1) * n * n].copy_from_slice(&q.data);
        }
        let mut b = Tensor::zeros(&[4 * n]);
        b.data[GATE_F * n..(GATE_F + 1) * n].fill(1.0);
        Self { n, m, w, v, b }
    }

    /// The `n × n` recurrent matrix of one gate.
    pub fn recurrent_gate(&self, gate: usize) -> Tensor {
        let n = self.n;
        Tensor {
            shape: vec![n, n],
            data: self.v.data[gate * n * n..(gate + 1) * n * n].to_vec(),
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.n * (self.m + self.n) + 4 * self.n
    }
}

/// Result of one cell update.
#[derive(Clone, PartialEq, Debug)]
pub struct LstmStep {
    pub s: Vec<f64>,
    pub c: Vec<f64>,
    /// Activated gates `[f; i; o; c̃]`.
    pub gates: Vec<f64>,
}

/// One step: `f,i,o = σ(W x + V s_prev + b)`, `c̃ = tanh(...)`,
/// `c = f⊙c_prev + i⊙c̃`, `s = o⊙tanh(c)`. Masks multiply `x` in every
/// input product and `s_prev` in every recurrent product.
pub fn lstm_cell(
    x: &[f64],
    s_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
    masks: Option<(&[f64], &[f64])>,
) -> Result<LstmStep> {
    let (n, m) = (p.n, p.m);
    if x.len() != m || s_prev.len() != n || c_prev.len() != n {
        return Err(Error::shape(format!(
            "cell with n = {n}, m = {m} given x {}, s {}, c {}",
            x.len(),
            s_prev.len(),
            c_prev.len()
        )));
    }
    let (xm, sm): (Vec<f64>, Vec<f64>) = match masks {
        Some((mi, mr)) => {
            if mi.len() != m || mr.len() != n {
                return Err(Error::shape("dropout mask length"));
            }
            (
                x.iter().zip(mi).map(|(a, b)| a * b).collect(),
                s_prev.iter().zip(mr).map(|(a, b)| a * b).collect(),
            )
        }
        None => (x.to_vec(), s_prev.to_vec()),
    };
    let mut z = p.b.data.clone();
    gemm(4 * n, m, 1, 1.0, &p.w.data, false, &xm, false, 1.0, &mut z);
    gemm(4 * n, n, 1, 1.0, &p.v.data, false, &sm, false, 1.0, &mut z);
    let mut gates = z;
    for (j, g) in gates.iter_mut().enumerate() {
        *g = if j / n == GATE_C { g.tanh() } else { sigmoid(*g) };
    }
    let c: Vec<f64> = (0..n)
        .map(|j| gates[GATE_F * n + j] * c_prev[j] + gates[GATE_I * n + j] * gates[GATE_C * n + j])
        .collect();
    let s = (0..n).map(|j| gates[GATE_O * n + j] * c[j].tanh()).collect();
    Ok(LstmStep { s, c, gates })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn position(self, step: usize, steps: usize) -> usize {
        match self {
            Direction::Forward => step,
            Direction::Backward => steps - 1 - step,
        }
    }
}

/// Everything the backward pass needs from a batched sequence forward.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub batch: usize,
    pub steps: usize,
    pub dir: Direction,
    /// Masked inputs, `batch·steps × m`.
    xm: Vec<f64>,
    /// Activated gates, `batch·steps × 4n`.
    gates: Vec<f64>,
    /// Cell states, `batch·steps × n`.
    c: Vec<f64>,
    /// Hidden outputs at their sequence positions, `batch·steps × n`.
    pub s: Vec<f64>,
    in_mask: Option<Vec<f64>>,
    rec_mask: Option<Vec<f64>>,
}

impl LstmParams {
    /// Run the cell over `batch` sequences of `steps` inputs laid out as
    /// `batch·steps × m`. Masks are per sequence (`batch × m`, `batch × n`)
    /// and shared by every step.
    pub fn forward_seq(
        &self,
        x: &[f64],
        batch: usize,
        steps: usize,
        dir: Direction,
        in_mask: Option<&[f64]>,
        rec_mask: Option<&[f64]>,
    ) -> Result<LstmCache> {
        let (n, m) = (self.n, self.m);
        let rows = batch * steps;
        if x.len() != rows * m {
            return Err(Error::shape(format!("LSTM input of {} values, expected {rows}×{m}", x.len())));
        }
        if in_mask.is_some_and(|mk| mk.len() != batch * m) || rec_mask.is_some_and(|mk| mk.len() != batch * n) {
            return Err(Error::shape("dropout mask shape"));
        }
        let xm: Vec<f64> = match in_mask {
            Some(mk) => x
                .chunks_exact(m)
                .enumerate()
                .flat_map(|(r, row)| row.iter().zip(&mk[(r / steps) * m..(r / steps + 1) * m]).map(|(a, b)| a * b))
                .collect(),
            None => x.to_vec(),
        };
        let g4 = 4 * n;
        let mut zin = vec![0.0; rows * g4];
        gemm(rows, m, g4, 1.0, &xm, false, &self.w.data, true, 0.0, &mut zin);

        let mut gates = vec![0.0; rows * g4];
        let mut c = vec![0.0; rows * n];
        let mut s = vec![0.0; rows * n];
        let mut s_prev = vec![0.0; batch * n];
        let mut c_prev = vec![0.0; batch * n];
        let mut z = vec![0.0; batch * g4];
        for step in 0..steps {
            let p = dir.position(step, steps);
            for bi in 0..batch {
                let r = bi * steps + p;
                for (zj, (zi, bj)) in z[bi * g4..(bi + 1) * g4]
                    .iter_mut()
                    .zip(zin[r * g4..(r + 1) * g4].iter().zip(&self.b.data))
                {
                    *zj = zi + bj;
                }
            }
            if step > 0 {
                if let Some(mk) = rec_mask {
                    s_prev.iter_mut().zip(mk).for_each(|(a, b)| *a *= b);
                }
                gemm(batch, n, g4, 1.0, &s_prev, false, &self.v.data, true, 1.0, &mut z);
            }
            for bi in 0..batch {
                let r = bi * steps + p;
                let zr = &z[bi * g4..(bi + 1) * g4];
                let gr = &mut gates[r * g4..(r + 1) * g4];
                for j in 0..g4 {
                    gr[j] = if j / n == GATE_C { zr[j].tanh() } else { sigmoid(zr[j]) };
                }
                for j in 0..n {
                    let cj = gr[GATE_F * n + j] * c_prev[bi * n + j] + gr[GATE_I * n + j] * gr[GATE_C * n + j];
                    let sj = gr[GATE_O * n + j] * cj.tanh();
                    c[r * n + j] = cj;
                    s[r * n + j] = sj;
                    c_prev[bi * n + j] = cj;
                    s_prev[bi * n + j] = sj;
                }
            }
        }
        Ok(LstmCache {
            batch,
            steps,
            dir,
            xm,
            gates,
            c,
            s,
            in_mask: in_mask.map(<[f64]>::to_vec),
            rec_mask: rec_mask.map(<[f64]>::to_vec),
        })
    }

    /// Backpropagate `ds` (gradient w.r.t. every output, `batch·steps × n`)
    /// through time. Parameter gradients are added to `grads`; the input
    /// gradient is returned.
    pub fn backward_seq(&self, cache: &LstmCache, ds: &[f64], grads: &mut LstmParams) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let (batch, steps, dir) = (cache.batch, cache.steps, cache.dir);
        let rows = batch * steps;
        let g4 = 4 * n;
        debug_assert_eq!(ds.len(), rows * n);

        let mut dz_all = vec![0.0; rows * g4];
        let mut dz = vec![0.0; batch * g4];
        let mut dh_rec = vec![0.0; batch * n];
        let mut dc_next = vec![0.0; batch * n];
        for step in (0..steps).rev() {
            let p = dir.position(step, steps);
            for bi in 0..batch {
                let r = bi * steps + p;
                let g = &cache.gates[r * g4..(r + 1) * g4];
                let prev = (step > 0).then(|| bi * steps + dir.position(step - 1, steps));
                let dzr = &mut dz[bi * g4..(bi + 1) * g4];
                for j in 0..n {
                    let (f, i, o, cc) = (g[GATE_F * n + j], g[GATE_I * n + j], g[GATE_O * n + j], g[GATE_C * n + j]);
                    let c_prev = prev.map_or(0.0, |q| cache.c[q * n + j]);
                    let tc = cache.c[r * n + j].tanh();
                    let dsj = ds[r * n + j] + dh_rec[bi * n + j];
                    let dc = dc_next[bi * n + j] + dsj * o * (1.0 - tc * tc);
                    dzr[GATE_F * n + j] = dc * c_prev * f * (1.0 - f);
                    dzr[GATE_I * n + j] = dc * cc * i * (1.0 - i);
                    dzr[GATE_O * n + j] = dsj * tc * o * (1.0 - o);
                    dzr[GATE_C * n + j] = dc * i * (1.0 - cc * cc);
                    dc_next[bi * n + j] = dc * f;
                }
                dz_all[r * g4..(r + 1) * g4].copy_from_slice(dzr);
            }
            if step > 0 {
                gemm(batch, g4, n, 1.0, &dz, false, &self.v.data, false, 0.0, &mut dh_rec);
                if let Some(mk) = &cache.rec_mask {
                    dh_rec.iter_mut().zip(mk).for_each(|(a, b)| *a *= b);
                }
            }
        }

        // masked previous state feeding each position's recurrent product
        let mut s_prev = vec![0.0; rows * n];
        for bi in 0..batch {
            for step in 1..steps {
                let r = bi * steps + dir.position(step, steps);
                let q = bi * steps + dir.position(step - 1, steps);
                for j in 0..n {
                    let mk = cache.rec_mask.as_ref().map_or(1.0, |mk| mk[bi * n + j]);
                    s_prev[r * n + j] = cache.s[q * n + j] * mk;
                }
            }
        }
        gemm(g4, rows, n, 1.0, &dz_all, true, &s_prev, false, 1.0, &mut grads.v.data);
        gemm(g4, rows, m, 1.0, &dz_all, true, &cache.xm, false, 1.0, &mut grads.w.data);
        for row in dz_all.chunks_exact(g4) {
            for (gb, d) in grads.b.data.iter_mut().zip(row) {
                *gb += d;
            }
        }
        let mut dx = vec![0.0; rows * m];
        gemm(rows, g4, m, 1.0, &dz_all, false, &self.w.data, false, 0.0, &mut dx);
        if let Some(mk) = &cache.in_mask {
            for (r, row) in dx.chunks_exact_mut(m).enumerate() {
                let bi = r / steps;
                row.iter_mut().zip(&mk[bi * m..(bi + 1) * m]).for_each(|(a, b)| *a *= b);
            }
        }
        dx
    }
}

/// Forward and backward LSTMs whose outputs are concatenated per step.
#[derive(Clone, PartialEq, Debug)]
pub struct BiLstm {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// Per-sequence dropout masks for one bidirectional layer:
/// `[fwd input, fwd recurrent, bwd input, bwd recurrent]`.
pub type BiMasks = [Vec<f64>; 4];

impl BiLstm {
    pub fn init(n: usize, m: usize, rng: &mut impl Rng) -> Self {
        let fwd = LstmParams::init(n, m, rng);
        let bwd = LstmParams::init(n, m, rng);
        Self { fwd, bwd }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            fwd: LstmParams::zeros(n, m),
            bwd: LstmParams::zeros(n, m),
        }
    }

    pub fn n(&self) -> usize {
        self.fwd.n
    }

    /// Output `batch·steps × 2n`.
    pub fn forward(
        &self,
        x: &[f64],
        batch: usize,
        steps: usize,
        masks: Option<&BiMasks>,
    ) -> Result<(Vec<f64>, (LstmCache, LstmCache))> {
        let mk = |i: usize| masks.map(|m| m[i].as_slice());
        let f = self.fwd.forward_seq(x, batch, steps, Direction::Forward, mk(0), mk(1))?;
        let b = self.bwd.forward_seq(x, batch, steps, Direction::Backward, mk(2), mk(3))?;
        let n = self.n();
        let mut out = Vec::with_capacity(batch * steps * 2 * n);
        for (sf, sb) in f.s.chunks_exact(n).zip(b.s.chunks_exact(n)) {
            out.extend_from_slice(sf);
            out.extend_from_slice(sb);
        }
        Ok((out, (f, b)))
    }

    pub fn backward(&self, cache: &(LstmCache, LstmCache), dout: &[f64], grads: &mut BiLstm) -> Vec<f64> {
        let n = self.n();
        let mut dsf = Vec::with_capacity(dout.len() / 2);
        let mut dsb = Vec::with_capacity(dout.len() / 2);
        for row in dout.chunks_exact(2 * n) {
            dsf.extend_from_slice(&row[..n]);
            dsb.extend_from_slice(&row[n..]);
        }
        let mut dx = self.fwd.backward_seq(&cache.0, &dsf, &mut grads.fwd);
        let dxb = self.bwd.backward_seq(&cache.1, &dsb, &mut grads.bwd);
        dx.iter_mut().zip(dxb).for_each(|(a, b)| *a += b);
        dx
    }
}
