use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FreqOrder, AC_COUNT};

/// Front end that turns the two-channel HQ input into one value per
/// frequency and bin.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projector {
    /// Histogram channel only, passed through unchanged.
    None,
    /// `C` per-bin linear projections of (h, q), concatenated with the
    /// input, then BN, ReLU and a 1×1 convolution to one channel.
    #[default]
    Hq,
    /// One 1×1 convolution of (h, q) to one channel, then BN and ReLU.
    SingleConv,
}

impl std::str::FromStr for Projector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Projector::None),
            "hq" => Ok(Projector::Hq),
            "single_conv" => Ok(Projector::SingleConv),
            _ => Err(Error::Config(format!("projector must be none, hq or single_conv; got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Softmax-weighted average over all steps.
    #[default]
    Wam,
    Last,
    First,
    #[serde(rename = "add")]
    AddFirstLast,
    #[serde(rename = "concat")]
    ConcatFirstLast,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wam" => Ok(Pooling::Wam),
            "last" => Ok(Pooling::Last),
            "first" => Ok(Pooling::First),
            "add" => Ok(Pooling::AddFirstLast),
            "concat" => Ok(Pooling::ConcatFirstLast),
            _ => Err(Error::Config(format!("pooling must be wam, last, first, add or concat; got {s:?}"))),
        }
    }
}

/// Architecture hyper-parameters. `depth = 0` is the flattened logistic
/// baseline; `depth ≥ 1` stacks that many BiLSTM layers.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Histograms cover bins `[-b, b]`.
    pub b: usize,
    /// Hidden units per LSTM direction.
    pub n: usize,
    /// Projector filters `C`.
    pub filters: usize,
    pub depth: usize,
    /// Add the first BiLSTM's output to the second's before the third.
    pub residual: bool,
    pub pooling: Pooling,
    pub order: FreqOrder,
    pub projector: Projector,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            b: 80,
            n: 128,
            filters: 16,
            depth: 3,
            residual: true,
            pooling: Pooling::Wam,
            order: FreqOrder::Raster,
            projector: Projector::Hq,
            dropout: 0.1,
            recurrent_dropout: 0.1,
        }
    }
}

/// Parameter totals; BN running statistics count as non-trainable.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub non_trainable: usize,
    pub total: usize,
}

impl ModelConfig {
    pub fn bins(&self) -> usize {
        2 * self.b + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::Config("bin range b must be at least 1".into()));
        }
        if self.depth > 4 {
            return Err(Error::Config(format!("depth {} outside 0..=4", self.depth)));
        }
        if self.depth > 0 && self.n == 0 {
            return Err(Error::Config("hidden size n must be at least 1".into()));
        }
        if self.projector == Projector::Hq && self.filters == 0 {
            return Err(Error::Config("projector needs at least one filter".into()));
        }
        if self.residual && self.depth < 3 {
            return Err(Error::Config("the residual connection needs depth ≥ 3".into()));
        }
        for (name, p) in [("dropout", self.dropout), ("recurrent_dropout", self.recurrent_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector.
    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::ConcatFirstLast => 4 * self.n,
            _ => 2 * self.n,
        }
    }

    /// LSTM input width of layer `l` (0-based).
    pub fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.bins()
        } else {
            2 * self.n
        }
    }

    /// Closed-form parameter count.
    pub fn count_params(&self) -> ParamCount {
        let (mut trainable, non_trainable) = match self.projector {
            Projector::None => (0, 0),
            Projector::Hq => {
                let ch = self.filters + 2;
                (3 * self.filters + 2 * ch + ch + 1, 2 * ch)
            }
            Projector::SingleConv => (3 + 2, 2),
        };
        if self.depth == 0 {
            trainable += AC_COUNT * self.bins() + 1;
        } else {
            let n = self.n;
            for l in 0..self.depth {
                trainable += 2 * 4 * (n * (self.layer_input(l) + n) + n);
            }
            if self.pooling == Pooling::Wam {
                trainable += 2 * n + 1;
            }
            trainable += self.pooled_dim() + 1;
        }
        ParamCount {
            trainable,
            non_trainable,
            total: trainable + non_trainable,
        }
    }

    /// Rows 1–17 of the ablation grid at `b = 80`, `n = 128`.
    pub fn ablation(model: u32) -> Result<Self> {
        let base = Self::default();
        let plain = |depth: usize, residual: bool, projector: Projector| Self {
            depth,
            residual,
            projector,
            ..base
        };
        Ok(match model {
            1 => plain(0, false, Projector::None),
            2 => plain(0, false, Projector::Hq),
            3 => plain(1, false, Projector::None),
            4 => plain(1, false, Projector::Hq),
            5 => plain(2, false, Projector::None),
            6 => plain(2, false, Projector::Hq),
            7 => plain(3, false, Projector::None),
            8 => plain(3, false, Projector::Hq),
            9 => plain(3, true, Projector::None),
            10 => base,
            11 => plain(3, true, Projector::SingleConv),
            12 => Self { filters: 8, ..base },
            13 => Self { filters: 32, ..base },
            14 => plain(4, false, Projector::None),
            15 => plain(4, false, Projector::Hq),
            16 => plain(4, true, Projector::None),
            17 => plain(4, true, Projector::Hq),
            _ => return Err(Error::Config(format!("no ablation row {model}"))),
        })
    }
}
