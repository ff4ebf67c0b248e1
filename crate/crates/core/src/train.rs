//! Training loop, evaluation metrics and the seen/unseen-Q experiment.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::features::{extract_histograms, FeatureRecord};
use crate::model::{HqBatch, Model, ModelConfig};
use crate::nn::{bce_loss, AdamConfig, AdamState, BnMode};

/// Score at or above which a patch is called double-compressed.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Last epoch covered by the learning-rate staircase.
pub const MAX_EPOCHS: u32 = 30;

/// Learning rate of a 1-based epoch.
pub fn lr_schedule(epoch: u32) -> Result<f64> {
    Ok(match epoch {
        1..=10 => 1e-3,
        11..=15 => 5e-4,
        16..=20 => 1e-4,
        21..=25 => 5e-5,
        26..=30 => 1e-5,
        _ => return Err(Error::domain(format!("no learning rate for epoch {epoch}; epochs run 1..={MAX_EPOCHS}"))),
    })
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    /// Examples per gradient work unit. Fixed so that results do not
    /// depend on the number of threads.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 64,
            seed: 0,
            chunk: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::Config(format!("epochs {} outside 1..={MAX_EPOCHS}", self.epochs)));
        }
        if self.batch_size == 0 || self.chunk == 0 {
            return Err(Error::Config("batch size and chunk must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    /// Parameters after the epoch with the highest validation accuracy.
    pub model: Model,
    pub best_epoch: u32,
    pub log: Vec<EpochLog>,
}

fn batch_of(records: &[&FeatureRecord], config: &ModelConfig) -> Result<(HqBatch, Vec<f64>)> {
    let batch = HqBatch::from_records(records, config)?;
    let targets = records.iter().map(|r| f64::from(r.label)).collect();
    Ok((batch, targets))
}

/// Scores of `records` under `model` in inference mode.
pub fn predict_records(model: &Model, records: &[FeatureRecord], chunk: usize) -> Result<Vec<f64>> {
    // bounded memory: assemble and score a slice at a time
    let step = chunk.max(1) * 32;
    let mut scores = Vec::with_capacity(records.len());
    for part in records.chunks(step) {
        let refs: Vec<&FeatureRecord> = part.iter().collect();
        let batch = HqBatch::from_records(&refs, &model.config)?;
        scores.extend(model.predict(&batch, chunk)?);
    }
    Ok(scores)
}

fn accuracy(scores: &[f64], records: &[FeatureRecord]) -> f64 {
    let hits = scores
        .iter()
        .zip(records)
        .filter(|(s, r)| (**s >= DEFAULT_THRESHOLD) == (r.label == 1))
        .count();
    hits as f64 / records.len().max(1) as f64
}

/// Train with Adam and the learning-rate staircase, shuffling every epoch
/// and keeping the parameters of the best validation epoch (the earliest
/// one on ties). `on_epoch` sees each log line as it is produced.
pub fn train(
    train_set: &[FeatureRecord],
    val_set: &[FeatureRecord],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::build(model_config, &mut rng)?;
    let mut adam = AdamState::new(model.params(), AdamConfig::default());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, u32, Model)> = None;
    let mut log = Vec::with_capacity(config.epochs as usize);

    for epoch in 1..=config.epochs {
        let lr = lr_schedule(epoch)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let records: Vec<&FeatureRecord> = idx.iter().map(|&i| &train_set[i]).collect();
            let (batch, targets) = batch_of(&records, model_config)?;
            let masks: Vec<_> = (0..batch.len).map(|_| model.sample_masks(&mut rng)).collect();
            let out = model.loss_and_grads(&batch, &targets, BnMode::Train, Some(&masks), config.chunk)?;
            loss_sum += out.loss * batch.len as f64;
            hits += out
                .probs
                .iter()
                .zip(&targets)
                .filter(|(p, t)| (**p >= DEFAULT_THRESHOLD) == (**t == 1.0))
                .count();
            adam.step(&mut model.params_mut(), &out.grads.params(), lr)?;
            if let Some(stats) = &out.bn_stats {
                model.update_bn_running(stats);
            }
        }
        for p in model.params() {
            p.check_finite("parameter")?;
        }
        let scores = predict_records(&model, val_set, config.chunk)?;
        let targets: Vec<f64> = val_set.iter().map(|r| f64::from(r.label)).collect();
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: hits as f64 / train_set.len() as f64,
            val_loss: bce_loss(&scores, &targets),
            val_accuracy: accuracy(&scores, val_set),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            entry.train_loss,
            entry.train_accuracy,
            entry.val_loss,
            entry.val_accuracy
        );
        on_epoch(&entry);
        if best.as_ref().is_none_or(|(acc, _, _)| entry.val_accuracy > *acc) {
            best = Some((entry.val_accuracy, epoch, model.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best_epoch, log })
}

/// Copy of `records` with labels shuffled among them, for the
/// null-separability control.
pub fn permute_labels(records: &[FeatureRecord], seed: u64) -> Vec<FeatureRecord> {
    let mut labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    records
        .iter()
        .zip(labels)
        .map(|(r, label)| FeatureRecord { label, ..r.clone() })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// Double compression is the positive class; `score ≥ threshold` is
    /// a positive call.
    pub fn from_scores(scores: &[f64], positive: &[bool], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &p) in scores.iter().zip(positive) {
            match (s >= threshold, p) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value are called positive.
    pub threshold: f64,
}

/// ROC curve over every distinct score, from (0, 0) at an infinite
/// threshold to (1, 1), and its trapezoidal area.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if positive[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok((points, auc))
}

pub fn write_roc_csv(points: &[RocPoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "fpr,tpr,threshold")?;
    for p in points {
        writeln!(w, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    Ok(())
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub threshold: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
    /// Absent when the split holds a single class.
    pub auc: Option<f64>,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

impl EvalReport {
    pub fn from_scores(split: &str, scores: &[f64], positive: &[bool], threshold: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptySplit(split.into()));
        }
        let confusion = Confusion::from_scores(scores, positive, threshold);
        let (roc, auc) = match roc_auc(scores, positive) {
            Ok((roc, auc)) => (roc, Some(auc)),
            Err(Error::DegenerateLabels) => (Vec::new(), None),
            Err(e) => return Err(e),
        };
        Ok(Self {
            split: split.into(),
            threshold,
            confusion,
            tpr: confusion.tpr(),
            tnr: confusion.tnr(),
            accuracy: confusion.accuracy(),
            auc,
            roc,
        })
    }
}

/// Score `records` and summarize them.
pub fn evaluate(model: &Model, records: &[FeatureRecord], split: &str, threshold: f64) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptySplit(split.into()));
    }
    let scores = predict_records(model, records, 8)?;
    let positive: Vec<bool> = records.iter().map(|r| r.label == 1).collect();
    EvalReport::from_scores(split, &scores, &positive, threshold)
}

/// Histogram features of every patch in one split of a dataset.
pub fn split_features(manifest: &DatasetManifest, dir: &Path, split: Split, b: usize) -> Result<Vec<FeatureRecord>> {
    let records: Vec<_> = manifest.split(split).collect();
    records
        .par_iter()
        .map(|r| {
            let plane = manifest.load_plane(dir, r)?;
            Ok(FeatureRecord {
                label: u8::from(r.label == Label::Double),
                hist: extract_histograms(&plane, b)?,
                q: *r.final_q(),
            })
        })
        .collect()
}

/// Fail unless no `test_unseen` patch ends with a matrix that any
/// training, validation or seen-Q test patch used.
pub fn assert_unseen_disjoint(manifest: &DatasetManifest) -> Result<()> {
    let seen: HashSet<_> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::TestUnseen)
        .flat_map(|r| std::iter::once(&r.q1).chain(r.q2.as_ref()))
        .chain(&manifest.header.seen_pool)
        .collect();
    if let Some(r) = manifest.split(Split::TestUnseen).find(|r| seen.contains(r.final_q())) {
        return Err(Error::Format(format!("unseen-Q patch {} reuses a seen matrix", r.id)));
    }
    Ok(())
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub best_epoch: u32,
    pub log: Vec<EpochLog>,
    pub seen: EvalReport,
    pub unseen: Option<EvalReport>,
    /// Unseen minus seen accuracy.
    pub unseen_delta: Option<f64>,
}

/// Train once on a dataset directory, then evaluate on the seen-Q test
/// split and, when present, the unseen-Q split.
pub fn run_experiment(
    dir: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Model, ExperimentReport)> {
    let manifest = DatasetManifest::load(dir)?;
    manifest.verify()?;
    let has_unseen = manifest.split(Split::TestUnseen).next().is_some();
    if has_unseen {
        assert_unseen_disjoint(&manifest)?;
    }
    let b = model_config.b;
    let train_set = split_features(&manifest, dir, Split::Train, b)?;
    let val_set = split_features(&manifest, dir, Split::Val, b)?;
    let outcome = train(&train_set, &val_set, model_config, train_config, |_| {})?;
    let test_set = split_features(&manifest, dir, Split::Test, b)?;
    let seen = evaluate(&outcome.model, &test_set, "test", DEFAULT_THRESHOLD)?;
    let unseen = if has_unseen {
        let set = split_features(&manifest, dir, Split::TestUnseen, b)?;
        Some(evaluate(&outcome.model, &set, "test_unseen", DEFAULT_THRESHOLD)?)
    } else {
        None
    };
    let unseen_delta = unseen.as_ref().map(|u| u.accuracy - seen.accuracy);
    Ok((
        outcome.model,
        ExperimentReport {
            best_epoch: outcome.best_epoch,
            log: outcome.log,
            seen,
            unseen,
            unseen_delta,
        },
    ))
}
