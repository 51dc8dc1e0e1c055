//! Training loop: focal loss over the last output frame of every window,
//! top-K hard-negative mining and per-seed loss curves.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, harvest_negatives, harvest_positive, random_gain, FeatureSequence, Label, Utterance, WindowSample,
};
use crate::error::{Error, Result};
use crate::features::{Mfcc, MfccConfig};
use crate::model::{Architecture, ModelGraph, RepCnnConfig};
use crate::nn::loss::{focal_loss_per_sample, DEFAULT_ALPHA, DEFAULT_GAMMA};
use crate::nn::{BnMode, Optimizer, OptimizerConfig, ParamGrads};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub positives_per_batch: usize,
    pub negatives_per_positive: usize,
    pub top_k: usize,
    pub gamma: f32,
    pub alpha: f32,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// Per-utterance gain drawn uniformly from this dB range every epoch.
    pub gain_db: Option<(f32, f32)>,
    /// Validation loss is computed every `val_every` epochs and on the last.
    pub val_every: usize,
    /// Windows per forward pass when scoring validation data.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            positives_per_batch: 16,
            negatives_per_positive: 20,
            top_k: DEFAULT_TOP_K,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            seeds: vec![0, 1, 2],
            gain_db: Some((-40.0, 10.0)),
            val_every: 1,
            eval_chunk: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.positives_per_batch == 0 || self.negatives_per_positive == 0 {
            return bad("batch composition counts must be positive".into());
        }
        if self.top_k > self.positives_per_batch * self.negatives_per_positive {
            return bad(format!(
                "top_k {} exceeds the {} negatives in a batch",
                self.top_k,
                self.positives_per_batch * self.negatives_per_positive
            ));
        }
        if !(self.gamma >= 0.0) || !(0.0..=1.0).contains(&self.alpha) {
            return bad("focal gamma must be >= 0 and alpha in [0, 1]".into());
        }
        if self.epochs == 0 || self.val_every == 0 || self.eval_chunk == 0 {
            return bad("epochs, val_every and eval_chunk must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Some((lo, hi)) = self.gain_db {
            if !(lo <= hi) {
                return bad(format!("gain range ({lo}, {hi}) is empty"));
            }
        }
        self.optimizer.validate()
    }
}

/// Indices of the `k` largest losses, largest first; equal losses keep index order.
pub fn select_hard_negatives(neg_losses: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..neg_losses.len()).collect();
    idx.sort_by(|&a, &b| neg_losses[b].total_cmp(&neg_losses[a]));
    idx.truncate(k);
    idx
}

/// Windows stacked into one `(N, 16, W)` input.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn from_windows(windows: &[WindowSample]) -> Result<Self> {
        let feats: Vec<Tensor> = windows.iter().map(|w| w.features.clone()).collect();
        Ok(Self {
            inputs: Tensor::stack(&feats)?,
            labels: windows.iter().map(|w| w.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f32,
    pub grads: ParamGrads,
    /// Batch indices of the negatives that contributed.
    pub selected_negatives: Vec<usize>,
    /// Gradient of the loss with respect to each window's logit.
    pub logit_grads: Vec<f32>,
}

/// The last output frame of each window, from `(N, 1, T)` logits.
pub fn last_frame_logits(out: &Tensor) -> Result<Vec<f32>> {
    let (n, c, t) = out.batch_dims()?;
    if c != 1 || t == 0 {
        return Err(Error::Shape(format!("expected (N, 1, T) logits, got {:?}", out.shape())));
    }
    Ok((0..n).map(|i| out.data()[i * t + t - 1]).collect())
}

/// Mean focal loss over all positives and the `top_k` hardest negatives,
/// with positives and negatives sharing one batch-statistics forward pass.
pub fn batch_loss(model: &mut ModelGraph, batch: &Batch, cfg: &TrainConfig) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no windows".into()));
    }
    let (out, tape) = model.forward_train(&batch.inputs)?;
    let logits = last_frame_logits(&out)?;
    let targets: Vec<f32> = batch.labels.iter().map(|l| l.target()).collect();
    let (losses, dlosses) = focal_loss_per_sample(&logits, &targets, cfg.gamma, cfg.alpha)?;

    let neg_idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i] == Label::Negative).collect();
    let neg_losses: Vec<f32> = neg_idx.iter().map(|&i| losses[i]).collect();
    let selected: Vec<usize> = select_hard_negatives(&neg_losses, cfg.top_k)
        .into_iter()
        .map(|j| neg_idx[j])
        .collect();

    let mut active: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i] == Label::Positive).collect();
    active.extend_from_slice(&selected);
    if active.is_empty() {
        return Err(Error::Empty("no positives and no selected negatives".into()));
    }
    let denom = active.len() as f64;
    let loss = (active.iter().map(|&i| losses[i] as f64).sum::<f64>() / denom) as f32;
    let mut logit_grads = vec![0f32; batch.len()];
    for &i in &active {
        logit_grads[i] = (dlosses[i] as f64 / denom) as f32;
    }

    let (n, _, t) = out.batch_dims()?;
    let mut grad_out = Tensor::zeros(out.shape());
    for i in 0..n {
        grad_out.data_mut()[i * t + t - 1] = logit_grads[i];
    }
    let grads = model.backward(&tape, &grad_out)?;
    Ok(BatchLoss {
        loss,
        grads,
        selected_negatives: selected,
        logit_grads,
    })
}

/// Plain mean focal loss in inference mode, evaluated in chunks.
pub fn eval_loss(model: &ModelGraph, windows: &[WindowSample], cfg: &TrainConfig) -> Result<f32> {
    if windows.is_empty() {
        return Err(Error::Empty("no validation windows".into()));
    }
    let mut total = 0f64;
    for chunk in windows.chunks(cfg.eval_chunk) {
        let batch = Batch::from_windows(chunk)?;
        let logits = last_frame_logits(&model.forward_eval(&batch.inputs)?)?;
        let targets: Vec<f32> = batch.labels.iter().map(|l| l.target()).collect();
        let (losses, _) = focal_loss_per_sample(&logits, &targets, cfg.gamma, cfg.alpha)?;
        total += losses.iter().map(|&l| l as f64).sum::<f64>();
    }
    Ok((total / windows.len() as f64) as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f32,
    /// `None` on epochs without validation.
    pub val_loss: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub seed: u64,
    pub epochs: Vec<EpochLoss>,
}

impl LossCurve {
    pub fn final_val_loss(&self) -> Option<f32> {
        self.epochs.iter().rev().find_map(|e| e.val_loss)
    }
}

/// Training and validation utterances. Every utterance must carry a keyword span.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub mfcc: MfccConfig,
}

impl TrainData {
    pub fn new(train: Vec<Utterance>, val: Vec<Utterance>) -> Self {
        Self {
            train,
            val,
            mfcc: MfccConfig::default(),
        }
    }
}

const VAL_HARVEST_SALT: &str = "validation-windows";

fn harvest_one(
    seq: &FeatureSequence,
    window: usize,
    negatives: usize,
    seed: u64,
) -> Result<Vec<WindowSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![harvest_positive(seq, window)?];
    out.extend(harvest_negatives(seq, window, negatives, &mut rng)?);
    Ok(out)
}

/// Fixed validation windows: 1 positive and `negatives` negatives per utterance.
pub fn validation_windows(
    val: &[FeatureSequence],
    window: usize,
    negatives: usize,
    seed: u64,
) -> Result<Vec<WindowSample>> {
    let per: Vec<Vec<WindowSample>> = val
        .par_iter()
        .map(|s| harvest_one(s, window, negatives, derive_seed(seed, &format!("{VAL_HARVEST_SALT}/{}", s.id))))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Trains `model` in place for `cfg.epochs` epochs. The run is a pure function
/// of `(model, data, cfg, seed)`.
pub fn train(mut model: ModelGraph, data: &TrainData, cfg: &TrainConfig, seed: u64) -> Result<(ModelGraph, LossCurve)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    if let Some(u) = data.train.iter().chain(&data.val).find(|u| u.keyword_span.is_none()) {
        return Err(Error::Data(format!("{}: training utterances need a keyword span", u.id)));
    }
    let mfcc = Mfcc::new(data.mfcc.clone())?;
    let window = model.receptive_field();
    let val_seqs = crate::data::featurize(&data.val, &mfcc)?;
    let val_windows = validation_windows(&val_seqs, window, cfg.negatives_per_positive, seed)?;
    let static_train = match cfg.gain_db {
        None => Some(crate::data::featurize(&data.train, &mfcc)?),
        Some(_) => None,
    };

    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut curve = LossCurve { seed, epochs: Vec::new() };
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(seed, &format!("epoch/{epoch}"));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0f64;
        let mut batches = 0usize;
        for (b, ids) in order.chunks(cfg.positives_per_batch).enumerate() {
            let windows: Vec<Vec<WindowSample>> = ids
                .par_iter()
                .map(|&i| {
                    let u = &data.train[i];
                    let useed = derive_seed(epoch_seed, &u.id);
                    let seq = match (&static_train, cfg.gain_db) {
                        (Some(s), _) => s[i].clone(),
                        (None, Some((lo, hi))) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(useed ^ 0x5bd1_e995);
                            let samples = random_gain(&u.samples, lo, hi, &mut rng)?;
                            Utterance::new(u.id.clone(), samples, u.keyword_span).features(&mfcc)?
                        }
                        (None, None) => unreachable!(),
                    };
                    harvest_one(&seq, window, cfg.negatives_per_positive, useed)
                })
                .collect::<Result<_>>()?;
            let windows: Vec<WindowSample> = windows.into_iter().flatten().collect();
            let batch = Batch::from_windows(&windows)?;
            model.set_bn_mode(BnMode::Train);
            let out = batch_loss(&mut model, &batch, cfg)?;
            if !out.loss.is_finite() || out.grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: out.loss,
                });
            }
            optimizer.step(&mut model, &out.grads)?;
            debug!("seed {seed} epoch {epoch} batch {b} loss {:.5}", out.loss);
            loss_sum += out.loss as f64;
            batches += 1;
        }
        model.set_bn_mode(BnMode::Eval);
        let val_loss = if (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs {
            let v = eval_loss(&model, &val_windows, cfg)?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batches,
                    loss: v,
                });
            }
            Some(v)
        } else {
            None
        };
        let train_loss = (loss_sum / batches as f64) as f32;
        info!(
            "seed {seed} epoch {epoch}: train {train_loss:.5} val {}",
            val_loss.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        curve.epochs.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok((model, curve))
}

/// One model per configured seed; each model is initialized from its seed.
pub fn train_seeds(
    arch: Architecture,
    model_cfg: &RepCnnConfig,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<Vec<(ModelGraph, LossCurve)>> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&seed| train(ModelGraph::build(arch, model_cfg, seed)?, data, cfg, seed))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    seed: u64,
    epoch: usize,
    train_loss: f32,
    val_loss: Option<f32>,
}

/// CSV with columns `seed,epoch,train_loss,val_loss`; an empty `val_loss`
/// field marks an epoch without validation.
pub fn export_loss_curves(curves: &[LossCurve], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["seed", "epoch", "train_loss", "val_loss"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for c in curves {
        for e in &c.epochs {
            w.serialize(CurveRow {
                seed: c.seed,
                epoch: e.epoch,
                train_loss: e.train_loss,
                val_loss: e.val_loss,
            })
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_curves(path: &Path) -> Result<Vec<LossCurve>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut curves: Vec<LossCurve> = Vec::new();
    for row in r.deserialize::<CurveRow>() {
        let row = row.map_err(|e| Error::Data(e.to_string()))?;
        let entry = EpochLoss {
            epoch: row.epoch,
            train_loss: row.train_loss,
            val_loss: row.val_loss,
        };
        match curves.last_mut() {
            Some(c) if c.seed == row.seed => c.epochs.push(entry),
            _ => curves.push(LossCurve {
                seed: row.seed,
                epochs: vec![entry],
            }),
        }
    }
    Ok(curves)
}
