//! Adam, the mini-batch objective and the joint training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::WindowedDataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{Gradients, HmresnetModel, ModelInput};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            seed: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".to_string());
        }
        if !(self.lr > 0.0) {
            bad.push("lr must be > 0".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta1 and beta2 must lie in [0, 1)".to_string());
        }
        if !(self.epsilon > 0.0) {
            bad.push("epsilon must be > 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Moment estimates for every parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &BTreeMap<String, Tensor>, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn from_config(params: &BTreeMap<String, Tensor>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    }
}

/// One bias-corrected Adam update, visiting parameters in key order.
pub fn adam_step(params: &mut BTreeMap<String, Tensor>, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (k, p) in params.iter() {
        let g = grads
            .get(k)
            .ok_or_else(|| Error::shape("adam_step", format!("no gradient for {k}")))?;
        let (m, v) = (state.m.get(k), state.v.get(k));
        if g.shape() != p.shape() || m.map(Tensor::shape) != Some(p.shape()) || v.map(Tensor::shape) != Some(p.shape()) {
            return Err(Error::shape("adam_step", format!("{k}: parameter, gradient and moments disagree")));
        }
    }
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (k, p) in params.iter_mut() {
        let g = grads.get(k).expect("checked above").data();
        let m = state.m.get_mut(k).expect("checked above").data_mut();
        let v = state.v.get_mut(k).expect("checked above").data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// A labelled mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: ModelInput,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub accuracy: f64,
    /// Present for train-mode evaluation only.
    pub gradients: Option<Gradients>,
}

/// Mean cross-entropy, batch accuracy and (in train mode) the mean
/// gradient. Train mode also advances the batch-norm running statistics.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &mut HmresnetModel,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<BatchLoss> {
    let k = model.config().class_count;
    if batch.labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.labels.len() != batch.input.batch_size() {
        return Err(Error::shape(
            "batch_loss",
            format!("{} labels for {} windows", batch.labels.len(), batch.input.batch_size()),
        ));
    }
    if let Some((i, &l)) = batch.labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Label {
            index: i,
            label: l,
            classes: k,
        });
    }
    let ctx = model.forward_batch(&batch.input, mode, rng)?;
    let (loss, d_logits) = ctx.loss(&batch.labels)?;
    let correct = ctx
        .predictions()
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    let gradients = match mode {
        Mode::Train => {
            let g = model.backward_logits(&ctx, &d_logits)?;
            model.commit_batch_stats(&ctx);
            Some(g)
        }
        Mode::Infer => None,
    };
    Ok(BatchLoss {
        loss,
        accuracy: correct as f64 / batch.labels.len() as f64,
        gradients,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Line-delimited JSON: a header line with the configuration, then one
    /// line per record. Without `wall_time` the output depends only on the
    /// seed and data.
    pub fn to_jsonl(&self, wall_time: bool) -> String {
        let mut out = serde_json::to_string(&serde_json::json!({ "train_config": self.config }))
            .expect("config serializes");
        out.push('\n');
        for r in &self.records {
            let mut v = serde_json::to_value(r).expect("record serializes");
            if !wall_time {
                v.as_object_mut().expect("record is an object").remove("wall_time_s");
            }
            out.push_str(&serde_json::to_string(&v).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// The log with timing stripped; equal for two runs with the same seed.
    pub fn trajectory(&self) -> Vec<(usize, Split, u64, u64)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.split, r.loss.to_bits(), r.accuracy.to_bits()))
            .collect()
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Mean loss, accuracy and predictions over a dataset in inference mode.
pub fn evaluate(model: &HmresnetModel, data: &WindowedDataset, batch_size: usize) -> Result<(f64, f64, Vec<usize>)> {
    data.check_compatible(model.config())?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let ctx = model.forward_batch(&batch.input, Mode::Infer, &mut rng)?;
        let (l, _) = ctx.loss(&batch.labels)?;
        loss += l * chunk.len() as f64;
        preds.extend(ctx.predictions());
    }
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok((loss / n as f64, correct as f64 / n as f64, preds))
}

/// Jointly trains every feature-level and decision-level parameter with
/// Adam. The callback sees the model after each epoch's records and may
/// stop training early.
pub fn fit(
    model: &mut HmresnetModel,
    train: &WindowedDataset,
    valid: Option<&WindowedDataset>,
    cfg: &TrainConfig,
    mut callback: impl FnMut(&HmresnetModel, &EpochRecord) -> Control,
) -> Result<TrainingLog> {
    cfg.validate()?;
    train.check_compatible(model.config())?;
    if let Some(v) = valid {
        v.check_compatible(model.config())?;
    }
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::from_config(model.params(), cfg);
    let mut log = TrainingLog {
        config: cfg.clone(),
        records: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut correct) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk)?;
            let r = batch_loss(model, &batch, Mode::Train, &mut rng)?;
            adam_step(model.params_mut(), r.gradients.as_ref().expect("train mode"), &mut adam)?;
            loss_sum += r.loss * chunk.len() as f64;
            correct += r.accuracy * chunk.len() as f64;
        }
        let n = train.len() as f64;
        let rec = EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: correct / n,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log.records.push(rec.clone());
        let mut stop = callback(model, &rec) == Control::Stop;
        if let Some(v) = valid {
            let start = Instant::now();
            let (loss, accuracy, _) = evaluate(model, v, cfg.batch_size)?;
            let rec = EpochRecord {
                epoch,
                split: Split::Valid,
                loss,
                accuracy,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            log.records.push(rec.clone());
            stop |= callback(model, &rec) == Control::Stop;
        }
        if stop {
            break;
        }
    }
    Ok(log)
}
