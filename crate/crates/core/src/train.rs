//! Fine-tuning and pretraining loops, evaluation, and model selection.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{example_gradients, forward, make_pretrain_input, pretrain_gradients, Example, ModelParams};
use crate::numerics::{AdamW, AdamWConfig, AdamWState, Mode, Prng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub dropout: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            steps: 20000,
            batch: 8,
            dropout: 0.1,
            eval_every: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train config: lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("train config: betas must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("train config: weight decay must be nonnegative"));
        }
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 {
            return Err(Error::invalid("train config: steps, batch and eval_every must be positive"));
        }
        if self.eval_every > self.steps {
            return Err(Error::invalid("train config: eval_every exceeds steps"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("train config: dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted_positive: bool, label: u8) {
        match (predicted_positive, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// `(correct, total)` as exact integers.
    pub fn accuracy_ratio(&self) -> (u64, u64) {
        (self.tp + self.tn, self.total())
    }
}

/// `(TP + TN) / (TP + FP + FN + TN)`
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let (correct, total) = cm.accuracy_ratio();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    Ok(correct as f64 / total as f64)
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
}

/// Per-sample `p(correct)` in input order, computed in inference mode.
pub fn predict_all(params: &ModelParams<f32>, examples: &[Example]) -> Result<Vec<[f64; 2]>> {
    examples
        .par_iter()
        .map(|e| forward(params, e, Mode::Infer, &mut Prng::new(0)).map(|p| p.p))
        .collect()
}

/// Predicts positive iff `p(correct) >= threshold`.
pub fn evaluate(params: &ModelParams<f32>, examples: &[Example], threshold: f64) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let probs = predict_all(params, examples)?;
    Ok(evaluation_from(&probs, examples.iter().map(|e| e.sample.label), threshold))
}

pub fn evaluation_from(probs: &[[f64; 2]], labels: impl IntoIterator<Item = u8>, threshold: f64) -> Evaluation {
    let mut cm = ConfusionMatrix::default();
    for (p, y) in probs.iter().zip(labels) {
        cm.record(p[1] >= threshold, y);
    }
    let accuracy = accuracy(&cm).unwrap_or(0.0);
    Evaluation { confusion: cm, accuracy }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean batch-summed loss over the steps since the previous record.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub val_confusion: ConfusionMatrix,
    pub test_confusion: ConfusionMatrix,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|source| Error::Json {
                context: "train log".into(),
                source,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| Error::Json {
                    context: format!("train log line {}", i + 1),
                    source,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }
}

/// The record with maximal validation accuracy; ties go to the earliest step.
pub fn select_final(log: &TrainLog) -> Result<&EvalRecord> {
    let mut best: Option<&EvalRecord> = None;
    for r in &log.records {
        if best.is_none_or(|b| r.val_accuracy > b.val_accuracy) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::invalid("train log is empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_step: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub confusion: ConfusionMatrix,
}

pub fn summarize(log: &TrainLog) -> Result<Summary> {
    let r = select_final(log)?;
    Ok(Summary {
        best_step: r.step,
        val_acc: r.val_accuracy,
        test_acc: r.test_accuracy,
        confusion: r.test_confusion,
    })
}

/// Batch order: consecutive slices of a stream of epoch permutations, each
/// epoch shuffled with its own seed. The batch at a step depends only on
/// `(seed, step)`, so a resumed run sees the same data as a straight one.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    n: usize,
    batch: usize,
    base: Prng,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::invalid("batch schedule needs samples and a positive batch size"));
        }
        Ok(BatchSchedule { n, batch, base: Prng::new(seed).split(0xBA7C), cached: None })
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            self.base.split(epoch as u64).shuffle(&mut perm);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// Sample indices for zero-based step `step`.
    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        (0..self.batch)
            .map(|j| {
                let g = step * self.batch + j;
                let n = self.n;
                self.permutation(g / n)[g % n]
            })
            .collect()
    }
}

fn dropout_stream(seed: u64, step: usize) -> Prng {
    Prng::new(seed).split(0xD20F).split(step as u64)
}

/// Sums per-sample gradients in batch order and applies one optimizer step.
fn apply_batch(
    params: &mut ModelParams<f32>,
    optimizer: &mut AdamW<f32>,
    results: Vec<(f64, Vec<Tensor<f32>>)>,
    step: usize,
) -> Result<f64> {
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<f32>>> = None;
    for (l, grads) in results {
        loss += l;
        match total.as_mut() {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    if !loss.is_finite() || !total.iter().all(Tensor::is_finite) {
        return Err(Error::Diverged { step });
    }
    optimizer.step(params.store.tensors_mut(), &total)?;
    if !params.store.tensors().iter().all(Tensor::is_finite) {
        return Err(Error::Diverged { step });
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [Example],
    pub validation: &'a [Example],
    pub test: &'a [Example],
}

/// Parameters, optimizer state and the steps completed so far.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optimizer: AdamWState<f32>,
    pub step: usize,
    pub log: TrainLog,
}

impl TrainState {
    pub fn fresh(params: ModelParams<f32>) -> Self {
        let optimizer = AdamWState::for_params(params.store.tensors());
        TrainState { params, optimizer, step: 0, log: TrainLog::default() }
    }

    /// Continues from a checkpoint; `log` holds the records written before it.
    pub fn resume(checkpoint: Checkpoint, log: TrainLog) -> Result<Self> {
        let step = checkpoint.step as usize;
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| Error::CheckpointFormat("checkpoint has no optimizer state to resume from".into()))?;
        let log = TrainLog { records: log.records.into_iter().filter(|r| r.step <= step).collect() };
        Ok(TrainState { params: checkpoint.params, optimizer, step, log })
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

fn checkpoint_name(step: usize) -> String {
    format!("checkpoints/step-{step:06}.ckpt")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

/// Fine-tunes until `config.steps` steps are complete, evaluating (and, with
/// `out_dir`, checkpointing) every `eval_every` steps. With `out_dir` the log
/// is written as JSONL, the summary as JSON, and the final state as
/// `last.ckpt`.
pub fn train(mut state: TrainState, data: Splits<'_>, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainState> {
    config.validate()?;
    if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
        return Err(Error::invalid("training needs nonempty train, validation and test splits"));
    }
    state.params.config.dropout = config.dropout;
    let mut optimizer = AdamW { config: config.adamw(), state: state.optimizer };
    let mut schedule = BatchSchedule::new(data.train.len(), config.batch, config.seed)?;
    let mut loss_sum = 0.0;
    let mut loss_steps = 0usize;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    }
    while state.step < config.steps {
        let step = state.step;
        let rng = dropout_stream(config.seed, step);
        let batch = schedule.batch(step);
        let params = &state.params;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| example_gradients(params, &data.train[i], Mode::Train, &mut rng.split(j as u64)))
            .collect::<Result<Vec<_>>>()?;
        loss_sum += apply_batch(&mut state.params, &mut optimizer, results, step + 1)?;
        loss_steps += 1;
        state.step += 1;

        if state.step.is_multiple_of(config.eval_every) {
            let val = evaluate(&state.params, data.validation, DEFAULT_THRESHOLD)?;
            let test = evaluate(&state.params, data.test, DEFAULT_THRESHOLD)?;
            let mut checkpoint = None;
            if let Some(dir) = out_dir {
                let name = checkpoint_name(state.step);
                save_checkpoint(&dir.join(&name), &state.params, Some(&optimizer.state), state.step as u64)?;
                checkpoint = Some(name);
            }
            let record = EvalRecord {
                step: state.step,
                train_loss: loss_sum / loss_steps.max(1) as f64,
                val_accuracy: val.accuracy,
                test_accuracy: test.accuracy,
                val_confusion: val.confusion,
                test_confusion: test.confusion,
                checkpoint,
            };
            log::info!(
                "step {}: train loss {:.4}, val acc {:.4}, test acc {:.4}",
                record.step,
                record.train_loss,
                record.val_accuracy,
                record.test_accuracy
            );
            state.log.records.push(record);
            loss_sum = 0.0;
            loss_steps = 0;
            if let Some(dir) = out_dir {
                write_file(&dir.join(LOG_FILE), state.log.to_jsonl()?.as_bytes())?;
            }
        }
    }
    state.optimizer = optimizer.state;
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(LAST_CHECKPOINT), &state.params, Some(&state.optimizer), state.step as u64)?;
        write_file(&dir.join(LOG_FILE), state.log.to_jsonl()?.as_bytes())?;
        if !state.log.records.is_empty() {
            let summary = serde_json::to_string_pretty(&summarize(&state.log)?).map_err(|source| Error::Json {
                context: "summary".into(),
                source,
            })?;
            write_file(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
        }
    }
    Ok(state)
}

/// Path of the checkpoint a record points at, relative to `out_dir`.
pub fn record_checkpoint(out_dir: &Path, record: &EvalRecord) -> Option<PathBuf> {
    record.checkpoint.as_ref().map(|c| out_dir.join(c))
}

/// Masked-language-modelling plus image-text-matching pretraining on the
/// matched (label 1) examples. Returns the mean batch loss of every step.
pub fn pretrain(params: &mut ModelParams<f32>, examples: &[Example], config: &TrainConfig) -> Result<Vec<f64>> {
    let positives: Vec<Example> = examples.iter().filter(|e| e.sample.label == 1).cloned().collect();
    if positives.is_empty() {
        return Err(Error::invalid("pretraining needs at least one matched example"));
    }
    if params.late.is_some() {
        return Err(Error::invalid("pretraining is defined for the early-fusion model only"));
    }
    if config.steps == 0 || config.batch == 0 {
        return Err(Error::invalid("pretraining needs positive steps and batch"));
    }
    params.config.dropout = config.dropout;
    let vocab = params.config.vocab_size;
    let mut optimizer = AdamW::new(config.adamw(), params.store.tensors());
    let mut schedule = BatchSchedule::new(positives.len(), config.batch, config.seed ^ 0x9E7A)?;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let rng = Prng::new(config.seed).split(0x9E7A).split(step as u64);
        let batch = schedule.batch(step);
        let p = &*params;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut r = rng.split(j as u64);
                let input = make_pretrain_input(&positives[i], &positives, vocab, &mut r);
                pretrain_gradients(p, &input, &positives[i].sample, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = apply_batch(params, &mut optimizer, results, step + 1)?;
        if step % 500 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
        losses.push(loss / config.batch as f64);
    }
    Ok(losses)
}
