//! Supervised fine-tuning of the PEFT weights (and optionally the head).

mod optim;
mod task;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, lr_at, AdamState, AdamWConfig};
pub use task::{Example, SyntheticTask, TaskKind};

use crate::error::{LabError, Result};
use crate::model::{trainable_params, ModelConfig, Pooling, TransformerModel};
use crate::numcore::{Gradients, Matrix, Tape, Var};
use crate::peft::AttachedPeft;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Examples per recorded tape; `batch_size / micro_batch` tapes are accumulated per step.
    pub micro_batch: usize,
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub seed: u64,
}

fn default_warmup() -> f64 {
    0.06
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size,
            micro_batch: batch_size,
            epochs,
            warmup_ratio: default_warmup(),
            schedule: Schedule::Linear,
            weight_decay: 0.0,
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            problems.push(format!("warmup_ratio {} must lie in [0, 1)", self.warmup_ratio));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            problems.push("batch_size and micro_batch must be >= 1".into());
        } else if !self.batch_size.is_multiple_of(self.micro_batch) {
            problems.push(format!(
                "micro_batch {} does not divide batch_size {}",
                self.micro_batch, self.batch_size
            ));
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(problems))
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Checks that a task can be fed to a model.
pub fn check_task(model: &ModelConfig, task: &SyntheticTask) -> Result<()> {
    let mut problems = Vec::new();
    if task.vocab_size > model.vocab_size {
        problems.push(format!(
            "task vocab {} exceeds model vocab {}",
            task.vocab_size, model.vocab_size
        ));
    }
    if task.seq_len > model.max_seq_len {
        problems.push(format!(
            "task seq_len {} exceeds max_seq_len {}",
            task.seq_len, model.max_seq_len
        ));
    }
    if task.n_classes != model.n_classes {
        problems.push(format!(
            "task has {} classes, head has {}",
            task.n_classes, model.n_classes
        ));
    }
    let want = match task.kind {
        TaskKind::TokenTagging => Pooling::None,
        TaskKind::SequenceClassification => Pooling::Mean,
    };
    if model.pooling != want {
        problems.push(format!("{:?} needs pooling {:?}", task.kind, want));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(LabError::Config(problems))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Test accuracy, present on the last step of each epoch.
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedRun {
    pub loss_curve: Vec<StepLog>,
    pub epoch_accuracy: Vec<f64>,
    pub init_accuracy: f64,
    pub final_accuracy: f64,
    pub total_steps: usize,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

impl TrainedRun {
    /// `step,lr,loss[,acc]` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,acc\n");
        for s in &self.loss_curve {
            match s.acc {
                Some(a) => out.push_str(&format!("{},{},{},{}\n", s.step, s.lr, s.loss, a)),
                None => out.push_str(&format!("{},{},{},\n", s.step, s.lr, s.loss)),
            }
        }
        out
    }
}

struct MicroBatchGrads {
    loss: f64,
    grads: Gradients,
    leaves: Vec<Vec<Var>>,
}

fn record_micro_batch(
    model: &TransformerModel,
    peft: Option<&AttachedPeft>,
    examples: &[&Example],
    batch_len: usize,
) -> Result<MicroBatchGrads> {
    let mut tape = Tape::new();
    let mut total: Option<Var> = None;
    let mut leaves = Vec::with_capacity(examples.len());
    for ex in examples {
        let rec = model.record(&mut tape, &ex.tokens, peft)?;
        let ce = tape.cross_entropy(rec.logits, &ex.labels)?;
        let scaled = tape.scale(ce, 1.0 / batch_len as f64)?;
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
        leaves.push(rec.trainable);
    }
    let total = total.ok_or_else(|| LabError::Input("empty micro-batch".into()))?;
    let loss = tape.scalar(total);
    let grads = tape.backward(total)?;
    Ok(MicroBatchGrads { loss, grads, leaves })
}

/// Mean cross-entropy over `batch`, with its gradient added into every
/// trainable parameter's buffer. Buffers are not zeroed first.
pub fn accumulate_batch(
    model: &mut TransformerModel,
    mut peft: Option<&mut AttachedPeft>,
    batch: &[&Example],
    micro_batch: usize,
) -> Result<f64> {
    if batch.is_empty() || micro_batch == 0 {
        return Err(LabError::Input("empty batch".into()));
    }
    let mut loss = 0.0;
    for chunk in batch.chunks(micro_batch) {
        let mb = record_micro_batch(model, peft.as_deref(), chunk, batch.len())?;
        loss += mb.loss;
        let mut params = trainable_params(model, peft.as_deref_mut());
        for leaves in &mb.leaves {
            for (p, v) in params.iter_mut().zip(leaves) {
                mb.grads.accumulate_into(*v, p)?;
            }
        }
    }
    Ok(loss)
}

fn zero_grads(model: &mut TransformerModel, peft: Option<&mut AttachedPeft>) {
    for p in trainable_params(model, peft) {
        p.zero_grad();
    }
}

/// Fraction of correctly predicted labels (tokens or sequences).
pub fn evaluate(model: &TransformerModel, peft: Option<&AttachedPeft>, data: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in data {
        let trace = model.forward(&ex.tokens, peft)?;
        for (r, label) in ex.labels.iter().enumerate() {
            if argmax(trace.logits.row(r)) == *label {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(LabError::Input("evaluation on an empty dataset".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Generates the task's splits and trains on them.
pub fn train(
    model: &mut TransformerModel,
    peft: &mut AttachedPeft,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<TrainedRun> {
    check_task(&model.cfg, task)?;
    let (train_set, test_set) = task.splits()?;
    train_on(model, peft, &train_set, &test_set, cfg)
}

pub fn train_on(
    model: &mut TransformerModel,
    peft: &mut AttachedPeft,
    train_set: &[Example],
    test_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainedRun> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(LabError::Input("empty training set".into()));
    }
    let base_before = model.base_checksum();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let adam = cfg.adamw();
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(total_steps);
    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    let init_accuracy = evaluate(model, Some(peft), test_set)?;

    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|i| &train_set[*i]).collect();
            zero_grads(model, Some(peft));
            let loss = accumulate_batch(model, Some(peft), &batch, cfg.micro_batch)
                .map_err(|e| divergence(e, step, &curve))?;
            if !loss.is_finite() {
                return Err(divergence(LabError::NonFinite("loss".into()), step, &curve));
            }
            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_ratio)?;
            let mut params = trainable_params(model, Some(peft));
            adamw_step(&mut params, &mut state, lr, &adam).map_err(|e| divergence(e, step, &curve))?;
            log::debug!("step {step}/{total_steps} lr {lr:.3e} loss {loss:.6}");
            curve.push(StepLog {
                step,
                lr,
                loss,
                acc: None,
            });
        }
        let acc = evaluate(model, Some(peft), test_set)?;
        if let Some(last) = curve.last_mut() {
            last.acc = Some(acc);
        }
        epoch_accuracy.push(acc);
    }

    let base_after = model.base_checksum();
    if base_after != base_before {
        return Err(LabError::Compute(
            "frozen base parameters changed during training".into(),
        ));
    }
    Ok(TrainedRun {
        final_accuracy: epoch_accuracy.last().copied().unwrap_or(init_accuracy),
        loss_curve: curve,
        epoch_accuracy,
        init_accuracy,
        total_steps,
        base_checksum_before: base_before,
        base_checksum_after: base_after,
    })
}

/// Wraps a numerical failure with the step and recent losses.
fn divergence(err: LabError, step: usize, curve: &[StepLog]) -> LabError {
    match err {
        LabError::NonFinite(what) => {
            let recent: Vec<String> = curve
                .iter()
                .rev()
                .take(5)
                .map(|s| format!("step {} lr {:.3e} loss {:.6}", s.step, s.lr, s.loss))
                .collect();
            LabError::Divergence {
                step,
                detail: format!("non-finite {what}; recent: [{}]", recent.join(", ")),
            }
        }
        LabError::Divergence { detail, .. } => LabError::Divergence { step, detail },
        other => other,
    }
}

/// Copies of every trainable matrix, for before/after comparisons.
pub fn snapshot_trainable(model: &mut TransformerModel, peft: Option<&mut AttachedPeft>) -> Vec<Matrix> {
    trainable_params(model, peft).into_iter().map(|m| m.clone()).collect()
}
