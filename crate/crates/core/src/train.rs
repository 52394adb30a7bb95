//! Deterministic training and evaluation: cross-entropy, AdamW with a
//! per-step cosine schedule, seeded shuffling, best-validation-epoch
//! checkpointing, and best-of-k run selection.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MagDataset;
use crate::defaults;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::optim::{cosine_lr, AdamW, OptimConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    pub seed: u64,
    /// Stop after this many epochs without a validation-accuracy improvement.
    pub early_stop_patience: Option<usize>,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_acc: Option<f64>,
    /// Zeroes recorded wall time so serialized records are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: defaults::EPOCHS,
            batch_size: defaults::BATCH_SIZE,
            optimizer: OptimConfig::default(),
            seed: 0,
            early_stop_patience: Some(defaults::EARLY_STOP_PATIENCE),
            target_val_acc: None,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > defaults::MAX_EPOCHS {
            return Err(Error::config(
                "epochs",
                format!("{} exceeds the {} cap", self.epochs, defaults::MAX_EPOCHS),
            ));
        }
        if self.batch_size == 0 || self.batch_size > defaults::MAX_BATCH_SIZE {
            return Err(Error::config(
                "batch_size",
                format!("{} outside 1..={}", self.batch_size, defaults::MAX_BATCH_SIZE),
            ));
        }
        if let Some(t) = self.target_val_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("target_val_acc", "must lie in [0,1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    /// (correct, total) per class id.
    pub per_class: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub defaults_version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub history: Vec<EpochStat>,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub early_stopped_at: Option<usize>,
    pub final_test: Option<EvalResult>,
    pub wall_time_secs: f64,
    pub checkpoint_path: Option<String>,
    pub dataset_fingerprint: Option<String>,
}

/// Trains and returns the weights of the best-validation epoch (the final
/// epoch when no validation set is given). Seeded end to end: the same seed
/// reproduces the run bit-identically in single-threaded mode.
pub fn train(
    mut model: Model,
    train_set: &MagDataset,
    val_set: &MagDataset,
    cfg: &TrainConfig,
) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty { what: "training set".into() });
    }
    let has_val = !val_set.is_empty();
    if !has_val && (cfg.early_stop_patience.is_some() || cfg.target_val_acc.is_some()) {
        return Err(Error::config(
            "early_stop_patience",
            "early stopping requested but the validation set is empty",
        ));
    }

    let started = Instant::now();
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::<f32>::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0usize;
    let mut early_stopped_at = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = train_set.stack(chunk)?;
            let lr = cosine_lr(cfg.optimizer.lr, global_step, total_steps);
            let mut fwd = model.forward_taped(&batch, true)?;
            let loss_var = fwd.tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let loss = fwd.tape.value(loss_var).item() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch} step {global_step}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = fwd.tape.backward(loss_var)?;
            let gvec: Vec<Option<&Tensor<f32>>> = fwd.leaves.iter().map(|&v| grads.get(v)).collect();
            let mut params = model.param_tensors_mut();
            opt.step(&mut params, &gvec, lr).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} at epoch {epoch} step {global_step}"),
                },
                other => other,
            })?;
            global_step += 1;
        }
        let train_loss = loss_sum / n as f64;

        let val_acc = if has_val {
            let acc = evaluate(&mut model, val_set, cfg.batch_size)?.top1;
            let improved = best.as_ref().map_or(true, |(b, _, _)| acc > *b);
            if improved {
                best = Some((acc, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            Some(acc)
        } else {
            None
        };
        history.push(EpochStat { epoch, train_loss, val_acc });

        if let Some(target) = cfg.target_val_acc {
            if val_acc.is_some_and(|a| a >= target) {
                early_stopped_at = Some(epoch);
                break;
            }
        }
        if let Some(patience) = cfg.early_stop_patience {
            if since_best >= patience {
                early_stopped_at = Some(epoch);
                break;
            }
        }
    }

    let (best_val_acc, best_epoch) = match &best {
        Some((acc, epoch, _)) => (Some(*acc), Some(*epoch)),
        None => (None, None),
    };
    if let Some((_, _, snapshot)) = best {
        model = snapshot;
    }
    let record = RunRecord {
        defaults_version: defaults::DEFAULTS_VERSION.to_string(),
        model: model.config.clone(),
        train: cfg.clone(),
        seed: cfg.seed,
        history,
        best_val_acc,
        best_epoch,
        early_stopped_at,
        final_test: None,
        wall_time_secs: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        checkpoint_path: None,
        dataset_fingerprint: None,
    };
    Ok((model, record))
}

/// Top-1 accuracy in eval mode. Ties in logits resolve to the lowest class
/// index; the result is invariant to `batch_size`.
pub fn evaluate(model: &mut Model, test_set: &MagDataset, batch_size: usize) -> Result<EvalResult> {
    if test_set.is_empty() {
        return Err(Error::Empty { what: "evaluation set".into() });
    }
    let classes = test_set.class_names.len();
    let mut per_class = vec![(0usize, 0usize); classes];
    let indices: Vec<usize> = (0..test_set.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = test_set.stack(chunk)?;
        let logits = model.forward(&batch, false)?;
        let k = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            let data = &logits.data()[row * k..(row + 1) * k];
            let mut arg = 0usize;
            for (j, &v) in data.iter().enumerate() {
                if v > data[arg] {
                    arg = j;
                }
            }
            per_class[label].1 += 1;
            if arg == label {
                per_class[label].0 += 1;
                correct += 1;
            }
        }
    }
    Ok(EvalResult { top1: correct as f64 / test_set.len() as f64, per_class })
}

/// Runs one full training per seed and keeps the record with the highest
/// test accuracy; ties break toward higher final validation accuracy, then
/// the lower seed.
pub fn best_of_runs(
    arch: &ModelConfig,
    train_set: &MagDataset,
    val_set: &MagDataset,
    test_set: &MagDataset,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<(Model, RunRecord)> {
    if seeds.is_empty() {
        return Err(Error::Empty { what: "seed list".into() });
    }
    let mut winner: Option<(Model, RunRecord)> = None;
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let model = Model::build(arch.clone(), seed)?;
        let (mut model, mut record) = train(model, train_set, val_set, &cfg).map_err(|e| match e {
            Error::NonFinite { context } => {
                Error::NonFinite { context: format!("run seed {seed}: {context}") }
            }
            other => other,
        })?;
        record.final_test = Some(evaluate(&mut model, test_set, cfg.batch_size)?);
        let better = match &winner {
            None => true,
            Some((_, cur)) => outranks(&record, cur),
        };
        if better {
            winner = Some((model, record));
        }
    }
    Ok(winner.expect("at least one seed"))
}

/// True when `a` beats `b`: higher test accuracy, then higher validation
/// accuracy, then the lower seed.
pub fn outranks(a: &RunRecord, b: &RunRecord) -> bool {
    let (ka, kb) = (rank_key(a), rank_key(b));
    ka.0 > kb.0 || (ka.0 == kb.0 && (ka.1 > kb.1 || (ka.1 == kb.1 && a.seed < b.seed)))
}

/// Index of the winning record under the same ordering, None when empty.
pub fn pick_best(records: &[RunRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        match best {
            Some(b) if !outranks(r, &records[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

fn rank_key(r: &RunRecord) -> (f64, f64) {
    (
        r.final_test.as_ref().map_or(f64::NEG_INFINITY, |t| t.top1),
        r.best_val_acc.or(r.history.last().and_then(|h| h.val_acc)).unwrap_or(f64::NEG_INFINITY),
    )
}

pub fn save_run_record(path: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_run_record(path: impl AsRef<Path>) -> Result<RunRecord> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Json { path: path.display().to_string(), source: e })
}

/// History as CSV: epoch, train_loss, val_top1 (blank when no validation).
pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochStat]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,train_loss,val_top1\n");
    for h in history {
        let val = h.val_acc.map_or(String::new(), |v| format!("{v:.6}"));
        out.push_str(&format!("{},{:.6},{}\n", h.epoch, h.train_loss, val));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
