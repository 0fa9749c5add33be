//! Two-phase training: pre-train the generalist on the full experience
//! dataset, post-train specialists on filtered subsets. Deterministic given
//! the run seed; metrics logged as CSV; best-val and final parameters both
//! retained.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experience::{self, Dataset};
use crate::model::{batch_loss, CheckpointMeta, Model, ModelConfig};
use crate::rng;
use crate::sim::{profile_by_id, HardwareProfile};
use crate::tensor::{adam_step, AdamState, Tape};
use crate::tokenizer::{NormStats, TokenLayout, N_OBS_TOKENS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub grad_clip: f64,
    pub seed: u64,
    /// 0 disables the validation split (train loss doubles as val loss).
    pub val_frac: f64,
    /// Validation / flush cadence in steps ("epoch" for logging purposes).
    pub eval_every: u64,
    /// Sequences per tape; gradients accumulate across micro-batches.
    pub micro_batch: usize,
    /// Early stop after this many evals without val improvement.
    pub patience: Option<u64>,
}

impl RunConfig {
    pub fn pretrain_defaults() -> Self {
        Self {
            batch_size: 32,
            lr: 3e-4,
            warmup_steps: 200,
            max_steps: 3000,
            grad_clip: 1.0,
            seed: 0,
            val_frac: 0.1,
            eval_every: 100,
            micro_batch: 4,
            patience: None,
        }
    }

    pub fn posttrain_defaults() -> Self {
        Self { lr: 1e-4, max_steps: 600, patience: Some(5), ..Self::pretrain_defaults() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Arg("batch_size and micro_batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Arg(format!("val_frac {} out of [0,1)", self.val_frac)));
        }
        if self.eval_every == 0 {
            return Err(Error::Arg("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at max_steps.
pub fn lr_at(cfg: &RunConfig, step: u64) -> f64 {
    if cfg.max_steps == 0 {
        return cfg.lr;
    }
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.max_steps.saturating_sub(cfg.warmup_steps)).max(1) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

/// Scale all gradients so the global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut BTreeMap<String, crate::tensor::Tensor>, clip: f64) -> f64 {
    let mut sq = 0.0;
    for t in params.values() {
        if let Some(g) = &t.grad {
            for v in g {
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm.is_finite() && norm > clip && clip > 0.0 {
        let s = clip / norm;
        for t in params.values_mut() {
            if let Some(g) = &mut t.grad {
                for v in g {
                    *v *= s;
                }
            }
        }
    }
    norm
}

pub struct TrainOutput {
    /// Parameters after the last completed step.
    pub model: Model,
    /// Parameters at the best validation loss.
    pub best_model: Model,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub steps_run: u64,
    /// True if training stopped early on a non-finite loss or gradient.
    pub diverged: bool,
}

fn hardware_index(ds: &Dataset) -> Result<BTreeMap<String, HardwareProfile>> {
    let mut idx = BTreeMap::new();
    for s in &ds.samples {
        if !idx.contains_key(&s.hardware_id) {
            idx.insert(s.hardware_id.clone(), profile_by_id(&s.hardware_id)?);
        }
    }
    Ok(idx)
}

fn uniform_slice_count(ds: &Dataset) -> Result<usize> {
    let s = ds
        .samples
        .first()
        .ok_or_else(|| Error::Arg("dataset is empty".into()))?
        .policy
        .len();
    if ds.samples.iter().any(|x| x.policy.len() != s) {
        return Err(Error::Contract("dataset mixes policy lengths".into()));
    }
    Ok(s)
}

fn mean_loss(
    model: &Model,
    hw_idx: &BTreeMap<String, HardwareProfile>,
    samples: &[&experience::ExperienceSample],
    micro: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(micro) {
        let mut tape = Tape::new();
        let vars = model.leaf_vars(&mut tape);
        let batch: Vec<_> = chunk.iter().map(|s| (&hw_idx[&s.hardware_id], *s)).collect();
        let loss = batch_loss(&mut tape, &vars, &model.config, &model.layout, &batch, None)?;
        total += tape.data(loss)[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

struct MetricsLog {
    w: Option<BufWriter<File>>,
}

impl MetricsLog {
    fn new(path: Option<&Path>) -> Result<Self> {
        let w = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "step,split,loss,lr,grad_norm")?;
                Some(w)
            }
            None => None,
        };
        Ok(Self { w })
    }

    fn row(&mut self, step: u64, split: &str, loss: f64, lr: f64, grad_norm: f64) -> Result<()> {
        if let Some(w) = &mut self.w {
            writeln!(w, "{step},{split},{loss},{lr},{grad_norm}")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.w {
            w.flush()?;
        }
        Ok(())
    }
}

/// The shared optimization loop behind all three training entry points.
pub fn train(
    mut model: Model,
    ds: &Dataset,
    run: &RunConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutput> {
    run.validate()?;
    let hw_idx = hardware_index(ds)?;
    let (train_ds, val_ds) = if run.val_frac > 0.0 {
        experience::split(ds, run.val_frac, rng::child_seed(run.seed, "split"))?
    } else {
        (ds.clone(), ds.clone())
    };
    let train_refs: Vec<&experience::ExperienceSample> = train_ds.samples.iter().collect();
    let val_refs: Vec<&experience::ExperienceSample> = val_ds.samples.iter().collect();
    if train_refs.is_empty() {
        return Err(Error::Arg("training split is empty".into()));
    }
    let mut metrics = MetricsLog::new(metrics_path)?;
    let mut adam = AdamState::new(run.lr);
    let mut batch_rng = rng::stream(run.seed, "batch");
    let mut best_model = model.clone();
    let mut best_val = f64::INFINITY;
    let mut evals_since_best = 0u64;
    let mut final_train_loss = f64::NAN;
    let mut diverged = false;
    let mut steps_run = 0;

    for step in 0..run.max_steps {
        let lr = lr_at(run, step);
        let picks: Vec<&experience::ExperienceSample> = (0..run.batch_size)
            .map(|_| train_refs[batch_rng.gen_range(0..train_refs.len())])
            .collect();
        model.zero_grads();
        let mut step_loss = 0.0;
        let mut bad = false;
        let mut drop_rng = rng::stream(run.seed, &format!("dropout/{step}"));
        for chunk in picks.chunks(run.micro_batch) {
            let mut tape = Tape::new();
            let vars = model.leaf_vars(&mut tape);
            let batch: Vec<_> =
                chunk.iter().map(|s| (&hw_idx[&s.hardware_id], *s)).collect();
            let loss = batch_loss(
                &mut tape,
                &vars,
                &model.config,
                &model.layout,
                &batch,
                Some(&mut drop_rng),
            )?;
            // Weight each micro-batch by its share of the full batch.
            let weighted = tape.scale(loss, chunk.len() as f64 / picks.len() as f64);
            step_loss += tape.data(weighted)[0];
            if !tape.data(weighted)[0].is_finite() {
                bad = true;
                break;
            }
            tape.backward(weighted)?;
            model.absorb_grads(&tape, &vars)?;
        }
        let norm = clip_global_norm(&mut model.params, run.grad_clip);
        if bad || !step_loss.is_finite() || !norm.is_finite() {
            diverged = true;
            break;
        }
        if adam_step(&mut model.params, &mut adam, lr).is_err() {
            diverged = true;
            break;
        }
        steps_run = step + 1;
        final_train_loss = step_loss;
        metrics.row(step, "train", step_loss, lr, norm.min(run.grad_clip))?;
        let last = step + 1 == run.max_steps;
        if (step + 1) % run.eval_every == 0 || last {
            let val = mean_loss(&model, &hw_idx, &val_refs, run.micro_batch)?;
            metrics.row(step, "val", val, lr, 0.0)?;
            metrics.flush()?;
            if val < best_val {
                best_val = val;
                best_model = model.clone();
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if run.patience.map_or(false, |p| evals_since_best >= p) {
                    break;
                }
            }
        }
    }
    metrics.flush()?;
    if best_val.is_infinite() {
        best_model = model.clone();
        best_val = final_train_loss;
    }
    Ok(TrainOutput {
        model,
        best_model,
        best_val_loss: best_val,
        final_train_loss,
        steps_run,
        diverged,
    })
}

/// Pre-train a generalist from scratch on the full dataset. Normalization
/// statistics are fit on the training split only and frozen in the layout.
pub fn pretrain(
    ds: &Dataset,
    base_cfg: &ModelConfig,
    run: &RunConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutput> {
    let slice_count = uniform_slice_count(ds)?;
    let stats = if run.val_frac > 0.0 {
        let (train_ds, _) = experience::split(ds, run.val_frac, rng::child_seed(run.seed, "split"))?;
        NormStats::fit(train_ds.samples.iter().map(|s| &s.telemetry))?
    } else {
        NormStats::fit(ds.samples.iter().map(|s| &s.telemetry))?
    };
    let cfg = ModelConfig {
        context_len: 1 + N_OBS_TOKENS + slice_count,
        ..base_cfg.clone()
    };
    let layout = TokenLayout::new(cfg.d_model, slice_count, stats);
    let mut model = Model::init(cfg, layout, rng::child_seed(run.seed, "init"))?;
    model.meta = CheckpointMeta { phase: "pretrained".into(), hardware_id: None, base_hash: None };
    let mut out = train(model, ds, run, metrics_path)?;
    out.best_model.meta = out.model.meta.clone();
    Ok(out)
}

/// Fine-tune a pretrained base on a filtered high-quality subset. Fresh
/// optimizer state at a lowered learning rate; the checkpoint records the
/// base's content hash and target hardware.
pub fn posttrain(
    base: Model,
    base_hash: Option<String>,
    finetune_ds: &Dataset,
    target_hw: &str,
    run: &RunConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutput> {
    if finetune_ds.samples.iter().any(|s| s.hardware_id != target_hw) {
        return Err(Error::Contract(format!(
            "fine-tune dataset contains samples not from '{target_hw}'"
        )));
    }
    let slice_count = uniform_slice_count(finetune_ds)?;
    if slice_count != base.layout.slice_count {
        return Err(Error::Contract(format!(
            "fine-tune slice count {slice_count} != base layout {}",
            base.layout.slice_count
        )));
    }
    let mut model = base;
    model.meta = CheckpointMeta {
        phase: "posttrained".into(),
        hardware_id: Some(target_hw.to_string()),
        base_hash,
    };
    let mut out = train(model, finetune_ds, run, metrics_path)?;
    out.best_model.meta = out.model.meta.clone();
    Ok(out)
}

/// Instance-specific training: pretrain semantics on a dataset restricted to
/// one hardware profile.
pub fn train_instance(
    ds: &Dataset,
    target_hw: &str,
    base_cfg: &ModelConfig,
    run: &RunConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutput> {
    let restricted = experience::restrict_hardware(ds, target_hw)?;
    // Audit: the instance model never sees another hardware's telemetry.
    debug_assert!(restricted.samples.iter().all(|s| s.hardware_id == target_hw));
    let mut out = pretrain(&restricted, base_cfg, run, metrics_path)?;
    out.model.meta = CheckpointMeta {
        phase: "instance".into(),
        hardware_id: Some(target_hw.to_string()),
        base_hash: None,
    };
    out.best_model.meta = out.model.meta.clone();
    Ok(out)
}
