//! The goal-conditioned transformer: pre-norm causal backbone over the
//! [goal, obs, action] token sequence, with a linear action-expert head over
//! the task-partitioned vocabulary. Parameters live in a flat name -> tensor
//! map so the optimizer and checkpoints stay format-agnostic.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::sim::HardwareProfile;
use crate::tensor::{read_container, write_container, Tape, Tensor, Var};
use crate::tokenizer::{
    self, ActionVocab, TokenLayout, TokenizerVars,
};
use crate::experience::ExperienceSample;

pub const LN_EPS: f64 = 1e-5;
const NEG_INF: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 192,
            n_layers: 6,
            n_heads: 4,
            d_ff: 768,
            context_len: 273,
            vocab_size: 260,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Contract(format!(
                "dropout_rate {} out of [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Flat parameter name -> shape listing (backbone, head, tokenizer).
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let mut out = vec![
        ("embed.tok".to_string(), vec![cfg.vocab_size, d]),
        ("embed.pos".to_string(), vec![cfg.context_len, d]),
    ];
    for l in 0..cfg.n_layers {
        out.push((format!("layer{l}.ln1.g"), vec![d]));
        out.push((format!("layer{l}.ln1.b"), vec![d]));
        for h in 0..cfg.n_heads {
            out.push((format!("layer{l}.h{h}.wq"), vec![d, dh]));
            out.push((format!("layer{l}.h{h}.bq"), vec![dh]));
            out.push((format!("layer{l}.h{h}.wk"), vec![d, dh]));
            out.push((format!("layer{l}.h{h}.bk"), vec![dh]));
            out.push((format!("layer{l}.h{h}.wv"), vec![d, dh]));
            out.push((format!("layer{l}.h{h}.bv"), vec![dh]));
            out.push((format!("layer{l}.h{h}.wo"), vec![dh, d]));
        }
        out.push((format!("layer{l}.attn.bo"), vec![d]));
        out.push((format!("layer{l}.ln2.g"), vec![d]));
        out.push((format!("layer{l}.ln2.b"), vec![d]));
        out.push((format!("layer{l}.ff.w1"), vec![d, cfg.d_ff]));
        out.push((format!("layer{l}.ff.b1"), vec![cfg.d_ff]));
        out.push((format!("layer{l}.ff.w2"), vec![cfg.d_ff, d]));
        out.push((format!("layer{l}.ff.b2"), vec![d]));
    }
    out.push(("final_ln.g".to_string(), vec![d]));
    out.push(("final_ln.b".to_string(), vec![d]));
    out.push(("head.w".to_string(), vec![d, cfg.vocab_size]));
    out.push(("head.b".to_string(), vec![cfg.vocab_size]));
    out.extend(tokenizer::param_shapes(d));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "pretrained" | "posttrained" | "instance" | "init".
    pub phase: String,
    /// Target hardware for posttrain/instance checkpoints.
    pub hardware_id: Option<String>,
    /// Content hash of the base checkpoint for posttrained models.
    pub base_hash: Option<String>,
}

impl CheckpointMeta {
    pub fn init() -> Self {
        Self { phase: "init".to_string(), hardware_id: None, base_hash: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: TokenLayout,
    pub params: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

fn trunc_normal(r: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(r);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

impl Model {
    /// Fresh model: truncated-normal(0.02) weights, zero biases, unit
    /// layer-norm scales, and a zero action-expert projection (so the
    /// untrained loss is exactly ln(vocab_size)).
    pub fn init(config: ModelConfig, layout: TokenLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        if layout.d_model != config.d_model {
            return Err(Error::Contract(format!(
                "layout d_model {} != model d_model {}",
                layout.d_model, config.d_model
            )));
        }
        if layout.context_len() != config.context_len {
            return Err(Error::Contract(format!(
                "layout context length {} != model context length {}",
                layout.context_len(),
                config.context_len
            )));
        }
        if layout.vocab.total_size != config.vocab_size {
            return Err(Error::Contract(format!(
                "vocab size {} != model vocab size {}",
                layout.vocab.total_size, config.vocab_size
            )));
        }
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if name == "head.w"
                || name == "head.b"
                || name.ends_with(".g")
                || name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with(".bq")
                || name.ends_with(".bk")
                || name.ends_with(".bv")
                || name.ends_with(".bo")
            {
                if name.ends_with("ln1.g") || name.ends_with("ln2.g") || name == "final_ln.g" {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                }
            } else {
                let mut r = rng::stream(seed, &format!("init/{name}"));
                (0..n).map(|_| trunc_normal(&mut r, 0.02)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?.with_grad());
        }
        let model = Self { config, layout, params, meta: CheckpointMeta::init() };
        if model.config == ModelConfig::default() {
            let count = model.param_count();
            if !(2_500_000..=3_500_000).contains(&count) {
                return Err(Error::Contract(format!(
                    "default config parameter count {count} outside [2.5M, 3.5M]"
                )));
            }
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Put every parameter on a tape as a leaf; returns name -> handle.
    pub fn leaf_vars(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect()
    }

    /// Accumulate tape gradients back into the parameter tensors.
    pub fn absorb_grads(&mut self, tape: &Tape, vars: &BTreeMap<String, Var>) -> Result<()> {
        for (name, var) in vars {
            if let Some(g) = tape.grad(*var) {
                let g = g.to_vec();
                self.params
                    .get_mut(name)
                    .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?
                    .accumulate_grad(&g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..tape.value(x).numel())
                .map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, &mask)
        }
        _ => Ok(x),
    }
}

/// Pre-norm causal transformer over a [T, d_model] input; returns
/// [T, vocab_size] logits. `dropout_rng` enables train-mode dropout.
pub fn forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    x: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::Dim(format!(
            "forward expects [T, {}] input, got {shape:?}",
            cfg.d_model
        )));
    }
    let t_len = shape[0];
    if t_len > cfg.context_len {
        return Err(Error::Contract(format!(
            "sequence length {t_len} exceeds context length {}",
            cfg.context_len
        )));
    }
    let v = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    };
    let positions: Vec<usize> = (0..t_len).collect();
    let pos = tape.embed(v("embed.pos")?, &positions)?;
    let mut h = tape.add(x, pos)?;
    let mut causal = vec![false; t_len * t_len];
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            causal[i * t_len + j] = true;
        }
    }
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for l in 0..cfg.n_layers {
        let n1 = {
            let g = v(&format!("layer{l}.ln1.g"))?;
            let b = v(&format!("layer{l}.ln1.b"))?;
            tape.layer_norm(h, g, b, LN_EPS)?
        };
        let mut attn: Option<Var> = None;
        for hd in 0..cfg.n_heads {
            let q = tape.matmul(n1, v(&format!("layer{l}.h{hd}.wq"))?)?;
            let q = tape.add_row_bias(q, v(&format!("layer{l}.h{hd}.bq"))?)?;
            let k = tape.matmul(n1, v(&format!("layer{l}.h{hd}.wk"))?)?;
            let k = tape.add_row_bias(k, v(&format!("layer{l}.h{hd}.bk"))?)?;
            let val = tape.matmul(n1, v(&format!("layer{l}.h{hd}.wv"))?)?;
            let val = tape.add_row_bias(val, v(&format!("layer{l}.h{hd}.bv"))?)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.masked_fill(scores, &causal, NEG_INF)?;
            let probs = tape.softmax_rows(scores)?;
            let ctx = tape.matmul(probs, val)?;
            let proj = tape.matmul(ctx, v(&format!("layer{l}.h{hd}.wo"))?)?;
            attn = Some(match attn {
                Some(acc) => tape.add(acc, proj)?,
                None => proj,
            });
        }
        let attn = tape.add_row_bias(attn.unwrap(), v(&format!("layer{l}.attn.bo"))?)?;
        let attn = dropout(tape, attn, cfg.dropout_rate, &mut dropout_rng)?;
        h = tape.add(h, attn)?;
        let n2 = {
            let g = v(&format!("layer{l}.ln2.g"))?;
            let b = v(&format!("layer{l}.ln2.b"))?;
            tape.layer_norm(h, g, b, LN_EPS)?
        };
        let f = tape.matmul(n2, v(&format!("layer{l}.ff.w1"))?)?;
        let f = tape.add_row_bias(f, v(&format!("layer{l}.ff.b1"))?)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, v(&format!("layer{l}.ff.w2"))?)?;
        let f = tape.add_row_bias(f, v(&format!("layer{l}.ff.b2"))?)?;
        let f = dropout(tape, f, cfg.dropout_rate, &mut dropout_rng)?;
        h = tape.add(h, f)?;
    }
    let n = {
        let g = v("final_ln.g")?;
        let b = v("final_ln.b")?;
        tape.layer_norm(h, g, b, LN_EPS)?
    };
    let logits = tape.matmul(n, v("head.w")?)?;
    tape.add_row_bias(logits, v("head.b")?)
}

// ---------------------------------------------------------------------------
// Sequence assembly and loss
// ---------------------------------------------------------------------------

/// Assemble the [T, d_model] teacher-forced input plus targets and mask for
/// one sample.
pub fn sequence_inputs(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    layout: &TokenLayout,
    hw: &HardwareProfile,
    sample: &ExperienceSample,
) -> Result<(Var, Vec<usize>, Vec<bool>)> {
    let tok = TokenizerVars::from_vars(vars)?;
    let goal_emb = tokenizer::encode_goal(tape, &tok, sample.goal)?;
    let obs_emb =
        tokenizer::encode_telemetry(tape, &tok, hw, &sample.telemetry, &layout.stats)?;
    let act_ids = tokenizer::action_input_ids(&sample.policy, &layout.vocab)?;
    let table = vars
        .get("embed.tok")
        .copied()
        .ok_or_else(|| Error::Contract("missing parameter 'embed.tok'".into()))?;
    let act_emb = tape.embed(table, &act_ids)?;
    let x = tokenizer::assemble(tape, goal_emb, obs_emb, act_emb)?;
    let targets = tokenizer::full_targets(layout, &sample.policy)?;
    let mask = tokenizer::loss_mask(layout);
    Ok((x, targets, mask))
}

/// Mean masked cross-entropy over a batch of samples. Every sequence has the
/// same masked-position count, so the mean of per-sequence means equals the
/// global mean.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    layout: &TokenLayout,
    batch: &[(&HardwareProfile, &ExperienceSample)],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Arg("empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for (hw, sample) in batch {
        let (x, targets, mask) = sequence_inputs(tape, vars, layout, hw, sample)?;
        let logits = forward(tape, vars, cfg, x, dropout_rng.as_deref_mut())?;
        losses.push(tape.softmax_cross_entropy(logits, &targets, &mask)?);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    if losses.len() > 1 {
        acc = tape.scale(acc, 1.0 / losses.len() as f64);
    }
    Ok(acc)
}

/// Next-action distribution at the end of a prefix: forward in eval mode,
/// mask ids outside the sched range or >= the core count to -inf, softmax.
pub fn masked_next_probs(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    vocab: &ActionVocab,
    prefix: Var,
    n_cores: usize,
) -> Result<Vec<f64>> {
    let logits = forward(tape, vars, cfg, prefix, None)?;
    let t_len = tape.shape(logits)[0];
    let v = tape.shape(logits)[1];
    let last = tape.data(logits)[(t_len - 1) * v..].to_vec();
    Ok(masked_softmax(&last, vocab, n_cores))
}

/// CPU-side masked softmax over the valid core-ID tokens.
pub fn masked_softmax(logits: &[f64], vocab: &ActionVocab, n_cores: usize) -> Vec<f64> {
    let (lo, hi) = vocab.sched_range();
    let valid = |i: usize| i >= lo && i < hi && (i - lo) < n_cores;
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| valid(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut z = 0.0;
    for (i, &v) in logits.iter().enumerate() {
        if valid(i) {
            out[i] = (v - max).exp();
            z += out[i];
        }
    }
    for o in &mut out {
        *o /= z;
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_KIND: &str = "gendba-checkpoint";

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    kind: String,
    model_config: ModelConfig,
    layout: TokenLayout,
    layout_hash: String,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let extra = CheckpointExtra {
        kind: CHECKPOINT_KIND.to_string(),
        model_config: model.config.clone(),
        layout: model.layout.clone(),
        layout_hash: model.layout.hash(),
        meta: model.meta.clone(),
    };
    write_container(path, &model.params, serde_json::to_value(&extra)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (tensors, header) = read_container(path)?;
    let extra: CheckpointExtra = serde_json::from_value(header.extra)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if extra.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!("not a checkpoint: kind '{}'", extra.kind)));
    }
    if extra.layout.hash() != extra.layout_hash {
        return Err(Error::Format(
            "checkpoint layout hash does not match its layout (version drift)".into(),
        ));
    }
    extra.model_config.validate()?;
    for (name, shape) in param_shapes(&extra.model_config) {
        match tensors.get(&name) {
            Some(t) if t.shape == shape => {}
            Some(t) => {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.shape
                )))
            }
            None => return Err(Error::Format(format!("checkpoint missing tensor '{name}'"))),
        }
    }
    Ok(Model {
        config: extra.model_config,
        layout: extra.layout,
        params: tensors,
        meta: extra.meta,
    })
}

/// Content hash of a checkpoint file.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
