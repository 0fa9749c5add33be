//! Tokenization: convert an observation (telemetry + goal) and an action
//! sequence into the fixed token prefix the model consumes. Telemetry is
//! scattered onto the hardware die grid, convolved, and adaptively pooled to
//! a hardware-independent 4x4 grid of observation tokens; the goal passes
//! through a small feed-forward net; action tokens live in a task-partitioned
//! vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::{HardwareProfile, SchedulingPolicy, TelemetrySnapshot, TELEMETRY_FEATURES};
use crate::tensor::{Tape, Tensor, Var};

pub const TOKEN_LAYOUT_VERSION: u32 = 1;
/// 12 per-core PMU features plus one node-bandwidth channel.
pub const IMAGE_CHANNELS: usize = TELEMETRY_FEATURES + 1;
pub const N_OBS_TOKENS: usize = 16;
pub const POOL_SIDE: usize = 4;
const CONV_CHANNELS: usize = 16;
const GOAL_HIDDEN: usize = 64;

// ---------------------------------------------------------------------------
// Action vocabulary
// ---------------------------------------------------------------------------

/// Task-partitioned action token vocabulary. Only "sched" is populated in
/// this generation; PAD and the BOS-action token sit outside every range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionVocab {
    /// task_id -> [lo, hi) token interval.
    pub ranges: BTreeMap<String, (usize, usize)>,
    pub pad: usize,
    pub bos: usize,
    pub total_size: usize,
}

impl ActionVocab {
    pub fn new(
        ranges: BTreeMap<String, (usize, usize)>,
        pad: usize,
        bos: usize,
        total_size: usize,
    ) -> Result<Self> {
        let mut spans: Vec<(usize, usize, &str)> =
            ranges.iter().map(|(k, &(lo, hi))| (lo, hi, k.as_str())).collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::Contract(format!(
                    "action ranges '{}' and '{}' overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        for (lo, hi, k) in &spans {
            if lo >= hi || *hi > total_size {
                return Err(Error::Contract(format!("range for '{k}' malformed")));
            }
            if (*lo..*hi).contains(&pad) || (*lo..*hi).contains(&bos) {
                return Err(Error::Contract(format!(
                    "special token inside task range '{k}'"
                )));
            }
        }
        if pad >= total_size || bos >= total_size || pad == bos {
            return Err(Error::Contract("special tokens out of vocabulary".into()));
        }
        Ok(Self { ranges, pad, bos, total_size })
    }

    /// Default: sched tokens [0,256), PAD 256, BOS 257, two ids reserved.
    pub fn default_sched() -> Self {
        let mut ranges = BTreeMap::new();
        ranges.insert("sched".to_string(), (0, 256));
        Self::new(ranges, 256, 257, 260).expect("default vocab is well-formed")
    }

    pub fn sched_range(&self) -> (usize, usize) {
        self.ranges["sched"]
    }
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

/// Per-channel z-score statistics, fit on the training split and frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: vec![0.0; IMAGE_CHANNELS], std: vec![1.0; IMAGE_CHANNELS] }
    }

    /// Fit per-channel mean/std over every core row (plus the bandwidth
    /// channel) of the given samples. Std is floored at 1e-9.
    pub fn fit<'a>(samples: impl Iterator<Item = &'a TelemetrySnapshot>) -> Result<Self> {
        let mut sum = vec![0.0; IMAGE_CHANNELS];
        let mut sumsq = vec![0.0; IMAGE_CHANNELS];
        let mut n = vec![0usize; IMAGE_CHANNELS];
        for t in samples {
            for core in &t.per_core {
                if core.len() != TELEMETRY_FEATURES {
                    return Err(Error::Dim(format!(
                        "telemetry row has {} features, expected {TELEMETRY_FEATURES}",
                        core.len()
                    )));
                }
                for (f, v) in core.iter().enumerate() {
                    sum[f] += v;
                    sumsq[f] += v * v;
                    n[f] += 1;
                }
            }
            for v in &t.node_bw_util {
                sum[TELEMETRY_FEATURES] += v;
                sumsq[TELEMETRY_FEATURES] += v * v;
                n[TELEMETRY_FEATURES] += 1;
            }
        }
        if n.iter().any(|&c| c == 0) {
            return Err(Error::Arg("cannot fit normalization stats on no samples".into()));
        }
        let mut mean = vec![0.0; IMAGE_CHANNELS];
        let mut std = vec![0.0; IMAGE_CHANNELS];
        for f in 0..IMAGE_CHANNELS {
            mean[f] = sum[f] / n[f] as f64;
            let var = (sumsq[f] / n[f] as f64 - mean[f] * mean[f]).max(0.0);
            std[f] = var.sqrt().max(1e-9);
        }
        Ok(Self { mean, std })
    }
}

// ---------------------------------------------------------------------------
// Token layout
// ---------------------------------------------------------------------------

/// The versioned sequence layout: [goal, obs_1..obs_16, act_1..act_S].
/// Serialized into every checkpoint; its hash gates checkpoint loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub version: u32,
    pub n_obs_tokens: usize,
    pub d_model: usize,
    pub slice_count: usize,
    pub vocab: ActionVocab,
    pub stats: NormStats,
}

impl TokenLayout {
    pub fn new(d_model: usize, slice_count: usize, stats: NormStats) -> Self {
        Self {
            version: TOKEN_LAYOUT_VERSION,
            n_obs_tokens: N_OBS_TOKENS,
            d_model,
            slice_count,
            vocab: ActionVocab::default_sched(),
            stats,
        }
    }

    pub fn context_len(&self) -> usize {
        1 + self.n_obs_tokens + self.slice_count
    }

    /// Index of the first action position in the sequence.
    pub fn action_start(&self) -> usize {
        1 + self.n_obs_tokens
    }

    /// Content hash of the serialized layout (field order is fixed).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("layout serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Telemetry image and pooling
// ---------------------------------------------------------------------------

/// Scatter standardized per-core telemetry onto the die grid as an
/// IMAGE_CHANNELS-channel image; empty grid cells stay zero. The extra
/// channel carries the owning node's bandwidth utilization.
pub fn telemetry_image(
    hw: &HardwareProfile,
    telemetry: &TelemetrySnapshot,
    stats: &NormStats,
) -> Result<Tensor> {
    if telemetry.per_core.len() != hw.total_cores() {
        return Err(Error::Dim(format!(
            "telemetry has {} cores, hardware '{}' has {}",
            telemetry.per_core.len(),
            hw.id,
            hw.total_cores()
        )));
    }
    let (h, w) = hw.die_grid;
    let mut img = vec![0.0; IMAGE_CHANNELS * h * w];
    for (core, row) in telemetry.per_core.iter().enumerate() {
        if row.len() != TELEMETRY_FEATURES {
            return Err(Error::Dim(format!(
                "core {core} telemetry has {} features, expected {TELEMETRY_FEATURES}",
                row.len()
            )));
        }
        let (r, c) = hw.core_cell[core];
        let cell = r * w + c;
        for (f, v) in row.iter().enumerate() {
            img[f * h * w + cell] = (v - stats.mean[f]) / stats.std[f];
        }
        let bw = telemetry.node_bw_util[hw.node_of_core(core)];
        img[TELEMETRY_FEATURES * h * w + cell] =
            (bw - stats.mean[TELEMETRY_FEATURES]) / stats.std[TELEMETRY_FEATURES];
    }
    Tensor::new(vec![IMAGE_CHANNELS, h, w], img)
}

/// Adaptive average pooling to POOL_SIDE x POOL_SIDE, as a constant
/// [16, h*w] matrix (row i averages over pooled cell i's grid positions).
pub fn pool_matrix(h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::Arg("empty die grid".into()));
    }
    // Bins are never empty: grids smaller than 4x4 duplicate rows/columns.
    let bin = |i: usize, n: usize| {
        let lo = i * n / POOL_SIDE;
        (lo, ((i + 1) * n / POOL_SIDE).max(lo + 1))
    };
    let mut m = vec![0.0; N_OBS_TOKENS * h * w];
    for pr in 0..POOL_SIDE {
        let (r0, r1) = bin(pr, h);
        for pc in 0..POOL_SIDE {
            let (c0, c1) = bin(pc, w);
            let cell = pr * POOL_SIDE + pc;
            let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    m[cell * h * w + r * w + c] = inv;
                }
            }
        }
    }
    Tensor::new(vec![N_OBS_TOKENS, h * w], m)
}

/// Pooled 4x4 cell index a grid position falls into.
pub fn pooled_cell_of(h: usize, w: usize, r: usize, c: usize) -> usize {
    let pr = (0..POOL_SIDE).find(|&p| r < (p + 1) * h / POOL_SIDE).unwrap();
    let pc = (0..POOL_SIDE).find(|&p| c < (p + 1) * w / POOL_SIDE).unwrap();
    pr * POOL_SIDE + pc
}

// ---------------------------------------------------------------------------
// Learnable encoder parameters
// ---------------------------------------------------------------------------

/// Parameter names and shapes for the tokenizer's learnable pieces. The model
/// owns the actual tensors; this is the single source of truth for layout.
pub fn param_shapes(d_model: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("tok.conv1.w".into(), vec![CONV_CHANNELS, IMAGE_CHANNELS, 3, 3]),
        ("tok.conv1.b".into(), vec![CONV_CHANNELS]),
        ("tok.conv2.w".into(), vec![CONV_CHANNELS, CONV_CHANNELS, 3, 3]),
        ("tok.conv2.b".into(), vec![CONV_CHANNELS]),
        ("tok.cell.w".into(), vec![CONV_CHANNELS, d_model]),
        ("tok.cell.b".into(), vec![d_model]),
        ("tok.goal.w1".into(), vec![1, GOAL_HIDDEN]),
        ("tok.goal.b1".into(), vec![GOAL_HIDDEN]),
        ("tok.goal.w2".into(), vec![GOAL_HIDDEN, d_model]),
        ("tok.goal.b2".into(), vec![d_model]),
    ]
}

/// Tape handles for the tokenizer parameters, looked up by name.
#[derive(Debug, Clone, Copy)]
pub struct TokenizerVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub cell_w: Var,
    pub cell_b: Var,
    pub goal_w1: Var,
    pub goal_b1: Var,
    pub goal_w2: Var,
    pub goal_b2: Var,
}

impl TokenizerVars {
    pub fn from_vars(vars: &BTreeMap<String, Var>) -> Result<Self> {
        let get = |name: &str| {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
        };
        Ok(Self {
            conv1_w: get("tok.conv1.w")?,
            conv1_b: get("tok.conv1.b")?,
            conv2_w: get("tok.conv2.w")?,
            conv2_b: get("tok.conv2.b")?,
            cell_w: get("tok.cell.w")?,
            cell_b: get("tok.cell.b")?,
            goal_w1: get("tok.goal.w1")?,
            goal_b1: get("tok.goal.b1")?,
            goal_w2: get("tok.goal.w2")?,
            goal_b2: get("tok.goal.b2")?,
        })
    }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// Conv stack + adaptive pooling + shared cell projection.
/// Returns a [n_obs_tokens, d_model] activation.
pub fn encode_telemetry(
    tape: &mut Tape,
    vars: &TokenizerVars,
    hw: &HardwareProfile,
    telemetry: &TelemetrySnapshot,
    stats: &NormStats,
) -> Result<Var> {
    let (h, w) = hw.die_grid;
    let img = telemetry_image(hw, telemetry, stats)?;
    let x = tape.constant(img);
    let c1 = tape.conv2d(x, vars.conv1_w, 1, 1)?;
    let c1 = tape.add_chan_bias(c1, vars.conv1_b)?;
    let c1 = tape.gelu(c1);
    let c2 = tape.conv2d(c1, vars.conv2_w, 1, 1)?;
    let c2 = tape.add_chan_bias(c2, vars.conv2_b)?;
    let c2 = tape.gelu(c2);
    let flat = tape.reshape(c2, vec![CONV_CHANNELS, h * w])?;
    let flat_t = tape.transpose(flat)?;
    let pool = tape.constant(pool_matrix(h, w)?);
    let pooled = tape.matmul(pool, flat_t)?; // [16, conv_channels]
    let proj = tape.matmul(pooled, vars.cell_w)?;
    tape.add_row_bias(proj, vars.cell_b)
}

/// Goal FFN on an already-taped [1,1] goal value (for gradient checks).
pub fn encode_goal_var(tape: &mut Tape, vars: &TokenizerVars, goal: Var) -> Result<Var> {
    let h = tape.matmul(goal, vars.goal_w1)?;
    let h = tape.add_row_bias(h, vars.goal_b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, vars.goal_w2)?;
    tape.add_row_bias(out, vars.goal_b2)
}

/// 2-layer feed-forward goal encoder (1 -> 64 -> d_model). [1, d_model].
pub fn encode_goal(tape: &mut Tape, vars: &TokenizerVars, goal: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&goal) {
        return Err(Error::Arg(format!("goal {goal} out of [0,1]")));
    }
    let g = tape.constant(Tensor::new(vec![1, 1], vec![goal])?);
    encode_goal_var(tape, vars, g)
}

// ---------------------------------------------------------------------------
// Action-token plumbing
// ---------------------------------------------------------------------------

fn sched_token(vocab: &ActionVocab, core: usize) -> Result<usize> {
    let (lo, hi) = vocab.sched_range();
    let tok = lo + core;
    if tok >= hi {
        return Err(Error::Contract(format!(
            "core ID {core} outside sched vocab range [{lo},{hi})"
        )));
    }
    Ok(tok)
}

/// Input ids at the S action positions: BOS then the policy shifted right.
pub fn action_input_ids(policy: &SchedulingPolicy, vocab: &ActionVocab) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(policy.len());
    ids.push(vocab.bos);
    for &core in &policy.assignment[..policy.len() - 1] {
        ids.push(sched_token(vocab, core)?);
    }
    Ok(ids)
}

/// Target ids at the S action positions: the policy itself, offset into the
/// sched range.
pub fn action_target_ids(policy: &SchedulingPolicy, vocab: &ActionVocab) -> Result<Vec<usize>> {
    policy.assignment.iter().map(|&c| sched_token(vocab, c)).collect()
}

/// Per-position loss mask: true only on the S action positions.
pub fn loss_mask(layout: &TokenLayout) -> Vec<bool> {
    let mut m = vec![false; layout.context_len()];
    for p in layout.action_start()..layout.context_len() {
        m[p] = true;
    }
    m
}

/// Full-length target vector; prefix positions carry PAD (masked out anyway).
pub fn full_targets(layout: &TokenLayout, policy: &SchedulingPolicy) -> Result<Vec<usize>> {
    if policy.len() != layout.slice_count {
        return Err(Error::Dim(format!(
            "policy length {} != layout slice count {}",
            policy.len(),
            layout.slice_count
        )));
    }
    let mut t = vec![layout.vocab.pad; layout.action_start()];
    t.extend(action_target_ids(policy, &layout.vocab)?);
    Ok(t)
}

/// Stack [goal emb][obs embs][action embs] into the [T, d_model] input.
pub fn assemble(tape: &mut Tape, goal_emb: Var, obs_emb: Var, act_emb: Var) -> Result<Var> {
    tape.concat_rows(&[goal_emb, obs_emb, act_emb])
}
