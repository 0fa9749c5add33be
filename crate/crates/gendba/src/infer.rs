//! Autoregressive policy generation with a per-step key/value cache, plus
//! the closed-loop evaluation harness: model variants vs the OS baselines,
//! goal sweeps, and report serialization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::model::{masked_softmax, Model, LN_EPS};
use crate::rng;
use crate::sim::{
    enumerate_optimal, execute_policy, probe_telemetry, HardwareProfile, SchedulingPolicy,
    WorkloadSpec,
};
use crate::tensor::kernels;
use crate::tokenizer::{self, telemetry_image, N_OBS_TOKENS};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: DecodeMode,
    pub goal: f64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, goal: 0.9, seed: 0 }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.goal) {
            return Err(Error::Arg(format!("goal {} out of [0,1]", self.goal)));
        }
        if let DecodeMode::Sample { temperature } = self.mode {
            if !(temperature > 0.0) {
                return Err(Error::Arg(format!("temperature {temperature} must be positive")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// No-tape forward with per-layer KV caches
// ---------------------------------------------------------------------------

struct HeadCache {
    k: Vec<f64>, // t x dh
    v: Vec<f64>,
}

struct Decoder<'a> {
    model: &'a Model,
    caches: Vec<Vec<HeadCache>>, // [layer][head]
    t: usize,
}

impl<'a> Decoder<'a> {
    fn new(model: &'a Model) -> Self {
        let caches = (0..model.config.n_layers)
            .map(|_| {
                (0..model.config.n_heads)
                    .map(|_| HeadCache { k: Vec::new(), v: Vec::new() })
                    .collect()
            })
            .collect();
        Self { model, caches, t: 0 }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.model.params[name].data
    }

    /// Feed one embedding row; returns the logits at this position.
    fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        if self.t >= cfg.context_len {
            return Err(Error::Contract(format!(
                "decode position {} exceeds context length {}",
                self.t, cfg.context_len
            )));
        }
        let pos = &self.p("embed.pos")[self.t * d..(self.t + 1) * d];
        let mut h: Vec<f64> = x.iter().zip(pos).map(|(a, b)| a + b).collect();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let (n1, _, _) = kernels::layer_norm_rows(
                &h,
                1,
                d,
                self.p(&format!("layer{l}.ln1.g")),
                self.p(&format!("layer{l}.ln1.b")),
                LN_EPS,
            );
            let mut attn = vec![0.0; d];
            for hd in 0..cfg.n_heads {
                let base = format!("layer{l}.h{hd}");
                let mut q = kernels::matmul(&n1, self.p(&format!("{base}.wq")), 1, d, dh);
                let mut k = kernels::matmul(&n1, self.p(&format!("{base}.wk")), 1, d, dh);
                let mut v = kernels::matmul(&n1, self.p(&format!("{base}.wv")), 1, d, dh);
                for (i, val) in self.p(&format!("{base}.bq")).iter().enumerate() {
                    q[i] += val;
                }
                for (i, val) in self.p(&format!("{base}.bk")).iter().enumerate() {
                    k[i] += val;
                }
                for (i, val) in self.p(&format!("{base}.bv")).iter().enumerate() {
                    v[i] += val;
                }
                let cache = &mut self.caches[l][hd];
                cache.k.extend_from_slice(&k);
                cache.v.extend_from_slice(&v);
                let steps = self.t + 1;
                // scores over all cached positions (strictly causal by
                // construction: the cache only holds positions <= t).
                let mut scores = vec![0.0; steps];
                kernels::matmul_bt_acc(&q, &cache.k, 1, dh, steps, &mut scores);
                for s in &mut scores {
                    *s *= scale;
                }
                let probs = kernels::softmax_rows(&scores, 1, steps);
                let ctx = kernels::matmul(&probs, &cache.v, 1, steps, dh);
                let wo = self.p(&format!("{base}.wo"));
                kernels::matmul_acc(&ctx, wo, 1, dh, d, &mut attn);
            }
            for (i, val) in self.p(&format!("layer{l}.attn.bo")).iter().enumerate() {
                attn[i] += val;
            }
            for i in 0..d {
                h[i] += attn[i];
            }
            let (n2, _, _) = kernels::layer_norm_rows(
                &h,
                1,
                d,
                self.p(&format!("layer{l}.ln2.g")),
                self.p(&format!("layer{l}.ln2.b")),
                LN_EPS,
            );
            let mut f = kernels::matmul(&n2, self.p(&format!("layer{l}.ff.w1")), 1, d, cfg.d_ff);
            for (i, val) in self.p(&format!("layer{l}.ff.b1")).iter().enumerate() {
                f[i] = kernels::gelu(f[i] + val);
            }
            let mut f2 = kernels::matmul(&f, self.p(&format!("layer{l}.ff.w2")), 1, cfg.d_ff, d);
            for (i, val) in self.p(&format!("layer{l}.ff.b2")).iter().enumerate() {
                f2[i] += val;
            }
            for i in 0..d {
                h[i] += f2[i];
            }
        }
        let (n, _, _) =
            kernels::layer_norm_rows(&h, 1, d, self.p("final_ln.g"), self.p("final_ln.b"), LN_EPS);
        let mut logits = kernels::matmul(&n, self.p("head.w"), 1, d, cfg.vocab_size);
        for (i, val) in self.p("head.b").iter().enumerate() {
            logits[i] += val;
        }
        self.t += 1;
        Ok(logits)
    }
}

/// Observation-prefix embeddings (goal row + 16 telemetry rows), computed
/// with the same raw kernels as the decoder.
fn prefix_rows(model: &Model, hw: &HardwareProfile, telemetry: &crate::sim::TelemetrySnapshot, goal: f64) -> Result<Vec<Vec<f64>>> {
    let d = model.config.d_model;
    let p = |name: &str| -> &[f64] { &model.params[name].data };
    // Goal FFN: 1 -> 64 -> d_model.
    let hidden = p("tok.goal.w1").len();
    let mut g1: Vec<f64> = p("tok.goal.w1").iter().map(|w| w * goal).collect();
    for (i, b) in p("tok.goal.b1").iter().enumerate() {
        g1[i] = kernels::gelu(g1[i] + b);
    }
    let mut goal_row = kernels::matmul(&g1, p("tok.goal.w2"), 1, hidden, d);
    for (i, b) in p("tok.goal.b2").iter().enumerate() {
        goal_row[i] += b;
    }
    // Conv stack on the die-grid image.
    let (gh, gw) = hw.die_grid;
    let img = telemetry_image(hw, telemetry, &model.layout.stats)?;
    let cin = tokenizer::IMAGE_CHANNELS;
    let cc = model.params["tok.conv1.w"].shape[0];
    let mut c1 = kernels::conv2d(&img.data, p("tok.conv1.w"), cin, gh, gw, cc, 3, 3, 1, 1);
    for (ch, b) in p("tok.conv1.b").iter().enumerate() {
        for v in &mut c1[ch * gh * gw..(ch + 1) * gh * gw] {
            *v = kernels::gelu(*v + b);
        }
    }
    let mut c2 = kernels::conv2d(&c1, p("tok.conv2.w"), cc, gh, gw, cc, 3, 3, 1, 1);
    for (ch, b) in p("tok.conv2.b").iter().enumerate() {
        for v in &mut c2[ch * gh * gw..(ch + 1) * gh * gw] {
            *v = kernels::gelu(*v + b);
        }
    }
    let flat_t = kernels::transpose(&c2, cc, gh * gw); // [h*w, cc]
    let pool = tokenizer::pool_matrix(gh, gw)?;
    let pooled = kernels::matmul(&pool.data, &flat_t, N_OBS_TOKENS, gh * gw, cc);
    let mut proj = kernels::matmul(&pooled, p("tok.cell.w"), N_OBS_TOKENS, cc, d);
    for r in 0..N_OBS_TOKENS {
        for (i, b) in p("tok.cell.b").iter().enumerate() {
            proj[r * d + i] += b;
        }
    }
    let mut rows = Vec::with_capacity(1 + N_OBS_TOKENS);
    rows.push(goal_row);
    for r in 0..N_OBS_TOKENS {
        rows.push(proj[r * d..(r + 1) * d].to_vec());
    }
    Ok(rows)
}

/// Generate a policy autoregressively: probe telemetry, assemble the prefix,
/// then S masked decode steps.
pub fn rollout(
    model: &Model,
    hw: &HardwareProfile,
    wl: &WorkloadSpec,
    cfg: &RolloutConfig,
) -> Result<SchedulingPolicy> {
    cfg.validate()?;
    let telemetry = probe_telemetry(hw, wl, cfg.seed)?;
    rollout_from_telemetry(model, hw, &telemetry, cfg)
}

pub fn rollout_from_telemetry(
    model: &Model,
    hw: &HardwareProfile,
    telemetry: &crate::sim::TelemetrySnapshot,
    cfg: &RolloutConfig,
) -> Result<SchedulingPolicy> {
    cfg.validate()?;
    let vocab = &model.layout.vocab;
    let (lo, _) = vocab.sched_range();
    let d = model.config.d_model;
    let n_cores = hw.total_cores();
    let embed = &model.params["embed.tok"].data;
    let mut dec = Decoder::new(model);
    // Prefix logits are discarded; the first action is predicted from BOS.
    for row in &prefix_rows(model, hw, telemetry, cfg.goal)? {
        dec.step(row)?;
    }
    let mut sampler = rng::stream(cfg.seed, "rollout");
    let mut assignment = Vec::with_capacity(model.layout.slice_count);
    let mut next_input = vocab.bos;
    for _ in 0..model.layout.slice_count {
        let logits = dec.step(&embed[next_input * d..(next_input + 1) * d])?;
        let token = match cfg.mode {
            DecodeMode::Greedy => {
                let probs = masked_softmax(&logits, vocab, n_cores);
                // Argmax with ties resolved to the lowest id.
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                best
            }
            DecodeMode::Sample { temperature } => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                let probs = masked_softmax(&scaled, vocab, n_cores);
                let u: f64 = sampler.gen();
                let mut acc = 0.0;
                let mut chosen = lo;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                // Guard against accumulated rounding at u ~ 1.
                if probs[chosen] == 0.0 {
                    chosen = (0..probs.len()).rev().find(|&i| probs[i] > 0.0).unwrap();
                }
                chosen
            }
        };
        assignment.push(token - lo);
        next_input = token;
    }
    Ok(SchedulingPolicy::new(assignment))
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

/// A named source of policies for the closed-loop comparison.
pub enum PolicySource<'a> {
    Baseline(&'a str),
    Model { label: String, model: &'a Model, goal: f64 },
    /// Exhaustive optimum; only feasible on tiny instances.
    Oracle,
}

impl PolicySource<'_> {
    pub fn label(&self) -> String {
        match self {
            PolicySource::Baseline(n) => (*n).to_string(),
            PolicySource::Model { label, .. } => label.clone(),
            PolicySource::Oracle => "oracle".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub hardware_id: String,
    pub workload_id: String,
    pub policy_source: String,
    pub median_mops: f64,
    pub mean_mops: f64,
    pub p5_mops: f64,
    pub p95_mops: f64,
    /// baseline name -> this row's median over that baseline's median.
    pub speedup: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub rows: Vec<EvalRow>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // Nearest-rank on the sorted sample.
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}

pub fn summarize(mut xs: Vec<f64>) -> (f64, f64, f64, f64) {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let median = if xs.len() % 2 == 1 {
        xs[xs.len() / 2]
    } else {
        0.5 * (xs[xs.len() / 2 - 1] + xs[xs.len() / 2])
    };
    (median, mean, percentile(&xs, 0.05), percentile(&xs, 0.95))
}

/// Closed-loop evaluation: every source on every (hardware, workload) cell,
/// n_seeds fresh simulator seeds each; speedups vs each baseline's median.
pub fn evaluate(
    sources: &[PolicySource<'_>],
    hw_list: &[HardwareProfile],
    wl_list: &[WorkloadSpec],
    n_seeds: u64,
    slices: usize,
) -> Result<EvalReport> {
    if n_seeds == 0 {
        return Err(Error::Arg("n_seeds must be >= 1".into()));
    }
    if !sources
        .iter()
        .any(|s| matches!(s, PolicySource::Baseline(_)))
    {
        return Err(Error::Arg("evaluation needs at least one baseline source".into()));
    }
    let mut rows = Vec::new();
    for hw in hw_list {
        for wl in wl_list {
            let mut medians: BTreeMap<String, f64> = BTreeMap::new();
            let mut cell_rows = Vec::new();
            for src in sources {
                let mut mops = Vec::with_capacity(n_seeds as usize);
                for seed in 0..n_seeds {
                    let policy = match src {
                        PolicySource::Baseline(name) => baselines::by_name(name, hw, slices)?,
                        PolicySource::Model { model, goal, .. } => rollout(
                            model,
                            hw,
                            wl,
                            &RolloutConfig { mode: DecodeMode::Greedy, goal: *goal, seed },
                        )?,
                        PolicySource::Oracle => enumerate_optimal(hw, wl, seed, slices)?.0,
                    };
                    mops.push(execute_policy(hw, wl, &policy, seed)?.throughput_mops);
                }
                let (median, mean, p5, p95) = summarize(mops);
                if let PolicySource::Baseline(name) = src {
                    medians.insert((*name).to_string(), median);
                }
                cell_rows.push(EvalRow {
                    hardware_id: hw.id.clone(),
                    workload_id: wl.id.clone(),
                    policy_source: src.label(),
                    median_mops: median,
                    mean_mops: mean,
                    p5_mops: p5,
                    p95_mops: p95,
                    speedup: BTreeMap::new(),
                });
            }
            for row in &mut cell_rows {
                for (name, m) in &medians {
                    row.speedup.insert(format!("vs_{name}"), row.median_mops / m);
                }
            }
            rows.extend(cell_rows);
        }
    }
    rows.sort_by(|a, b| {
        (&a.hardware_id, &a.workload_id, &a.policy_source)
            .cmp(&(&b.hardware_id, &b.workload_id, &b.policy_source))
    });
    Ok(EvalReport { format_version: REPORT_FORMAT_VERSION, rows })
}

// ---------------------------------------------------------------------------
// Report CSV
// ---------------------------------------------------------------------------

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<String> = Vec::new();
        for r in &self.rows {
            for k in r.speedup.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        cols.sort();
        let mut out = format!("# gendba-eval-report v{}\n", self.format_version);
        out.push_str("hardware_id,workload_id,policy_source,median_mops,mean_mops,p5_mops,p95_mops");
        for c in &cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?}",
                r.hardware_id, r.workload_id, r.policy_source, r.median_mops, r.mean_mops,
                r.p5_mops, r.p95_mops
            ));
            for c in &cols {
                out.push(',');
                if let Some(v) = r.speedup.get(c) {
                    out.push_str(&format!("{v:?}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty report".into() })?;
        let version: u32 = magic
            .strip_prefix("# gendba-eval-report v")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad report magic line '{magic}'")))?;
        if version != REPORT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported report version {version}")));
        }
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 2, msg: "missing header".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 7 {
            return Err(Error::Format("report header too short".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("{} fields, expected {}", fields.len(), cols.len()),
                });
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad number '{s}'") })
            };
            let mut speedup = BTreeMap::new();
            for (c, f) in cols.iter().zip(&fields).skip(7) {
                if !f.is_empty() {
                    speedup.insert((*c).to_string(), num(f)?);
                }
            }
            rows.push(EvalRow {
                hardware_id: fields[0].to_string(),
                workload_id: fields[1].to_string(),
                policy_source: fields[2].to_string(),
                median_mops: num(fields[3])?,
                mean_mops: num(fields[4])?,
                p5_mops: num(fields[5])?,
                p95_mops: num(fields[6])?,
                speedup,
            });
        }
        Ok(EvalReport { format_version: version, rows })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Goal sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSweepRow {
    pub goal: f64,
    pub mean_mops: f64,
    pub samples: Vec<f64>,
}

/// n temperature-1.0 rollouts per goal, executed closed-loop.
pub fn goal_sweep(
    model: &Model,
    hw: &HardwareProfile,
    wl: &WorkloadSpec,
    goals: &[f64],
    n: u64,
    seed: u64,
) -> Result<Vec<GoalSweepRow>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rows = Vec::with_capacity(goals.len());
    for (gi, &goal) in goals.iter().enumerate() {
        let mut samples = Vec::with_capacity(n as usize);
        for k in 0..n {
            let cfg = RolloutConfig {
                mode: DecodeMode::Sample { temperature: 1.0 },
                goal,
                seed: rng::child_seed(seed, &format!("sweep/{gi}/{k}")),
            };
            let policy = rollout(model, hw, wl, &cfg)?;
            samples.push(execute_policy(hw, wl, &policy, k)?.throughput_mops);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        rows.push(GoalSweepRow { goal, mean_mops: mean, samples });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// One-sided rank test
// ---------------------------------------------------------------------------

fn normal_sf(z: f64) -> f64 {
    // Survival function via the Abramowitz-Stegun erfc approximation.
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erfc = poly * (-x * x).exp();
    if x >= 0.0 {
        0.5 * erfc
    } else {
        1.0 - 0.5 * erfc
    }
}

/// One-sided Mann-Whitney/Wilcoxon rank-sum p-value for H1: a > b,
/// normal approximation with tie correction.
pub fn rank_sum_p_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Arg("rank test needs nonempty samples".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|&v| (v, 0))
        .chain(b.iter().map(|&v| (v, 1)))
        .collect();
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let ra: f64 = all
        .iter()
        .zip(&ranks)
        .filter(|((_, grp), _)| *grp == 0)
        .map(|(_, r)| r)
        .sum();
    let u = ra - na * (na + 1.0) / 2.0;
    let mu = na * nb / 2.0;
    let nn = na + nb;
    let var = na * nb / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if var <= 0.0 {
        // All observations tied: no evidence either way.
        return Ok(0.5);
    }
    // Continuity correction.
    let z = (u - mu - 0.5) / var.sqrt();
    Ok(normal_sf(z))
}
