//! The experience dataset: a multi-hardware, multi-workload corpus of
//! (telemetry, goal, policy, outcome) records containing both good and bad
//! policies, plus persistence, stratified splitting, and the high-quality
//! fine-tune filter.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::rng;
use crate::sim::{
    execute_policy, probe_telemetry, HardwareProfile, SchedulingPolicy, TelemetrySnapshot,
    WorkloadSpec,
};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// One (telemetry, goal, policy, outcome) record.
///
/// `plan_features` and `dist_stats` are reserved modalities; in this
/// generation they are always zero-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceSample {
    pub hardware_id: String,
    pub workload_id: String,
    pub task_id: String,
    pub telemetry: TelemetrySnapshot,
    pub plan_features: Vec<f64>,
    pub dist_stats: Vec<f64>,
    /// Normalized return in [0,1]: achieved_mops over the cell normalizer.
    pub goal: f64,
    pub policy: SchedulingPolicy,
    pub achieved_mops: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<ExperienceSample>,
    /// (hardware_id, workload_id) -> max achieved_mops in that cell.
    pub normalizers: BTreeMap<String, f64>,
    pub schema_version: u32,
}

pub fn cell_key(hw: &str, wl: &str) -> String {
    format!("{hw}/{wl}")
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let key = cell_key(&s.hardware_id, &s.workload_id);
            if !self.normalizers.contains_key(&key) {
                return Err(Error::Contract(format!(
                    "sample {i}: no normalizer for cell {key}"
                )));
            }
            if !(0.0..=1.0).contains(&s.goal) {
                return Err(Error::Contract(format!("sample {i}: goal {} out of [0,1]", s.goal)));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = self
            .samples
            .iter()
            .map(|s| cell_key(&s.hardware_id, &s.workload_id))
            .collect();
        cells.sort();
        cells.dedup();
        cells
    }
}

/// How collect() fills each (hardware, workload) cell: equal parts uniformly
/// random assignments, perturbed baselines, the baselines themselves, and
/// node-balanced random policies. The mix guarantees both strong and weak
/// regions of policy space are represented.
fn cell_policy(
    hw: &HardwareProfile,
    slices: usize,
    index: usize,
    rng: &mut impl Rng,
) -> SchedulingPolicy {
    let cores = hw.total_cores();
    let nodes = hw.nodes();
    match index % 4 {
        // Uniformly random assignment.
        0 => SchedulingPolicy::new((0..slices).map(|_| rng.gen_range(0..cores)).collect()),
        // Random perturbation of one baseline: k random slice reassignments.
        1 => {
            let name = baselines::BASELINE_NAMES[(index / 4) % 4];
            let mut p = baselines::by_name(name, hw, slices).expect("builtin baseline");
            let k = rng.gen_range(1..=(slices / 4).max(1));
            for _ in 0..k {
                let s = rng.gen_range(0..slices);
                p.assignment[s] = rng.gen_range(0..cores);
            }
            p
        }
        // The baselines themselves, repeated under different seeds.
        2 => {
            let name = baselines::BASELINE_NAMES[(index / 4) % 4];
            baselines::by_name(name, hw, slices).expect("builtin baseline")
        }
        // Node-balanced random: round-robin node, random core within it.
        _ => SchedulingPolicy::new(
            (0..slices)
                .map(|s| {
                    let node = s % nodes;
                    let cores: Vec<usize> = hw.cores_of_node(node).collect();
                    cores[rng.gen_range(0..cores.len())]
                })
                .collect(),
        ),
    }
}

/// Build the experience dataset over the (hardware x workload) grid.
pub fn collect(
    hw_list: &[HardwareProfile],
    wl_list: &[WorkloadSpec],
    samples_per_cell: usize,
    slices: usize,
    seed: u64,
) -> Result<Dataset> {
    if hw_list.is_empty() || wl_list.is_empty() {
        return Err(Error::Arg("collect needs at least one hardware and one workload".into()));
    }
    if samples_per_cell == 0 {
        return Err(Error::Arg("samples_per_cell must be positive".into()));
    }
    let mut samples = Vec::with_capacity(hw_list.len() * wl_list.len() * samples_per_cell);
    let mut normalizers = BTreeMap::new();
    for hw in hw_list {
        for wl in wl_list {
            let key = cell_key(&hw.id, &wl.id);
            let mut cell_rng = rng::stream(seed, &format!("collect/{key}"));
            let mut cell_max = f64::MIN;
            let start = samples.len();
            for i in 0..samples_per_cell {
                let policy = cell_policy(hw, slices, i, &mut cell_rng);
                let sample_seed = cell_rng.gen::<u64>();
                let telemetry = probe_telemetry(hw, wl, sample_seed)?;
                let achieved = execute_policy(hw, wl, &policy, sample_seed)?.throughput_mops;
                cell_max = cell_max.max(achieved);
                samples.push(ExperienceSample {
                    hardware_id: hw.id.clone(),
                    workload_id: wl.id.clone(),
                    task_id: "sched".to_string(),
                    telemetry,
                    plan_features: vec![0.0; 8],
                    dist_stats: vec![0.0; 8],
                    goal: 0.0, // filled below once the normalizer is known
                    policy,
                    achieved_mops: achieved,
                    seed: sample_seed,
                });
            }
            normalizers.insert(key, cell_max);
            for s in &mut samples[start..] {
                s.goal = (s.achieved_mops / cell_max).clamp(0.0, 1.0);
            }
        }
    }
    let ds = Dataset { samples, normalizers, schema_version: DATASET_SCHEMA_VERSION };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Persistence: one header line, then one JSON record per line.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    normalizers: BTreeMap<String, f64>,
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        schema_version: ds.schema_version,
        normalizers: ds.normalizers.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty dataset file".into() })??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "dataset schema_version {} unsupported (expected {DATASET_SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let s: ExperienceSample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
        samples.push(s);
    }
    let ds = Dataset {
        samples,
        normalizers: header.normalizers,
        schema_version: header.schema_version,
    };
    ds.validate()?;
    Ok(ds)
}

/// Stratified train/validation split by (hardware, workload) cell.
pub fn split(ds: &Dataset, val_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::Arg(format!("val_frac {val_frac} must lie in (0,1)")));
    }
    let mut by_cell: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_cell.entry(cell_key(&s.hardware_id, &s.workload_id)).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (cell, mut idx) in by_cell {
        if idx.len() < 2 {
            return Err(Error::Arg(format!(
                "cell {cell} has {} sample(s); need at least 2 to split",
                idx.len()
            )));
        }
        let mut cell_rng = rng::stream(seed, &format!("split/{cell}"));
        idx.shuffle(&mut cell_rng);
        let n_val = ((idx.len() as f64 * val_frac).round() as usize).clamp(1, idx.len() - 1);
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
        normalizers: ds.normalizers.clone(),
        schema_version: ds.schema_version,
    };
    Ok((pick(&train_idx), pick(&val_idx)))
}

/// Restrict a dataset to one hardware id (normalizers inherited).
pub fn restrict_hardware(ds: &Dataset, hardware_id: &str) -> Result<Dataset> {
    let samples: Vec<ExperienceSample> =
        ds.samples.iter().filter(|s| s.hardware_id == hardware_id).cloned().collect();
    if samples.is_empty() {
        return Err(Error::Arg(format!("hardware '{hardware_id}' absent from dataset")));
    }
    Ok(Dataset {
        samples,
        normalizers: ds.normalizers.clone(),
        schema_version: ds.schema_version,
    })
}

/// High-quality fine-tune subset: keep only `hardware_id`, then per workload
/// keep the top_q fraction by achieved throughput. Normalizers are inherited
/// from the parent so goals keep their original meaning.
pub fn filter_finetune(ds: &Dataset, hardware_id: &str, top_q: f64) -> Result<Dataset> {
    if !(top_q > 0.0 && top_q <= 1.0) {
        return Err(Error::Arg(format!("top_q {top_q} must lie in (0,1]")));
    }
    let restricted = restrict_hardware(ds, hardware_id)?;
    let mut by_wl: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in restricted.samples.iter().enumerate() {
        by_wl.entry(s.workload_id.clone()).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (_, mut idx) in by_wl {
        idx.sort_by(|&a, &b| {
            restricted.samples[b]
                .achieved_mops
                .partial_cmp(&restricted.samples[a].achieved_mops)
                .unwrap()
        });
        let n = ((idx.len() as f64 * top_q + 0.5).floor() as usize).clamp(1, idx.len());
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    Ok(Dataset {
        samples: keep.into_iter().map(|i| restricted.samples[i].clone()).collect(),
        normalizers: restricted.normalizers,
        schema_version: restricted.schema_version,
    })
}
