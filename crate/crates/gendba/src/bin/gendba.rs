//! Command-line entry point for the full pipeline: listing, collection,
//! training phases, rollout, evaluation, and chart emission. Every run
//! writes a manifest (resolved config + input content hashes) to --out-dir.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gendba::error::Result;
use gendba::infer::{
    evaluate, goal_sweep, rollout, DecodeMode, EvalReport, PolicySource, RolloutConfig,
};
use gendba::manifest::Manifest;
use gendba::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use gendba::plot::emit_plots;
use gendba::sim::{
    builtin_profiles, builtin_workloads, execute_policy, profile_by_id, workload_by_id,
    HardwareProfile, WorkloadSpec,
};
use gendba::training::{posttrain, pretrain, train_instance, RunConfig, TrainOutput};
use gendba::{experience, model::checkpoint_hash};

#[derive(Parser, Debug)]
#[command(name = "gendba", version, about = "Goal-conditioned scheduling policy generator")]
struct Cli {
    /// Master seed for all stochastic stages.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for manifests, metrics, and default outputs.
    #[arg(long, global = true, default_value = "gendba-out")]
    out_dir: PathBuf,

    /// Logging verbosity: off, info, debug.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// List builtin hardware profiles.
    ListHw,
    /// List builtin workload specs.
    ListWl,
    /// Collect an experience dataset over the hardware x workload grid.
    Collect {
        /// Hardware profile ids (comma-separated); "all" for every builtin.
        #[arg(long, value_delimiter = ',', required = true)]
        hw: Vec<String>,
        /// Workload ids (comma-separated); "all" for every builtin.
        #[arg(long, value_delimiter = ',', required = true)]
        wl: Vec<String>,
        /// Samples per (hardware, workload) cell.
        #[arg(long)]
        per_cell: usize,
        /// Output dataset path (JSONL).
        #[arg(long)]
        dataset: PathBuf,
        /// Data slices per sampled policy.
        #[arg(long, default_value_t = 256)]
        slices: usize,
    },
    /// Pre-train a generalist model on a collected dataset.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        /// Optional JSON training spec ({"model": ..., "run": ...}).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Fine-tune a pretrained base on a target hardware's best samples.
    Posttrain {
        /// Base (pretrained) checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Target hardware profile id.
        #[arg(long)]
        hw: String,
        /// Keep this top fraction of samples per workload, by throughput.
        #[arg(long, default_value_t = 0.5)]
        top_q: f64,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Train an instance-specific model from scratch on one hardware.
    TrainInstance {
        #[arg(long)]
        hw: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Generate one policy and execute it closed-loop.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        hw: String,
        #[arg(long)]
        wl: String,
        #[arg(long, default_value_t = 0.9)]
        goal: f64,
        /// "greedy" or "sample:T" (temperature T).
        #[arg(long, default_value = "greedy")]
        mode: String,
    },
    /// Closed-loop comparison of checkpoints against baselines.
    Evaluate {
        /// Checkpoint paths (comma-separated); may be empty.
        #[arg(long, value_delimiter = ',')]
        ckpts: Vec<PathBuf>,
        /// "all" or comma-separated baseline names (os-d,os-i,se-n,sn-n).
        #[arg(long, default_value = "all")]
        baselines: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Output report path (CSV).
        #[arg(long)]
        report: PathBuf,
        /// Hardware ids; "all" for every builtin.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        hw: Vec<String>,
        /// Workload ids; "all" for every builtin.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        wl: Vec<String>,
        /// Slices for baseline policies (overridden by checkpoint layouts).
        #[arg(long, default_value_t = 256)]
        slices: usize,
        /// Rollout goal for model sources.
        #[arg(long, default_value_t = 0.9)]
        goal: f64,
    },
    /// Mean achieved throughput per goal over sampled rollouts.
    GoalSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        hw: String,
        #[arg(long)]
        wl: String,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,0.9")]
        goals: Vec<f64>,
        /// Rollouts per goal.
        #[arg(long, default_value_t = 50)]
        n: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit grouped-bar charts from an evaluation report.
    Plot {
        #[arg(long)]
        report: PathBuf,
    },
}

/// Convenience overrides applied on top of the training spec.
#[derive(Args, Debug)]
struct RunOverrides {
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

/// JSON training spec: partial model and run configs over the defaults.
#[derive(Debug, Default, Deserialize)]
struct TrainSpec {
    model: Option<ModelConfig>,
    run: Option<RunConfig>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn log(cli: &Cli, msg: &str) {
    if cli.log_level != "off" {
        eprintln!("[gendba] {msg}");
    }
}

fn resolve_hw(ids: &[String]) -> Result<Vec<HardwareProfile>> {
    if ids.iter().any(|s| s == "all") {
        return Ok(builtin_profiles());
    }
    ids.iter().map(|id| profile_by_id(id)).collect()
}

fn resolve_wl(ids: &[String]) -> Result<Vec<WorkloadSpec>> {
    if ids.iter().any(|s| s == "all") {
        return Ok(builtin_workloads());
    }
    ids.iter().map(|id| workload_by_id(id)).collect()
}

fn parse_mode(mode: &str) -> Result<DecodeMode> {
    if mode == "greedy" {
        return Ok(DecodeMode::Greedy);
    }
    if let Some(t) = mode.strip_prefix("sample:") {
        let temperature: f64 = t.parse().map_err(|_| {
            gendba::error::Error::Arg(format!("bad temperature in mode '{mode}'"))
        })?;
        return Ok(DecodeMode::Sample { temperature });
    }
    Err(gendba::error::Error::Arg(format!(
        "mode must be 'greedy' or 'sample:T', got '{mode}'"
    )))
}

fn load_spec(path: Option<&PathBuf>, manifest: &mut Manifest) -> Result<TrainSpec> {
    match path {
        None => Ok(TrainSpec::default()),
        Some(p) => {
            manifest.record_input(p)?;
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn resolve_run(spec: &TrainSpec, base: RunConfig, seed: u64, ov: &RunOverrides) -> RunConfig {
    let mut run = spec.run.clone().unwrap_or(base);
    run.seed = seed;
    if let Some(s) = ov.max_steps {
        run.max_steps = s;
    }
    if let Some(b) = ov.batch_size {
        run.batch_size = b;
    }
    if let Some(lr) = ov.lr {
        run.lr = lr;
    }
    run
}

fn finish_training(
    cli: &Cli,
    out: &TrainOutput,
    ckpt: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    if out.diverged {
        log(cli, "training diverged; retaining last good parameters");
    }
    save_checkpoint(&out.best_model, ckpt)?;
    manifest.record_output(ckpt);
    log(
        cli,
        &format!(
            "saved {} checkpoint to {} ({} steps, best val loss {:.4})",
            out.best_model.meta.phase,
            ckpt.display(),
            out.steps_run,
            out.best_val_loss
        ),
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::ListHw => {
            let manifest = Manifest::new("list-hw", cli.seed);
            for hw in builtin_profiles() {
                println!(
                    "{}  ({} nodes x {} cores/node)",
                    hw.id,
                    hw.nodes(),
                    hw.cores_per_node
                );
            }
            manifest.write(&cli.out_dir)
        }
        Cmd::ListWl => {
            let manifest = Manifest::new("list-wl", cli.seed);
            for wl in builtin_workloads() {
                println!("{}", wl.id);
            }
            manifest.write(&cli.out_dir)
        }
        Cmd::Collect { hw, wl, per_cell, dataset, slices } => {
            let mut manifest = Manifest::new("collect", cli.seed);
            manifest.set("hw", hw);
            manifest.set("wl", wl);
            manifest.set("per_cell", per_cell);
            manifest.set("slices", slices);
            manifest.set("dataset", dataset.display().to_string());
            let hw_list = resolve_hw(hw)?;
            let wl_list = resolve_wl(wl)?;
            let ds = experience::collect(&hw_list, &wl_list, *per_cell, *slices, cli.seed)?;
            experience::save(&ds, dataset)?;
            manifest.record_output(dataset);
            log(cli, &format!("collected {} samples into {}", ds.samples.len(), dataset.display()));
            manifest.write(&cli.out_dir)
        }
        Cmd::Pretrain { dataset, config, ckpt, overrides } => {
            let mut manifest = Manifest::new("pretrain", cli.seed);
            manifest.record_input(dataset)?;
            let spec = load_spec(config.as_ref(), &mut manifest)?;
            let model_cfg = spec.model.clone().unwrap_or_default();
            let run = resolve_run(&spec, RunConfig::pretrain_defaults(), cli.seed, overrides);
            manifest.set("model_config", &model_cfg);
            manifest.set("run_config", &run);
            let ds = experience::load(dataset)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let metrics = cli.out_dir.join("metrics-pretrain.csv");
            let out = pretrain(&ds, &model_cfg, &run, Some(&metrics))?;
            manifest.record_output(&metrics);
            finish_training(cli, &out, ckpt, &mut manifest)?;
            manifest.write(&cli.out_dir)
        }
        Cmd::Posttrain { base, hw, top_q, dataset, config, ckpt, overrides } => {
            let mut manifest = Manifest::new("posttrain", cli.seed);
            manifest.record_input(base)?;
            manifest.record_input(dataset)?;
            manifest.set("hw", hw);
            manifest.set("top_q", top_q);
            let spec = load_spec(config.as_ref(), &mut manifest)?;
            let run = resolve_run(&spec, RunConfig::posttrain_defaults(), cli.seed, overrides);
            manifest.set("run_config", &run);
            let base_hash = checkpoint_hash(base)?;
            let base_model = load_checkpoint(base)?;
            let ds = experience::load(dataset)?;
            let ft = experience::filter_finetune(&ds, hw, *top_q)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let metrics = cli.out_dir.join("metrics-posttrain.csv");
            let out = posttrain(base_model, Some(base_hash), &ft, hw, &run, Some(&metrics))?;
            manifest.record_output(&metrics);
            finish_training(cli, &out, ckpt, &mut manifest)?;
            manifest.write(&cli.out_dir)
        }
        Cmd::TrainInstance { hw, dataset, config, ckpt, overrides } => {
            let mut manifest = Manifest::new("train-instance", cli.seed);
            manifest.record_input(dataset)?;
            manifest.set("hw", hw);
            let spec = load_spec(config.as_ref(), &mut manifest)?;
            let model_cfg = spec.model.clone().unwrap_or_default();
            let run = resolve_run(&spec, RunConfig::pretrain_defaults(), cli.seed, overrides);
            manifest.set("model_config", &model_cfg);
            manifest.set("run_config", &run);
            let ds = experience::load(dataset)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let metrics = cli.out_dir.join("metrics-instance.csv");
            let out = train_instance(&ds, hw, &model_cfg, &run, Some(&metrics))?;
            manifest.record_output(&metrics);
            finish_training(cli, &out, ckpt, &mut manifest)?;
            manifest.write(&cli.out_dir)
        }
        Cmd::Rollout { ckpt, hw, wl, goal, mode } => {
            let mut manifest = Manifest::new("rollout", cli.seed);
            manifest.record_input(ckpt)?;
            manifest.set("hw", hw);
            manifest.set("wl", wl);
            manifest.set("goal", goal);
            manifest.set("mode", mode);
            let model = load_checkpoint(ckpt)?;
            let hw_p = profile_by_id(hw)?;
            let wl_s = workload_by_id(wl)?;
            let cfg = RolloutConfig { mode: parse_mode(mode)?, goal: *goal, seed: cli.seed };
            let policy = rollout(&model, &hw_p, &wl_s, &cfg)?;
            let outcome = execute_policy(&hw_p, &wl_s, &policy, cli.seed)?;
            let record = serde_json::json!({
                "hardware_id": hw,
                "workload_id": wl,
                "goal": goal,
                "policy": policy.assignment,
                "throughput_mops": outcome.throughput_mops,
            });
            println!("{}", serde_json::to_string(&record)?);
            std::fs::create_dir_all(&cli.out_dir)?;
            let out_path = cli.out_dir.join("rollout.json");
            std::fs::write(&out_path, serde_json::to_string_pretty(&record)?)?;
            manifest.record_output(&out_path);
            manifest.write(&cli.out_dir)
        }
        Cmd::Evaluate { ckpts, baselines, seeds, report, hw, wl, slices, goal } => {
            let mut manifest = Manifest::new("evaluate", cli.seed);
            manifest.set("baselines", baselines);
            manifest.set("seeds", seeds);
            manifest.set("hw", hw);
            manifest.set("wl", wl);
            manifest.set("goal", goal);
            let baseline_names: Vec<String> = if baselines == "all" {
                ["os-d", "os-i", "se-n", "sn-n"].iter().map(|s| s.to_string()).collect()
            } else {
                baselines.split(',').map(|s| s.to_string()).collect()
            };
            let mut models: Vec<(String, Model)> = Vec::new();
            for p in ckpts {
                manifest.record_input(p)?;
                let m = load_checkpoint(p)?;
                let label = format!(
                    "model-{}-{}",
                    m.meta.phase,
                    p.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt")
                );
                models.push((label, m));
            }
            let slices = models.first().map(|(_, m)| m.layout.slice_count).unwrap_or(*slices);
            let mut sources: Vec<PolicySource> = baseline_names
                .iter()
                .map(|n| PolicySource::Baseline(n))
                .collect();
            for (label, m) in &models {
                sources.push(PolicySource::Model { label: label.clone(), model: m, goal: *goal });
            }
            let hw_list = resolve_hw(hw)?;
            let wl_list = resolve_wl(wl)?;
            let rep = evaluate(&sources, &hw_list, &wl_list, *seeds, slices)?;
            rep.save_csv(report)?;
            manifest.record_output(report);
            println!("{}", rep.to_csv());
            manifest.write(&cli.out_dir)
        }
        Cmd::GoalSweep { ckpt, hw, wl, goals, n, out } => {
            let mut manifest = Manifest::new("goal-sweep", cli.seed);
            manifest.record_input(ckpt)?;
            manifest.set("hw", hw);
            manifest.set("wl", wl);
            manifest.set("goals", goals);
            manifest.set("n", n);
            let model = load_checkpoint(ckpt)?;
            let hw_p = profile_by_id(hw)?;
            let wl_s = workload_by_id(wl)?;
            let rows = goal_sweep(&model, &hw_p, &wl_s, goals, *n, cli.seed)?;
            let mut csv = String::from("goal,mean_mops,n\n");
            for r in &rows {
                csv.push_str(&format!("{:?},{:?},{}\n", r.goal, r.mean_mops, r.samples.len()));
            }
            std::fs::write(out, &csv)?;
            manifest.record_output(out);
            print!("{csv}");
            manifest.write(&cli.out_dir)
        }
        Cmd::Plot { report } => {
            let mut manifest = Manifest::new("plot", cli.seed);
            manifest.record_input(report)?;
            let rep = EvalReport::load_csv(report)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let paths = emit_plots(&rep, &cli.out_dir)?;
            for p in &paths {
                manifest.record_output(p);
                log(cli, &format!("wrote {}", p.display()));
            }
            manifest.write(&cli.out_dir)
        }
    }
}
