//! Acceptance suite: one test and one printed PASS/FAIL line per criterion.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//!
//! Criteria 6-8 and 10 share one trained pipeline (desk dataset, pretrained
//! generalist, per-target specialists, instance model, tiny-instance model)
//! built once behind a OnceLock.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use gendba::baselines;
use gendba::experience;
use gendba::infer::{
    rank_sum_p_greater, rollout, summarize, DecodeMode, RolloutConfig,
};
use gendba::model::{
    batch_loss, load_checkpoint, save_checkpoint, Model, ModelConfig,
};
use gendba::rng;
use gendba::sim::{
    builtin_workloads, enumerate_optimal, execute_policy, profile_by_id, tiny_two_node,
    workload_by_id, HardwareProfile, KeySkew, OpMix, SchedulingPolicy, WorkloadSpec,
};
use gendba::tensor::{Tape, Tensor, Var};
use gendba::tokenizer::{NormStats, TokenLayout};
use gendba::training::{posttrain, pretrain, train_instance, RunConfig};

const MULTI_NODE_HW: [&str; 4] = ["milan-like", "skylakex-like", "small-a", "small-b"];
const TARGET_HW: &str = "small-b";
const DESK_SLICES: usize = 96;

fn check(criterion: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion} ({name}): {verdict} {detail}");
    assert!(ok, "criterion {criterion} ({name}) failed: {detail}");
}

fn small_cfg(context_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 48,
        n_layers: 2,
        n_heads: 4,
        d_ff: 192,
        context_len,
        vocab_size: 260,
        dropout_rate: 0.0,
    }
}

fn desk_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        context_len: 17 + DESK_SLICES,
        vocab_size: 260,
        dropout_rate: 0.1,
    }
}

struct Pipeline {
    pretrained: Model,
    /// Per-target specialists for every multi-node profile.
    posttrained: BTreeMap<String, Model>,
    instance: Model,
    tiny_posttrained: Model,
}

fn pipeline() -> &'static Pipeline {
    static PIPE: OnceLock<Pipeline> = OnceLock::new();
    PIPE.get_or_init(|| {
        let t0 = Instant::now();
        let hw_list: Vec<HardwareProfile> = gendba::sim::builtin_profiles();
        let wl_list = builtin_workloads();

        eprintln!("[acceptance] collecting desk dataset ...");
        let desk_ds = experience::collect(&hw_list, &wl_list, 40, DESK_SLICES, 1).unwrap();

        eprintln!("[acceptance] pretraining generalist ({} samples) ...", desk_ds.samples.len());
        let pre_run = RunConfig {
            batch_size: 16,
            lr: 3e-4,
            warmup_steps: 100,
            max_steps: 3000,
            grad_clip: 1.0,
            seed: 0,
            val_frac: 0.1,
            eval_every: 200,
            micro_batch: 4,
            patience: None,
        };
        let pretrained = pretrain(&desk_ds, &desk_cfg(), &pre_run, None).unwrap().best_model;
        eprintln!("[acceptance] pretrain done at {:?}", t0.elapsed());

        let mut posttrained = BTreeMap::new();
        for hw in MULTI_NODE_HW {
            eprintln!("[acceptance] posttraining on {hw} ...");
            let ft = experience::filter_finetune(&desk_ds, hw, 0.25).unwrap();
            let run = RunConfig {
                lr: 1e-4,
                max_steps: 400,
                eval_every: 50,
                patience: Some(5),
                ..pre_run.clone()
            };
            let out = posttrain(pretrained.clone(), None, &ft, hw, &run, None).unwrap();
            posttrained.insert(hw.to_string(), out.best_model);
        }
        eprintln!("[acceptance] posttraining done at {:?}", t0.elapsed());

        eprintln!("[acceptance] training instance model on {TARGET_HW} ...");
        let inst_run = RunConfig { max_steps: 1500, ..pre_run.clone() };
        let instance =
            train_instance(&desk_ds, TARGET_HW, &desk_cfg(), &inst_run, None).unwrap().best_model;

        eprintln!("[acceptance] training tiny-instance pipeline ...");
        let tiny_hw = vec![tiny_two_node()];
        let tiny_ds = experience::collect(&tiny_hw, &wl_list, 40, 4, 2).unwrap();
        let tiny_run = RunConfig { max_steps: 1500, eval_every: 100, ..pre_run.clone() };
        let tiny_pretrained =
            pretrain(&tiny_ds, &small_cfg(21), &tiny_run, None).unwrap().best_model;
        let tiny_ft = experience::filter_finetune(&tiny_ds, "tiny-2n2c", 0.25).unwrap();
        let tiny_post_run = RunConfig {
            lr: 1e-4,
            max_steps: 400,
            eval_every: 50,
            patience: Some(5),
            ..tiny_run
        };
        let tiny_posttrained =
            posttrain(tiny_pretrained.clone(), None, &tiny_ft, "tiny-2n2c", &tiny_post_run, None)
                .unwrap()
                .best_model;
        eprintln!("[acceptance] pipeline built in {:?}", t0.elapsed());

        Pipeline { pretrained, posttrained, instance, tiny_posttrained }
    })
}

/// Median greedy-rollout throughput over `seeds` probe seeds.
fn greedy_median(model: &Model, hw: &HardwareProfile, wl: &WorkloadSpec, seeds: u64) -> f64 {
    let xs: Vec<f64> = (0..seeds)
        .map(|s| {
            let cfg = RolloutConfig { mode: DecodeMode::Greedy, goal: 0.9, seed: s };
            let policy = rollout(model, hw, wl, &cfg).unwrap();
            execute_policy(hw, wl, &policy, s).unwrap().throughput_mops
        })
        .collect();
    summarize(xs).0
}

fn baseline_median(name: &str, hw: &HardwareProfile, wl: &WorkloadSpec, slices: usize, seeds: u64) -> f64 {
    let policy = baselines::by_name(name, hw, slices).unwrap();
    let xs: Vec<f64> = (0..seeds)
        .map(|s| execute_policy(hw, wl, &policy, s).unwrap().throughput_mops)
        .collect();
    summarize(xs).0
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient integrity for every op + a full 1-layer model.
// ---------------------------------------------------------------------------

/// Finite-difference check of d(sum(build(inputs)))/d(inputs).
fn fd_check(name: &str, shapes: &[Vec<usize>], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut r = rng::stream(7, &format!("fd/{name}"));
    let tensors: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| r.gen_range(-0.9..0.9)).collect()).unwrap()
        })
        .collect();
    let run = |ts: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> =
            ts.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let out = build(&mut tape, &leaves);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let grads = leaves.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        (tape.data(loss)[0], grads)
    };
    let (_, grads) = run(&tensors);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (ti, t) in tensors.iter().enumerate() {
        for i in 0..t.numel() {
            let mut up = tensors.clone();
            up[ti].data[i] += h;
            let mut dn = tensors.clone();
            dn[ti].data[i] -= h;
            let fd = (run(&up).0 - run(&dn).0) / (2.0 * h);
            let a = grads[ti][i];
            let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name} input {ti} entry {i}: analytic {a} vs fd {fd}");
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn criterion_1_gradient_integrity() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut cover = |w: f64| worst = worst.max(w);

    cover(fd_check("matmul", &[vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap()));
    cover(fd_check("conv2d", &[vec![2, 5, 4], vec![3, 2, 3, 3]], |t, v| {
        t.conv2d(v[0], v[1], 1, 1).unwrap()
    }));
    cover(fd_check("add", &[vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1]).unwrap()));
    cover(fd_check("sub", &[vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1]).unwrap()));
    cover(fd_check("mul", &[vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1]).unwrap()));
    cover(fd_check("add_row_bias", &[vec![3, 4], vec![4]], |t, v| {
        t.add_row_bias(v[0], v[1]).unwrap()
    }));
    cover(fd_check("add_chan_bias", &[vec![2, 3, 4], vec![2]], |t, v| {
        t.add_chan_bias(v[0], v[1]).unwrap()
    }));
    cover(fd_check("scale", &[vec![3, 4]], |t, v| t.scale(v[0], -1.7)));
    cover(fd_check("add_scalar", &[vec![3, 4]], |t, v| t.add_scalar(v[0], 0.3)));
    cover(fd_check("tanh", &[vec![3, 4]], |t, v| t.tanh(v[0])));
    cover(fd_check("gelu", &[vec![3, 4]], |t, v| t.gelu(v[0])));
    cover(fd_check("softmax_rows", &[vec![3, 5]], |t, v| t.softmax_rows(v[0]).unwrap()));
    cover(fd_check("layer_norm", &[vec![3, 6], vec![6], vec![6]], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    }));
    cover(fd_check("embed", &[vec![5, 4]], |t, v| t.embed(v[0], &[1, 3, 1, 0]).unwrap()));
    cover(fd_check("reshape", &[vec![3, 4]], |t, v| {
        let y = t.reshape(v[0], vec![2, 6]).unwrap();
        t.gelu(y)
    }));
    cover(fd_check("transpose", &[vec![3, 4]], |t, v| {
        let y = t.transpose(v[0]).unwrap();
        t.gelu(y)
    }));
    cover(fd_check("masked_fill", &[vec![2, 3]], |t, v| {
        t.masked_fill(v[0], &[true, false, false, false, true, false], -2.0).unwrap()
    }));
    cover(fd_check("softmax_cross_entropy", &[vec![3, 7]], |t, v| {
        t.softmax_cross_entropy(v[0], &[2, 0, 6], &[true, false, true]).unwrap()
    }));
    cover(fd_check("sum_all", &[vec![3, 4]], |t, v| t.sum_all(v[0])));
    cover(fd_check("mean_all", &[vec![3, 4]], |t, v| t.mean_all(v[0])));
    cover(fd_check("concat_rows", &[vec![2, 4], vec![3, 4]], |t, v| {
        t.concat_rows(&[v[0], v[1]]).unwrap()
    }));
    cover(fd_check("mul_const", &[vec![2, 3]], |t, v| {
        t.mul_const(v[0], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap()
    }));

    // Full 1-layer reduced model: one finite-difference probe per parameter.
    let cfg = ModelConfig { n_layers: 1, ..small_cfg(21) };
    let layout = TokenLayout::new(cfg.d_model, 4, NormStats::identity());
    let mut m = Model::init(cfg, layout, 3).unwrap();
    let mut r = rng::stream(3, "head");
    for key in ["head.w", "head.b"] {
        for v in &mut m.params.get_mut(key).unwrap().data {
            *v = r.gen_range(-0.05..0.05);
        }
    }
    let hw = tiny_two_node();
    let ds = experience::collect(&[hw.clone()], &[workload_by_id("ycsb-a").unwrap()], 4, 4, 5)
        .unwrap();
    let sample = &ds.samples[0];
    let loss_of = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let vars = m.leaf_vars(&mut tape);
        let loss =
            batch_loss(&mut tape, &vars, &m.config, &m.layout, &[(&hw, sample)], None).unwrap();
        tape.data(loss)[0]
    };
    let mut tape = Tape::new();
    let vars = m.leaf_vars(&mut tape);
    let loss =
        batch_loss(&mut tape, &vars, &m.config, &m.layout, &[(&hw, sample)], None).unwrap();
    tape.backward(loss).unwrap();
    let mut graded = m.clone();
    graded.absorb_grads(&tape, &vars).unwrap();
    let names: Vec<String> = m.params.keys().cloned().collect();
    let mut pick = rng::stream(3, "pick");
    for name in names {
        let idx = pick.gen_range(0..m.params[&name].numel());
        let analytic = graded.params[&name].grad.as_ref().unwrap()[idx];
        let h = 1e-5;
        let orig = m.params[&name].data[idx];
        m.params.get_mut(&name).unwrap().data[idx] = orig + h;
        let up = loss_of(&m);
        m.params.get_mut(&name).unwrap().data[idx] = orig - h;
        let down = loss_of(&m);
        m.params.get_mut(&name).unwrap().data[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-7);
        assert!(rel < 1e-3, "model param {name}[{idx}]: analytic {analytic} vs fd {fd}");
        cover(rel);
    }

    let elapsed = started.elapsed();
    check(
        1,
        "gradient integrity",
        elapsed.as_secs() < 60,
        &format!("worst rel err {worst:.2e}, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: initial-loss oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_initial_loss_oracle() {
    // Default full-size config, zero final projection by construction.
    let cfg = ModelConfig::default();
    let hw = tiny_two_node();
    let ds = experience::collect(&[hw.clone()], &[workload_by_id("ycsb-a").unwrap()], 4, 256, 8)
        .unwrap();
    let stats = NormStats::fit(ds.samples.iter().map(|s| &s.telemetry)).unwrap();
    let layout = TokenLayout::new(cfg.d_model, 256, stats);
    let m = Model::init(cfg, layout, 0).unwrap();
    let expected = (260f64).ln();
    let mut worst = 0.0f64;
    for pair in ds.samples.chunks(2) {
        let batch: Vec<_> = pair.iter().map(|s| (&hw, s)).collect();
        let mut tape = Tape::new();
        let vars = m.leaf_vars(&mut tape);
        let loss =
            batch_loss(&mut tape, &vars, &m.config, &m.layout, &batch, None).unwrap();
        worst = worst.max((tape.data(loss)[0] - expected).abs());
    }
    check(
        2,
        "initial-loss oracle",
        worst <= 1e-9,
        &format!("max |loss - ln(260)| = {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: 16-sample overfit.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_overfit() {
    let started = Instant::now();
    // 16 distinct (hardware, workload) cells, one sample each, so every
    // sample is identified by its telemetry image.
    let hw = vec![
        gendba::sim::tiny_single_node(),
        tiny_two_node(),
        profile_by_id("small-a").unwrap(),
        profile_by_id("small-b").unwrap(),
    ];
    let wl: Vec<WorkloadSpec> =
        ["read-uniform", "ycsb-a", "read-zipf", "update-heavy"]
            .iter()
            .map(|id| workload_by_id(id).unwrap())
            .collect();
    let ds = experience::collect(&hw, &wl, 1, 8, 3).unwrap();
    assert_eq!(ds.samples.len(), 16);
    let run = RunConfig {
        batch_size: 16,
        lr: 2e-3,
        warmup_steps: 100,
        max_steps: 2000,
        grad_clip: 1.0,
        seed: 0,
        val_frac: 0.0,
        eval_every: 100,
        micro_batch: 4,
        patience: None,
    };
    let cfg = ModelConfig { d_model: 64, d_ff: 256, ..small_cfg(25) };
    let out = pretrain(&ds, &cfg, &run, None).unwrap();
    // Full-batch masked loss of the final parameters, no dropout.
    let m = &out.model;
    let batch: Vec<_> = ds
        .samples
        .iter()
        .map(|s| (hw.iter().find(|h| h.id == s.hardware_id).unwrap(), s))
        .collect();
    let mut tape = Tape::new();
    let vars = m.leaf_vars(&mut tape);
    let loss = batch_loss(&mut tape, &vars, &m.config, &m.layout, &batch, None).unwrap();
    let final_loss = tape.data(loss)[0];
    let elapsed = started.elapsed();
    check(
        3,
        "16-sample overfit",
        final_loss < 0.05 && out.steps_run <= 2000 && elapsed.as_secs() < 600,
        &format!("loss {final_loss:.4} after {} steps, {elapsed:?}", out.steps_run),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: simulator oracle agreement.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_simulator_oracle() {
    let hw = tiny_two_node();
    let wl = workload_by_id("ycsb-a").unwrap();
    // Brute force over all 4^4 = 256 policies with execute_policy.
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut n = 0;
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let pol = SchedulingPolicy::new(vec![a, b, c, d]);
                    let t = execute_policy(&hw, &wl, &pol, 0).unwrap().throughput_mops;
                    n += 1;
                    match &best {
                        Some((_, bt)) if t <= *bt => {}
                        _ => best = Some((pol.assignment.clone(), t)),
                    }
                }
            }
        }
    }
    let (brute_pol, brute_t) = best.unwrap();
    let (opt_pol, opt_t) = enumerate_optimal(&hw, &wl, 0, 4).unwrap();
    let agree = opt_pol.assignment == brute_pol && opt_t.to_bits() == brute_t.to_bits();

    // Hand-derived cost examples on the single-node toy machine.
    let hw1 = gendba::sim::tiny_single_node();
    let reads = WorkloadSpec {
        id: "acc-reads".into(),
        op_mix: OpMix { read: 1.0, write: 0.0, insert: 0.0, scan: 0.0 },
        key_skew: KeySkew::Uniform,
        ops_total: 1000,
        scan_len: 16,
        shared_access_frac: 0.0,
    };
    let balanced = execute_policy(&hw1, &reads, &SchedulingPolicy::new(vec![0, 0, 1, 1]), 1)
        .unwrap()
        .throughput_mops;
    let piled = execute_policy(&hw1, &reads, &SchedulingPolicy::new(vec![0, 0, 0, 0]), 1)
        .unwrap()
        .throughput_mops;
    check(
        4,
        "simulator oracle agreement",
        agree && n == 256 && balanced == 10.0 && piled == 5.0,
        &format!(
            "optimum {:?} @ {opt_t} Mops over {n} policies; hand examples {balanced}/{piled}"
        , opt_pol.assignment),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: baseline semantics.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_baseline_semantics() {
    let tiny = tiny_two_node();
    let osi_ok = baselines::os_interleave(&tiny, 4).assignment == vec![0, 2, 1, 3];

    let mut snn_ok = true;
    let mut det_ok = true;
    for hw in gendba::sim::builtin_profiles().iter().chain([&tiny]) {
        for s in [1, 4, 7, 16, 96, 256] {
            // SN:N pins each slice to one core, so the executing core *is*
            // the placement: every slice's core lies on its block's node.
            let p = baselines::sn_numa(hw, s);
            let block = s.div_ceil(hw.nodes());
            snn_ok &= p.assignment.len() == s
                && p.assignment == baselines::sn_numa(hw, s).assignment
                && p.assignment.iter().enumerate().all(|(i, &c)| {
                    hw.node_of_core(c) == (i / block).min(hw.nodes() - 1)
                });
            for name in baselines::BASELINE_NAMES {
                let a = baselines::by_name(name, hw, s).unwrap();
                let b = baselines::by_name(name, hw, s).unwrap();
                det_ok &= a.assignment == b.assignment;
            }
        }
    }
    check(
        5,
        "baseline semantics",
        osi_ok && snn_ok && det_ok,
        &format!("os-i tiny ok={osi_ok}, sn-n schedule==placement ok={snn_ok}, deterministic={det_ok}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: closed-loop competence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_closed_loop_competence() {
    let p = pipeline();
    let wl = workload_by_id("ycsb-a").unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for hw_id in MULTI_NODE_HW {
        let hw = profile_by_id(hw_id).unwrap();
        let model = &p.posttrained[hw_id];
        let model_med = greedy_median(model, &hw, &wl, 20);
        let osd_med = baseline_median("os-d", &hw, &wl, DESK_SLICES, 20);
        let ratio = model_med / osd_med;
        ok &= ratio >= 1.15;
        detail.push_str(&format!("{hw_id}: {ratio:.3}x os-d; "));
    }
    // Tiny instance: greedy medians within 0.90x of the exhaustive optimum.
    let tiny = tiny_two_node();
    let (_, opt_t) = enumerate_optimal(&tiny, &wl, 0, 4).unwrap();
    let tiny_med = greedy_median(&p.tiny_posttrained, &tiny, &wl, 20);
    let tiny_ratio = tiny_med / opt_t;
    ok &= tiny_ratio >= 0.90;
    detail.push_str(&format!("tiny: {tiny_ratio:.3}x optimum"));
    check(6, "closed-loop competence", ok, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 7: goal-conditioning monotonicity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_goal_monotonicity() {
    let p = pipeline();
    let hw = profile_by_id(TARGET_HW).unwrap();
    let wl = workload_by_id("ycsb-a").unwrap();
    let model = &p.posttrained[TARGET_HW];
    let rows = gendba::infer::goal_sweep(model, &hw, &wl, &[0.3, 0.9], 50, 11).unwrap();
    let low = &rows[0];
    let high = &rows[1];
    let pval = rank_sum_p_greater(&high.samples, &low.samples).unwrap();
    check(
        7,
        "goal monotonicity",
        high.mean_mops >= low.mean_mops && pval < 0.05,
        &format!(
            "mean@0.9 {:.2} vs mean@0.3 {:.2}, one-sided p = {pval:.4}",
            high.mean_mops, low.mean_mops
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: generalist/specialist structure.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_generalist_specialist() {
    let p = pipeline();
    let hw = profile_by_id(TARGET_HW).unwrap();
    let wl = workload_by_id("ycsb-a").unwrap();
    let pre = greedy_median(&p.pretrained, &hw, &wl, 20);
    let post = greedy_median(&p.posttrained[TARGET_HW], &hw, &wl, 20);
    let inst = greedy_median(&p.instance, &hw, &wl, 20);
    let phases_ok = p.pretrained.meta.phase == "pretrained"
        && p.posttrained[TARGET_HW].meta.phase == "posttrained"
        && p.instance.meta.phase == "instance";
    // Pretrained-vs-instance delta is reported without a pass threshold.
    let inst_delta = (pre - inst) / inst * 100.0;
    check(
        8,
        "generalist/specialist structure",
        phases_ok && post >= pre * 0.99,
        &format!(
            "{TARGET_HW}: pretrained {pre:.2}, posttrained {post:.2}, instance {inst:.2} \
             (generalist vs instance delta {inst_delta:+.2}%)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism & round-trips.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let hw = vec![tiny_two_node()];
    let wl = vec![workload_by_id("ycsb-a").unwrap()];

    // Datasets: bit-identical across runs and across save/load.
    let ds_a = experience::collect(&hw, &wl, 8, 8, 42).unwrap();
    let ds_b = experience::collect(&hw, &wl, 8, 8, 42).unwrap();
    let ds_path = dir.path().join("ds.jsonl");
    experience::save(&ds_a, &ds_path).unwrap();
    let ds_back = experience::load(&ds_path).unwrap();
    let datasets_ok = ds_a == ds_b && ds_back == ds_a;

    // Checkpoints: identical training runs give identical bytes; round-trip
    // is exact to the bit.
    let run = RunConfig {
        batch_size: 8,
        lr: 3e-4,
        warmup_steps: 10,
        max_steps: 30,
        grad_clip: 1.0,
        seed: 5,
        val_frac: 0.0,
        eval_every: 10,
        micro_batch: 4,
        patience: None,
    };
    let m1 = pretrain(&ds_a, &small_cfg(25), &run, None).unwrap().model;
    let m2 = pretrain(&ds_a, &small_cfg(25), &run, None).unwrap().model;
    let p1 = dir.path().join("m1.json");
    let p2 = dir.path().join("m2.json");
    save_checkpoint(&m1, &p1).unwrap();
    save_checkpoint(&m2, &p2).unwrap();
    let ckpt_bytes_ok = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let back = load_checkpoint(&p1).unwrap();
    let round_trip_ok = m1.params.iter().all(|(k, t)| {
        t.data.iter().zip(&back.params[k].data).all(|(a, b)| a.to_bits() == b.to_bits())
    });

    // Greedy rollouts and evaluation reports are reproducible.
    let cfg = RolloutConfig { mode: DecodeMode::Greedy, goal: 0.9, seed: 3 };
    let r1 = rollout(&m1, &hw[0], &wl[0], &cfg).unwrap();
    let r2 = rollout(&m1, &hw[0], &wl[0], &cfg).unwrap();
    let rollouts_ok = r1.assignment == r2.assignment;
    let sources = vec![
        gendba::infer::PolicySource::Baseline("os-d"),
        gendba::infer::PolicySource::Model { label: "m".into(), model: &m1, goal: 0.9 },
    ];
    let rep1 = gendba::infer::evaluate(&sources, &hw, &wl, 5, 8).unwrap();
    let rep2 = gendba::infer::evaluate(&sources, &hw, &wl, 5, 8).unwrap();
    let rep_path = dir.path().join("rep.csv");
    rep1.save_csv(&rep_path).unwrap();
    let rep_back = gendba::infer::EvalReport::load_csv(&rep_path).unwrap();
    let reports_ok = rep1 == rep2 && rep_back == rep1;

    check(
        9,
        "determinism & round-trips",
        datasets_ok && ckpt_bytes_ok && round_trip_ok && rollouts_ok && reports_ok,
        &format!(
            "datasets={datasets_ok} ckpt_bytes={ckpt_bytes_ok} round_trip={round_trip_ok} \
             rollouts={rollouts_ok} reports={reports_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: masked validity under high-temperature sampling.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_masked_validity() {
    let p = pipeline();
    let hw = profile_by_id("skylakex-like").unwrap();
    let wl = workload_by_id("ycsb-a").unwrap();
    let model = &p.pretrained;
    let n_cores = hw.total_cores();
    let telemetry = gendba::sim::probe_telemetry(&hw, &wl, 0).unwrap();
    let mut bad = 0usize;
    let mut tokens = 0usize;
    for s in 0..1000u64 {
        let cfg = RolloutConfig {
            mode: DecodeMode::Sample { temperature: 2.0 },
            goal: 0.9,
            seed: s,
        };
        let policy =
            gendba::infer::rollout_from_telemetry(model, &hw, &telemetry, &cfg).unwrap();
        tokens += policy.assignment.len();
        bad += policy.assignment.iter().filter(|&&c| c >= n_cores).count();
    }
    check(
        10,
        "masked validity",
        bad == 0 && tokens == 1000 * DESK_SLICES,
        &format!("{bad} invalid of {tokens} tokens over 1000 rollouts"),
    );
}
