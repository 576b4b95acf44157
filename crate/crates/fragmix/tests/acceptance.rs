//! Acceptance suite: every criterion runs in sequence and prints one
//! PASS/FAIL line; the test fails at the end if any criterion failed.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fragmix::config::RunConfig;
use fragmix::geometry::{featurize_residue, Frame};
use fragmix::mixer::{attention_blockwise, attention_naive, AttentionKind};
use fragmix::model::{build_spib_task, build_vamp_task, chain2_exact_score};
use fragmix::msm;
use fragmix::objectives::kmeans;
use fragmix::objectives::vamp::vamp2_score;
use fragmix::pipeline::dataset::{lag_frames, load_dataset, DatasetKind, Manifest};
use fragmix::pipeline::profile::{
    attention_memory_scaling, fit_power_law, pair_count, profile, ProfileSettings,
};
use fragmix::pipeline::split::{lagged_pairs, split, SplitMode, SplitSpec};
use fragmix::pipeline::train::train;
use fragmix::synth::{
    generate, generate_chain2, oracle_timescales, GenConfig, SyntheticSystem,
};
use fragmix::tensor::{max_rel_err, Tape, Tensor};
use fragmix::tmm::{BatchedGraph, GraphOperatorKind, TmmNet};

struct Outcome {
    name: &'static str,
    detail: String,
    passed: bool,
    seconds: f64,
}

fn run_criterion(
    results: &mut Vec<Outcome>,
    name: &'static str,
    f: impl FnOnce() -> Result<String, String>,
) {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let seconds = start.elapsed().as_secs_f64();
    println!(
        "criterion {:>2} [{}] {} ({:.1}s): {}",
        results.len() + 1,
        if passed { "PASS" } else { "FAIL" },
        name,
        seconds,
        detail
    );
    results.push(Outcome { name, detail, passed, seconds });
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    run_criterion(&mut results, "attention exactness", criterion_attention_exactness);
    run_criterion(&mut results, "attention memory scaling", criterion_memory_scaling);
    run_criterion(&mut results, "pair-count and runtime scaling", criterion_pair_scaling);
    run_criterion(&mut results, "VAMP-2 oracle", criterion_vamp_oracle);
    run_criterion(&mut results, "double-well timescale recovery", criterion_double_well);
    run_criterion(&mut results, "token merging non-degradation", criterion_tmm_non_degradation);
    run_criterion(&mut results, "SPIB well recovery", criterion_spib);
    run_criterion(&mut results, "graph operator correctness", criterion_graph_operators);
    run_criterion(&mut results, "invariance suite", criterion_invariances);
    run_criterion(&mut results, "CLI determinism", criterion_cli_determinism);

    let total: f64 = results.iter().map(|r| r.seconds).sum();
    println!("acceptance total: {total:.1}s");
    let failures: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {}", r.name, r.detail))
        .collect();
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}

// Individual heavy criteria, runnable in isolation with
// `cargo test --test acceptance -- --ignored <name> --nocapture`.

#[test]
#[ignore]
fn only_double_well() {
    println!("{}", criterion_double_well().unwrap());
}

#[test]
#[ignore]
fn only_spib() {
    println!("{}", criterion_spib().unwrap());
}

#[test]
#[ignore]
fn only_tmm_non_degradation() {
    println!("{}", criterion_tmm_non_degradation().unwrap());
}

// ---------------------------------------------------------------------------
// 1. Blockwise attention equals the naive reference; gradients match
//    naive autodiff.
// ---------------------------------------------------------------------------

fn criterion_attention_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut configs: Vec<(usize, usize, usize)> =
        vec![(1000, 16, 64), (257, 16, 32), (64, 8, 16), (3, 4, 2), (1, 4, 8)];
    while configs.len() < 20 {
        let m = rng.gen_range(2..400);
        let d = [4, 8, 16, 32][rng.gen_range(0..4)];
        let block = rng.gen_range(1..96);
        configs.push((m, d, block));
    }
    let mut max_dev = 0.0f64;
    for &(m, d, block) in &configs {
        let q: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let k: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let v: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let a = attention_naive(&q, &k, &v, m, d);
        let b = attention_blockwise(&q, &k, &v, m, d, block);
        let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        max_dev = max_dev.max(dev);
        if dev >= 1e-10 {
            return Err(format!("M={m} d={d} block={block}: deviation {dev:.3e} >= 1e-10"));
        }
    }

    // gradients: blockwise custom backward vs the naive path, whose
    // backward is autodiff through primitive ops
    let (g, m, d) = (2, 64, 8);
    let q: Vec<f64> = (0..g * m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..g * m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..g * m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..g * m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = |kind: AttentionKind| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let tape = Tape::recording();
        let qt = Tensor::param(q.clone(), &[g, m, d]).unwrap();
        let kt = Tensor::param(k.clone(), &[g, m, d]).unwrap();
        let vt = Tensor::param(v.clone(), &[g, m, d]).unwrap();
        let (out, _) = tape.attention(&qt, &kt, &vt, kind, 0.0, false).unwrap();
        let wt = Tensor::from_vec(w.clone(), &[g, m, d]).unwrap();
        let loss = tape.sum_all(&tape.mul(&out, &wt).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        (qt.grad().unwrap(), kt.grad().unwrap(), vt.grad().unwrap())
    };
    let (bq, bk, bv) = grads(AttentionKind::Blockwise { block: 16 });
    let (nq, nk, nv) = grads(AttentionKind::Naive);
    let grad_err = max_rel_err(&bq, &nq).max(max_rel_err(&bk, &nk)).max(max_rel_err(&bv, &nv));
    if grad_err >= 1e-8 {
        return Err(format!("blockwise backward deviates from naive autodiff: {grad_err:.3e}"));
    }
    Ok(format!(
        "20 configs (incl. M=1000): max |naive - blockwise| {max_dev:.2e}; grad rel err {grad_err:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Peak auxiliary allocations: blockwise fits a power law with exponent
//    below 1.3, naive above 1.8.
// ---------------------------------------------------------------------------

fn criterion_memory_scaling() -> Result<String, String> {
    let ms = [64usize, 128, 256, 512, 1024];
    let rows = attention_memory_scaling(&ms, 16, 64, 202);
    let naive: Vec<(f64, f64)> = rows.iter().map(|&(m, n, _)| (m as f64, n as f64)).collect();
    let blocked: Vec<(f64, f64)> = rows.iter().map(|&(m, _, b)| (m as f64, b as f64)).collect();
    let naive_exp = fit_power_law(&naive);
    let block_exp = fit_power_law(&blocked);
    if block_exp >= 1.3 {
        return Err(format!("blockwise exponent {block_exp:.3} >= 1.3"));
    }
    if naive_exp <= 1.8 {
        return Err(format!("naive exponent {naive_exp:.3} <= 1.8"));
    }
    Ok(format!(
        "peak-float exponents over M in {{64..1024}}: blockwise {block_exp:.2}, naive {naive_exp:.2}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Fragment pair counts are exactly ceil(N/w)^2 and measured step time
//    decreases monotonically with w at N=592 for GC and RGGC.
// ---------------------------------------------------------------------------

fn criterion_pair_scaling() -> Result<String, String> {
    for &n in &[128usize, 214, 592, 2645] {
        for &w in &[1usize, 2, 4, 6] {
            let m = n.div_ceil(w) as u64;
            if pair_count(n, w) != m * m {
                return Err(format!("pair_count({n}, {w}) != {}", m * m));
            }
        }
    }
    if pair_count(2645, 6) != 194_481 || pair_count(2645, 1) != 6_996_025 {
        return Err("replication-transcription-complex pair arithmetic off".into());
    }

    let settings = ProfileSettings {
        batch: 3,
        warmup_steps: 2,
        timed_steps: 5,
        ..Default::default()
    };
    let windows = [1usize, 2, 4, 6];
    let mut detail = String::new();
    for op in [GraphOperatorKind::Gc, GraphOperatorKind::Rggc] {
        let rows = profile(&[592], &windows, &[op], &settings).map_err(|e| e.to_string())?;
        let times: Vec<f64> = rows.iter().map(|r| r.ms_per_step).collect();
        for i in 1..times.len() {
            if times[i] >= times[i - 1] {
                return Err(format!(
                    "{}: step time not monotone at N=592: {:?} ms for w={:?}",
                    op.name(),
                    times,
                    windows
                ));
            }
        }
        write!(detail, "{} N=592 ms/step {:?}; ", op.name(), times.iter().map(|t| (t * 10.0).round() / 10.0).collect::<Vec<_>>()).unwrap();
    }
    // upstream trend example: w=4 beats w=1 for every operator at N=214
    for op in [
        GraphOperatorKind::Gcn,
        GraphOperatorKind::Gc,
        GraphOperatorKind::Rggc,
        GraphOperatorKind::Tag { hops: 2 },
    ] {
        let rows = profile(&[214], &[1, 4], &[op], &settings).map_err(|e| e.to_string())?;
        if rows[1].ms_per_step >= rows[0].ms_per_step {
            return Err(format!(
                "{} at N=214: w=4 ({:.1} ms) not faster than w=1 ({:.1} ms)",
                op.name(),
                rows[1].ms_per_step,
                rows[0].ms_per_step
            ));
        }
    }
    Ok(format!("pair counts exact for all (N, w); {detail}w=4 < w=1 for all four operators at N=214"))
}

// ---------------------------------------------------------------------------
// 4. VAMP-2 oracle: exact-expectation score 1.64 on the two-state chain; a
//    trained head reaches >= 1.55 within 5 epochs.
// ---------------------------------------------------------------------------

fn criterion_vamp_oracle() -> Result<String, String> {
    let exact = chain2_exact_score(0.9, 1e-6).map_err(|e| e.to_string())?;
    if (exact - 1.64).abs() > 1e-9 {
        return Err(format!("exact-expectation score {exact} != 1.64"));
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let chains = generate_chain2(0.9, 13_000, 5, 404).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for (i, (_, tokens)) in chains.iter().enumerate() {
        let name = format!("t{i}.tok");
        fragmix::geometry::write_token_file(&dir.path().join(&name), tokens)
            .map_err(|e| e.to_string())?;
        files.push(name);
    }
    let mpath = dir.path().join("manifest.txt");
    Manifest::write(&mpath, DatasetKind::Tokens, 1.0, &files).map_err(|e| e.to_string())?;
    let manifest = Manifest::parse(&mpath).map_err(|e| e.to_string())?;

    let cfg = RunConfig::parse(
        "seed = 404\nmodel.arch = head\nmodel.vamp_dim = 2\ntrain.batch = 1000\n\
         train.max_epochs = 5\ntrain.val_interval = 10\ntrain.val_patience = 50\n\
         data.lag_ns = 1.0\n",
    )
    .map_err(|e| e.to_string())?;
    let ds = load_dataset(&manifest, cfg.hidden, cfg.seed, 1).map_err(|e| e.to_string())?;
    let (tr, va) = split(&ds.lengths(), &cfg.split_spec().unwrap()).map_err(|e| e.to_string())?;
    let (pairs, _) = lagged_pairs(&tr, 1).map_err(|e| e.to_string())?;
    let (vp, _) = lagged_pairs(&va, 1).map_err(|e| e.to_string())?;
    let n_pairs = pairs.len();
    let mut task = build_vamp_task(&cfg, &ds, 1, vp).map_err(|e| e.to_string())?;
    let result =
        train(&mut task, &pairs, &cfg.train_config(cfg.lr_vamp)).map_err(|e| e.to_string())?;
    if result.best_val < 1.55 {
        return Err(format!(
            "trained head reached best_val {:.4} < 1.55 on {n_pairs} pairs",
            result.best_val
        ));
    }
    Ok(format!(
        "exact score {exact:.6}; trained head best_val {:.4} on {n_pairs} pairs (oracle 1.64)",
        result.best_val
    ))
}

// ---------------------------------------------------------------------------
// 5. Full pipeline on the double well recovers the grid-oracle slowest
//    timescale within 15% for w in {1, 2}.
// ---------------------------------------------------------------------------

fn double_well_dataset(dir: &std::path::Path, frames: usize, trajs: usize) -> Result<Manifest, String> {
    let gen_cfg = GenConfig { dt: 0.01, save_every: 10, seed: 505 };
    let generated = generate(&SyntheticSystem::default_double_well(), frames, trajs, &gen_cfg)
        .map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for (i, tr) in generated.iter().enumerate() {
        let name = format!("dw{i}.pos");
        fragmix::pipeline::dataset::write_position_file(&dir.join(&name), &tr.frames)
            .map_err(|e| e.to_string())?;
        files.push(name);
    }
    let mpath = dir.join("manifest.txt");
    Manifest::write(&mpath, DatasetKind::Positions, 0.1, &files).map_err(|e| e.to_string())?;
    // keep the ground-truth coordinate for the SPIB criterion
    let mut coords = String::new();
    for tr in &generated {
        for &x in &tr.reaction_coord {
            coords.push_str(&format!("{x}\n"));
        }
    }
    std::fs::write(dir.join("coords.txt"), coords).map_err(|e| e.to_string())?;
    Manifest::parse(&mpath).map_err(|e| e.to_string())
}

fn dw_config(window: usize, seed: u64) -> RunConfig {
    RunConfig::parse(&format!(
        "seed = {seed}\nmodel.hidden = 16\nmodel.heads = 4\nmodel.layers = 2\n\
         model.window = {window}\nmodel.operator = gc\nmodel.vamp_dim = 2\n\
         train.batch = 512\ntrain.max_epochs = 10\ntrain.val_interval = 25\n\
         train.val_patience = 20\ndata.lag_ns = 1.0\n"
    ))
    .expect("valid config")
}

/// Two-state labels from a trained VAMP task: project every frame onto the
/// estimated slowest singular coordinate, then k-means with k = 2.
fn two_state_labels(
    task: &fragmix::model::VampTask,
    ds: &fragmix::pipeline::dataset::LoadedDataset,
    pairs: &[fragmix::pipeline::split::PairIndex],
) -> Result<Vec<Vec<usize>>, String> {
    let coords = task.slow_coordinates(pairs, 1).map_err(|e| e.to_string())?;
    let total = ds.total_frames();
    let km = kmeans(&coords, total, 1, 2, 17).map_err(|e| e.to_string())?;
    let mut labels = Vec::new();
    let mut cursor = 0;
    for t in &ds.trajs {
        labels.push(km.assignments[cursor..cursor + t.n_frames].to_vec());
        cursor += t.n_frames;
    }
    Ok(labels)
}

fn criterion_double_well() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = double_well_dataset(dir.path(), 16_000, 5)?;
    // the grid transfer operator is lag-invariant; 200 bins
    let oracle = oracle_timescales(&SyntheticSystem::default_double_well(), 0.01, 100, 200)
        .map_err(|e| e.to_string())?[0];

    let mut detail = String::new();
    for window in [1usize, 2] {
        let cfg = dw_config(window, 505);
        let ds = load_dataset(&manifest, cfg.hidden, cfg.seed, 1).map_err(|e| e.to_string())?;
        let lag = lag_frames(cfg.lag_ns, manifest.interval_ns, 1).map_err(|e| e.to_string())?;
        let (tr, va) =
            split(&ds.lengths(), &cfg.split_spec().unwrap()).map_err(|e| e.to_string())?;
        let (pairs, _) = lagged_pairs(&tr, lag).map_err(|e| e.to_string())?;
        let (vp, _) = lagged_pairs(&va, lag).map_err(|e| e.to_string())?;
        let mut task = build_vamp_task(&cfg, &ds, lag, vp).map_err(|e| e.to_string())?;
        let result =
            train(&mut task, &pairs, &cfg.train_config(cfg.lr_vamp)).map_err(|e| e.to_string())?;

        let labels = two_state_labels(&task, &ds, &pairs)?;
        // estimate the MSM at a longer lag than training: the projected
        // two-state chain converges to the true timescale as lag grows
        let msm_lag = 30;
        let m = msm::build(&labels, 2, msm_lag).map_err(|e| e.to_string())?;
        let ts = msm::implied_timescales(&m.transition, 2, msm_lag as f64 * ds.frame_interval_ns);
        if ts.is_empty() {
            return Err(format!("w={window}: MSM has no finite timescale"));
        }
        let rel = (ts[0] - oracle).abs() / oracle;
        write!(
            detail,
            "w={window}: best_val {:.3}, t2 {:.2} vs oracle {:.2} ns (err {:.1}%); ",
            result.best_val,
            ts[0],
            oracle,
            rel * 100.0
        )
        .unwrap();
        if rel > 0.15 {
            return Err(format!(
                "w={window}: learned t2 {:.3} ns deviates {:.1}% from oracle {:.3} ns",
                ts[0],
                rel * 100.0,
                oracle
            ));
        }
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6. Token merging does not degrade learning on the toy polymer: best
//    validation VAMP-2 at w in {2, 4} within 5% of (or above) w = 1,
//    averaged over 3 seeds.
// ---------------------------------------------------------------------------

fn criterion_tmm_non_degradation() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen_cfg = GenConfig { dt: 0.005, save_every: 20, seed: 606 };
    let generated = generate(&SyntheticSystem::default_toy_polymer(), 3000, 4, &gen_cfg)
        .map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for (i, tr) in generated.iter().enumerate() {
        let name = format!("poly{i}.pos");
        fragmix::pipeline::dataset::write_position_file(&dir.path().join(&name), &tr.frames)
            .map_err(|e| e.to_string())?;
        files.push(name);
    }
    let mpath = dir.path().join("manifest.txt");
    Manifest::write(&mpath, DatasetKind::Positions, 0.1, &files).map_err(|e| e.to_string())?;
    let manifest = Manifest::parse(&mpath).map_err(|e| e.to_string())?;

    let seeds = [1u64, 2, 3];
    let mut means = Vec::new();
    let mut detail = String::new();
    for window in [1usize, 2, 4] {
        let mut scores = Vec::new();
        for &seed in &seeds {
            let cfg = RunConfig::parse(&format!(
                "seed = {seed}\nmodel.hidden = 16\nmodel.heads = 4\nmodel.layers = 2\n\
                 model.window = {window}\nmodel.operator = rggc\nmodel.cutoff = 10\n\
                 model.vamp_dim = 2\ntrain.batch = 512\ntrain.max_epochs = 6\n\
                 train.val_interval = 20\ntrain.val_patience = 30\ndata.lag_ns = 1.0\n\
                 split.fraction = 0.25\n"
            ))
            .map_err(|e| e.to_string())?;
            let ds =
                load_dataset(&manifest, cfg.hidden, cfg.seed, 1).map_err(|e| e.to_string())?;
            let lag = lag_frames(cfg.lag_ns, manifest.interval_ns, 1).map_err(|e| e.to_string())?;
            // hold the split fixed across seeds and windows, as in a fair
            // architecture comparison
            let spec = SplitSpec { fraction: 0.25, mode: SplitMode::ByTrajectory, seed: 42 };
            let (tr, va) = split(&ds.lengths(), &spec).map_err(|e| e.to_string())?;
            let (pairs, _) = lagged_pairs(&tr, lag).map_err(|e| e.to_string())?;
            let (vp, _) = lagged_pairs(&va, lag).map_err(|e| e.to_string())?;
            let mut task = build_vamp_task(&cfg, &ds, lag, vp).map_err(|e| e.to_string())?;
            let result = train(&mut task, &pairs, &cfg.train_config(cfg.lr_vamp))
                .map_err(|e| e.to_string())?;
            scores.push(result.best_val);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        means.push(mean);
        write!(detail, "w={window}: mean best_val {mean:.4}; ").unwrap();
    }
    let base = means[0];
    for (i, &w) in [2usize, 4].iter().enumerate() {
        let mean = means[i + 1];
        if mean < 0.95 * base {
            return Err(format!(
                "w={w} mean {:.4} fell more than 5% below w=1 mean {:.4} ({detail})",
                mean, base
            ));
        }
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. SPIB on the double well: k-means(100) init, at most 5 refinements,
//    refined labels match the oracle well assignment at >= 95%, and
//    refinement is idempotent at convergence.
// ---------------------------------------------------------------------------

fn criterion_spib() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = double_well_dataset(dir.path(), 10_000, 5)?;
    let coords: Vec<f64> = std::fs::read_to_string(dir.path().join("coords.txt"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();

    let cfg = RunConfig::parse(
        "seed = 505\nmodel.hidden = 16\nmodel.heads = 4\nmodel.layers = 2\n\
         model.window = 1\nmodel.operator = gc\nmodel.vamp_dim = 2\n\
         spib.states = 100\nspib.latent = 2\nspib.pseudo = 10\nspib.beta = 0.01\n\
         spib.refine_every = 5\nspib.max_refines = 5\nspib.refine_tol = 0.01\n\
         train.batch = 512\ntrain.max_epochs = 30\ntrain.val_interval = 25\n\
         train.lr_spib = 0.001\ntrain.val_patience = 40\ndata.lag_ns = 1.0\n",
    )
    .map_err(|e| e.to_string())?;
    let ds = load_dataset(&manifest, cfg.hidden, cfg.seed, 1).map_err(|e| e.to_string())?;
    let lag = lag_frames(cfg.lag_ns, manifest.interval_ns, 1).map_err(|e| e.to_string())?;
    let (tr, va) = split(&ds.lengths(), &cfg.split_spec().unwrap()).map_err(|e| e.to_string())?;
    let (pairs, _) = lagged_pairs(&tr, lag).map_err(|e| e.to_string())?;
    let (vp, _) = lagged_pairs(&va, lag).map_err(|e| e.to_string())?;

    // stage 1: VAMP coordinates for the k-means(100) initializer
    let mut vamp = build_vamp_task(&cfg, &ds, lag, vp.clone()).map_err(|e| e.to_string())?;
    train(&mut vamp, &pairs, &cfg.train_config(cfg.lr_vamp)).map_err(|e| e.to_string())?;
    let emb = vamp.model.embed_all(&ds, 2048).map_err(|e| e.to_string())?;
    let total = ds.total_frames();
    let tape = Tape::eval();
    let h = Tensor::from_vec(emb, &[total, vamp.model.embed_dim]).map_err(|e| e.to_string())?;
    let chi = vamp.head.forward(&tape, &h).map_err(|e| e.to_string())?;

    // stage 2: SPIB end to end with refinement every epoch, at most 5
    let (mut task, _) = build_spib_task(&cfg, &ds, lag, vp, chi.data(), cfg.vamp_dim)
        .map_err(|e| e.to_string())?;
    let initial_states = task.spib.active.len();
    train(&mut task, &pairs, &cfg.train_config(cfg.lr_spib)).map_err(|e| e.to_string())?;
    if task.refines_done > 5 {
        return Err(format!("{} refinements exceeded the budget of 5", task.refines_done));
    }
    // refinement at the final (best) parameters; idempotence at convergence
    let change_a = task.refine().map_err(|e| e.to_string())?;
    let change_b = task.refine().map_err(|e| e.to_string())?;
    if change_b != 0.0 {
        return Err(format!("refinement not idempotent: second pass changed {change_b}"));
    }

    // agreement against the oracle well assignment, mapping each state to
    // its majority well
    let flat_labels: Vec<usize> = task.labels.iter().flatten().copied().collect();
    let n_states = task.spib.active.len();
    let mut well_counts = vec![[0usize; 2]; n_states];
    for (&l, &x) in flat_labels.iter().zip(&coords) {
        well_counts[l][(x > 0.0) as usize] += 1;
    }
    let agree: usize = well_counts.iter().map(|c| c[0].max(c[1])).sum();
    let agreement = agree as f64 / flat_labels.len() as f64;
    if agreement < 0.95 {
        return Err(format!(
            "well agreement {:.2}% < 95% ({} states from {} initial)",
            agreement * 100.0,
            n_states,
            initial_states
        ));
    }
    Ok(format!(
        "agreement {:.2}% with {} refined states (from {} k-means clusters, {} refinements, final change {:.3})",
        agreement * 100.0,
        n_states,
        initial_states,
        task.refines_done,
        change_a
    ))
}

// ---------------------------------------------------------------------------
// 8. Graph operators match hand and dense-matrix oracles to 1e-12;
//    empty-graph reductions hold.
// ---------------------------------------------------------------------------

fn unit_tmm(op: GraphOperatorKind) -> TmmNet {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = TmmNet::init(&mut rng, op, 1, 1).unwrap();
    let one = || Tensor::param(vec![1.0], &[1, 1]).unwrap();
    let zero = || Tensor::param(vec![0.0], &[1, 1]).unwrap();
    let n_conv = match op {
        GraphOperatorKind::Tag { hops } => hops + 1,
        _ => 2,
    };
    let conv = (0..n_conv).map(|_| one()).collect();
    let gate = matches!(op, GraphOperatorKind::Rggc).then(|| (zero(), zero()));
    net.set_conv_weights(conv, gate).unwrap();
    net
}

fn conv1(net: &TmmNet, edges: &[(u32, u32)], n: usize, x: &[f64]) -> Vec<f64> {
    let mut sym: Vec<(u32, u32)> = edges.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
    sym.sort_unstable();
    sym.dedup();
    let g = fragmix::geometry::RadiusGraph { edges: sym, cutoff: 1.0, n_nodes: n };
    let bg = BatchedGraph::new(&[&g], n).unwrap();
    let tape = Tape::eval();
    let xt = Tensor::from_vec(x.to_vec(), &[n, 1]).unwrap();
    net.graph_conv(&tape, &xt, &bg).unwrap().to_vec()
}

fn criterion_graph_operators() -> Result<String, String> {
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);

    // GC on a path, hand oracle
    let gc = unit_tmm(GraphOperatorKind::Gc);
    if !close(&conv1(&gc, &[(0, 1), (1, 2)], 3, &[1.0, 2.0, 3.0]), &[3.0, 6.0, 5.0]) {
        return Err("GC hand case failed".into());
    }
    // GCN two nodes
    let gcn = unit_tmm(GraphOperatorKind::Gcn);
    if !close(&conv1(&gcn, &[(0, 1)], 2, &[2.0, 4.0]), &[3.0, 3.0]) {
        return Err("GCN hand case failed".into());
    }
    // RGGC star with zero gate weights => gate 0.5
    let rggc = unit_tmm(GraphOperatorKind::Rggc);
    if !close(&conv1(&rggc, &[(0, 1), (0, 2)], 3, &[0.0, 2.0, 4.0]), &[3.0, 2.0, 4.0]) {
        return Err("RGGC hand case failed".into());
    }
    // TAG(K=1) against dense T powers on a random 6-node graph
    let tag = unit_tmm(GraphOperatorKind::Tag { hops: 1 });
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let edges = [(0u32, 1u32), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)];
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let got = conv1(&tag, &edges, 6, &x);
    let mut sym: Vec<(u32, u32)> = edges.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
    sym.sort_unstable();
    let g = fragmix::geometry::RadiusGraph { edges: sym, cutoff: 1.0, n_nodes: 6 };
    let bg = BatchedGraph::new(&[&g], 6).unwrap();
    let t_dense = fragmix::tmm::tag_matrix(&bg).to_dense();
    for i in 0..6 {
        let tx: f64 = (0..6).map(|j| t_dense[i * 6 + j] * x[j]).sum();
        if (got[i] - (x[i] + tx)).abs() >= 1e-12 {
            return Err(format!("TAG dense oracle mismatch at node {i}"));
        }
    }
    // empty-graph reductions
    for op in [
        GraphOperatorKind::Gcn,
        GraphOperatorKind::Gc,
        GraphOperatorKind::Rggc,
        GraphOperatorKind::Tag { hops: 2 },
    ] {
        let net = unit_tmm(op);
        let x = [1.5, -2.0, 0.5];
        let out = conv1(&net, &[], 3, &x);
        if !close(&out, &x) {
            return Err(format!("{op:?} empty-graph reduction failed: {out:?}"));
        }
    }
    Ok("all four operators match hand/dense oracles to 1e-12; empty-graph reductions hold".into())
}

// ---------------------------------------------------------------------------
// 9. Invariances: featurizer under rigid motions, VAMP-2 under invertible
//    feature maps, MSM spectra under state relabeling.
// ---------------------------------------------------------------------------

fn criterion_invariances() -> Result<String, String> {
    // featurizer rigid-motion invariance <= 1e-9
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst_drift = 0.0f64;
    for _ in 0..20 {
        let pts: Vec<[f64; 3]> = (0..10)
            .map(|_| [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)])
            .collect();
        let frame = Frame {
            positions: pts.iter().flatten().copied().collect(),
            residue_index: (0..10).collect(),
            anchor: (0..10).collect(),
            ligand_mask: vec![false; 10],
        };
        let base = featurize_residue(&frame, 16, 3).map_err(|e| e.to_string())?;
        // random rotation from Gram-Schmidt of a Gaussian matrix
        let mut cols = [[0.0f64; 3]; 3];
        for c in 0..3 {
            let mut v =
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            for p in 0..c {
                let d: f64 = (0..3).map(|i| v[i] * cols[p][i]).sum();
                for i in 0..3 {
                    v[i] -= d * cols[p][i];
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..3 {
                cols[c][i] = v[i] / n;
            }
        }
        let shift = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
        let moved: Vec<f64> = pts
            .iter()
            .flat_map(|p| {
                (0..3).map(move |i| (0..3).map(|j| cols[i][j] * p[j]).sum::<f64>() + shift[i])
            })
            .collect();
        let mframe = Frame { positions: moved, ..frame.clone() };
        let rotated = featurize_residue(&mframe, 16, 3).map_err(|e| e.to_string())?;
        let drift =
            base.iter().zip(&rotated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_drift = worst_drift.max(drift);
    }
    if worst_drift > 1e-9 {
        return Err(format!("featurizer drift {worst_drift:.2e} > 1e-9"));
    }

    // VAMP-2 invariance under invertible linear maps <= 1e-8
    let tape = Tape::eval();
    let mut worst_vamp = 0.0f64;
    for k in [2usize, 4] {
        let f0 = Tensor::from_vec(
            (0..150 * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[150, k],
        )
        .unwrap();
        let ft = Tensor::from_vec(
            (0..150 * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[150, k],
        )
        .unwrap();
        let base = vamp2_score(&tape, &f0, &ft, 1e-10).map_err(|e| e.to_string())?.item();
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                a[i * k + j] = if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3);
            }
        }
        let at = Tensor::from_vec(a, &[k, k]).unwrap();
        let mapped = vamp2_score(
            &tape,
            &tape.matmul(&f0, &at).unwrap(),
            &tape.matmul(&ft, &at).unwrap(),
            1e-10,
        )
        .map_err(|e| e.to_string())?
        .item();
        worst_vamp = worst_vamp.max((base - mapped).abs());
    }
    if worst_vamp > 1e-8 {
        return Err(format!("VAMP-2 linear-map deviation {worst_vamp:.2e} > 1e-8"));
    }

    // MSM permutation relabeling: counts/transition/populations conjugate
    // bit-exactly; implied timescale sets agree
    let trajs: Vec<Vec<usize>> =
        (0..3).map(|_| (0..400).map(|_| rng.gen_range(0..4)).collect()).collect();
    let m = msm::build(&trajs, 4, 2).map_err(|e| e.to_string())?;
    let perm = [3usize, 0, 2, 1];
    let ptrajs: Vec<Vec<usize>> =
        trajs.iter().map(|t| t.iter().map(|&s| perm[s]).collect()).collect();
    let pm = msm::build(&ptrajs, 4, 2).map_err(|e| e.to_string())?;
    for a in 0..4 {
        for b in 0..4 {
            if m.counts[a * 4 + b] != pm.counts[perm[a] * 4 + perm[b]]
                || m.transition[a * 4 + b] != pm.transition[perm[a] * 4 + perm[b]]
            {
                return Err("MSM conjugation not exact".into());
            }
        }
        if m.populations[a] != pm.populations[perm[a]] {
            return Err("MSM populations not exactly permuted".into());
        }
    }
    let ts_a = msm::implied_timescales(&m.transition, 4, 1.0);
    let ts_b = msm::implied_timescales(&pm.transition, 4, 1.0);
    let mut worst_ts = 0.0f64;
    for (x, y) in ts_a.iter().zip(&ts_b) {
        worst_ts = worst_ts.max((x - y).abs() / x.abs().max(1e-12));
    }
    if ts_a.len() != ts_b.len() || worst_ts > 1e-9 {
        return Err(format!("timescale sets differ under relabeling ({worst_ts:.2e})"));
    }
    Ok(format!(
        "featurizer drift {worst_drift:.1e}; VAMP map deviation {worst_vamp:.1e}; MSM conjugation exact, timescales within {worst_ts:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 10. CLI determinism: rerunning any command with the same seed produces
//     byte-identical outputs (timing columns excluded for the profiler).
// ---------------------------------------------------------------------------

fn criterion_cli_determinism() -> Result<String, String> {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_fragmix");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;

    let run = |args: &[&str]| -> Result<String, String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "command {:?} failed: {}",
                args,
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    };
    let hash_dir = |dir: &std::path::Path, skip_ms: bool| -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|p| {
                let mut bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                if skip_ms && p.extension().is_some_and(|e| e == "csv") {
                    // drop the wall-clock column, inherently non-reproducible
                    let text = String::from_utf8_lossy(&bytes).into_owned();
                    bytes = text
                        .lines()
                        .map(|l| {
                            let cols: Vec<&str> = l.split(',').collect();
                            if cols.len() == 6 {
                                format!("{},{},{},{},{}", cols[0], cols[1], cols[2], cols[4], cols[5])
                            } else {
                                l.to_string()
                            }
                        })
                        .collect::<Vec<_>>()
                        .join("\n")
                        .into_bytes();
                }
                Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
            })
            .collect()
    };

    // gen + featurize + train + msm + attn, twice each, byte-compared
    let mut compared = 0;
    for round in ["a", "b"] {
        let base = root.path().join(round);
        std::fs::create_dir_all(&base).map_err(|e| e.to_string())?;
        let dw = base.join("dw");
        run(&[
            "gen", "--system", "doublewell", "--frames", "600", "--trajs", "3", "--out",
            dw.to_str().unwrap(), "--seed", "31",
        ])?;
        let feat = base.join("feat");
        run(&[
            "featurize", "--in",
            dw.join("manifest.txt").to_str().unwrap(),
            "--out", feat.to_str().unwrap(),
            "--hidden", "16", "--seed", "31",
        ])?;
        let cfgp = base.join("cfg.txt");
        std::fs::write(
            &cfgp,
            "seed = 31\nmodel.hidden = 16\nmodel.heads = 4\nmodel.layers = 1\n\
             model.window = 1\nmodel.operator = gc\nmodel.vamp_dim = 2\n\
             train.batch = 256\ntrain.max_epochs = 1\ntrain.val_interval = 20\n\
             data.lag_ns = 1.0\nsplit.fraction = 0.34\n",
        )
        .map_err(|e| e.to_string())?;
        let runout = base.join("run");
        let stdout = run(&[
            "train", "--objective", "vamp",
            "--data", dw.join("manifest.txt").to_str().unwrap(),
            "--config", cfgp.to_str().unwrap(),
            "--out", runout.to_str().unwrap(),
        ])?;
        if !stdout.contains("best_val=") {
            return Err(format!("train stdout missing best_val: {stdout}"));
        }
        // labels fixture for msm
        let labels = base.join("labels.csv");
        let mut text = String::from("traj,frame,label\n");
        for (f, s) in [0, 0, 1, 1, 0].iter().enumerate() {
            text.push_str(&format!("0,{f},{s}\n"));
        }
        std::fs::write(&labels, text).map_err(|e| e.to_string())?;
        let msm_out = base.join("msm");
        run(&[
            "msm", "--labels", labels.to_str().unwrap(), "--lag", "1",
            "--out", msm_out.to_str().unwrap(),
        ])?;
        let attn_out = base.join("attn.csv");
        run(&[
            "attn", "--checkpoint", runout.join("model.fmx").to_str().unwrap(),
            "--data", dw.join("manifest.txt").to_str().unwrap(),
            "--out", attn_out.to_str().unwrap(),
            "--max-frames", "64",
        ])?;
        let profile_out = base.join("profile.csv");
        run(&[
            "profile", "--sizes", "32", "--windows", "1,2", "--ops", "gc",
            "--batch", "1", "--out", profile_out.to_str().unwrap(), "--seed", "31",
        ])?;
    }
    for sub in ["dw", "feat", "run", "msm"] {
        let a = hash_dir(&root.path().join("a").join(sub), false)?;
        let b = hash_dir(&root.path().join("b").join(sub), false)?;
        if a != b {
            return Err(format!("outputs of '{sub}' differ between identical runs"));
        }
        compared += a.len();
    }
    let a = std::fs::read(root.path().join("a/attn.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(root.path().join("b/attn.csv")).map_err(|e| e.to_string())?;
    if a != b {
        return Err("attention maps differ between identical runs".into());
    }
    compared += 1;
    // profiler: everything except the wall-clock column must match
    let pa = hash_dir(root.path().join("a").as_path(), true)?;
    let pb = hash_dir(root.path().join("b").as_path(), true)?;
    let fa = pa.iter().find(|(n, _)| n == "profile.csv");
    let fb = pb.iter().find(|(n, _)| n == "profile.csv");
    if fa != fb {
        return Err("profile outputs (timing excluded) differ between identical runs".into());
    }
    compared += 1;

    // msm hand-count fixture: C = [[1,1],[1,1]]
    let edges = std::fs::read_to_string(root.path().join("a/msm/edges.csv"))
        .map_err(|e| e.to_string())?;
    for want in ["0,0,1,", "0,1,1,", "1,0,1,", "1,1,1,"] {
        if !edges.lines().any(|l| l.starts_with(want)) {
            return Err(format!("msm fixture missing edge row '{want}': {edges}"));
        }
    }
    Ok(format!("{compared} output files byte-identical across reruns; msm hand-count fixture reproduced"))
}
