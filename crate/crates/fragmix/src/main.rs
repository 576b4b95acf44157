//! fragmix command-line driver: synthetic data generation, featurization,
//! training, profiling, MSM construction, and attention-map export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fragmix::config::RunConfig;
use fragmix::error::{Error, Result};
use fragmix::geometry::write_token_file;
use fragmix::mixer::{AttentionKind, AttentionMaps};
use fragmix::model::{build_dyn_model, build_spib_task, build_vamp_task, gather_batch, DynModel};
use fragmix::msm;
use fragmix::nn::Params;
use fragmix::pipeline::dataset::{
    lag_frames, load_dataset, DatasetKind, Manifest,
};
use fragmix::pipeline::profile::{profile, profile_csv, ProfileSettings};
use fragmix::pipeline::split::{lagged_pairs, split, PairIndex};
use fragmix::pipeline::train::{
    curves_csv, load_checkpoint, save_checkpoint, train, Checkpoint, TrainTask,
};
use fragmix::pipeline::dataset::write_position_file;
use fragmix::synth::{generate, generate_chain2, GenConfig, SyntheticSystem};
use fragmix::tensor::Tape;
use fragmix::tmm::GraphOperatorKind;

#[derive(Parser)]
#[command(
    name = "fragmix",
    version,
    about = "Hierarchical token-mixing pipeline for molecular and stochastic dynamics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic trajectories (position files plus manifest).
    Gen {
        /// System: ou | doublewell | polymer | chain2
        #[arg(long)]
        system: String,
        /// Saved frames per trajectory
        #[arg(long)]
        frames: usize,
        /// Number of independent trajectories
        #[arg(long)]
        trajs: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Integrator timestep (0 = per-system default)
        #[arg(long, default_value_t = 0.0)]
        dt: f64,
        /// Integrator steps per saved frame (0 = per-system default)
        #[arg(long, default_value_t = 0)]
        save_every: usize,
    },
    /// Featurize a position dataset into token cache files.
    Featurize {
        /// Input manifest (positions kind)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for token files + manifest
        #[arg(long)]
        out: PathBuf,
        /// Token dimension
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Train a model against a time-lagged objective.
    Train {
        /// Objective: vamp | spib
        #[arg(long)]
        objective: String,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Run configuration file (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (checkpoint, score curves, labels)
        #[arg(long)]
        out: PathBuf,
    },
    /// Profile runtime and memory across sizes, windows, and operators.
    Profile {
        /// Comma-separated residue counts, e.g. 128,214,592
        #[arg(long)]
        sizes: String,
        /// Comma-separated window sizes, e.g. 1,2,4,6
        #[arg(long)]
        windows: String,
        /// Comma-separated operators, e.g. gc,rggc
        #[arg(long, default_value = "gc,rggc,gcn,tag")]
        ops: String,
        /// Minibatch size per step
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 99)]
        seed: u64,
    },
    /// Build a Markov state model from per-frame labels.
    Msm {
        /// Labels CSV: traj,frame,label
        #[arg(long)]
        labels: PathBuf,
        /// Lag in frames
        #[arg(long)]
        lag: usize,
        /// Time between frames in nanoseconds (for rates)
        #[arg(long, default_value_t = 1.0)]
        interval_ns: f64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Optional per-frame descriptor CSV: traj,frame,value
        #[arg(long)]
        descriptors: Option<PathBuf>,
        /// Drop edges with at most this many counts
        #[arg(long, default_value_t = 0)]
        min_count: u64,
    },
    /// Export averaged attention maps from a trained checkpoint.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest to evaluate on
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Cap on evaluated frames (0 = all)
        #[arg(long, default_value_t = 0)]
        max_frames: usize,
        /// Evaluation chunk size
        #[arg(long, default_value_t = 128)]
        chunk: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn env_seed_override(seed: u64) -> Result<u64> {
    match std::env::var("FRAGMIX_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("FRAGMIX_SEED '{v}' is not an integer"))),
        Err(_) => Ok(seed),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { system, frames, trajs, out, seed, dt, save_every } => {
            cmd_gen(&system, frames, trajs, &out, seed, dt, save_every)
        }
        Cmd::Featurize { input, out, hidden, seed } => cmd_featurize(&input, &out, hidden, seed),
        Cmd::Train { objective, data, config, out } => {
            cmd_train(&objective, &data, config.as_deref(), &out)
        }
        Cmd::Profile { sizes, windows, ops, batch, out, seed } => {
            cmd_profile(&sizes, &windows, &ops, batch, out.as_deref(), seed)
        }
        Cmd::Msm { labels, lag, interval_ns, out, descriptors, min_count } => {
            cmd_msm(&labels, lag, interval_ns, &out, descriptors.as_deref(), min_count)
        }
        Cmd::Attn { checkpoint, data, out, max_frames, chunk } => {
            cmd_attn(&checkpoint, &data, &out, max_frames, chunk)
        }
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(
    system: &str,
    frames: usize,
    trajs: usize,
    out: &Path,
    seed: u64,
    dt: f64,
    save_every: usize,
) -> Result<()> {
    if frames == 0 || trajs == 0 {
        return Err(Error::Config("--frames and --trajs must be >= 1".into()));
    }
    let seed = env_seed_override(seed)?;
    fs::create_dir_all(out)?;

    if system == "chain2" {
        let chains = generate_chain2(0.9, frames, trajs, seed)?;
        let mut files = Vec::new();
        let mut labels = String::from("traj,frame,label\n");
        for (i, (states, tokens)) in chains.iter().enumerate() {
            let name = format!("traj{i}.tok");
            write_token_file(&out.join(&name), tokens)?;
            files.push(name);
            for (f, &s) in states.iter().enumerate() {
                labels.push_str(&format!("{i},{f},{s}\n"));
            }
        }
        Manifest::write(&out.join("manifest.txt"), DatasetKind::Tokens, 1.0, &files)?;
        fs::write(out.join("labels.csv"), labels)?;
        return Ok(());
    }

    let (sys, default_dt, default_save) = match system {
        "ou" => (SyntheticSystem::default_ou(), 0.01, 10),
        "doublewell" => (SyntheticSystem::default_double_well(), 0.01, 10),
        "polymer" => (SyntheticSystem::default_toy_polymer(), 0.005, 20),
        other => {
            return Err(Error::Config(format!(
                "unknown system '{other}' (expected ou|doublewell|polymer|chain2)"
            )))
        }
    };
    let cfg = GenConfig {
        dt: if dt > 0.0 { dt } else { default_dt },
        save_every: if save_every > 0 { save_every } else { default_save },
        seed,
    };
    let generated = generate(&sys, frames, trajs, &cfg)?;
    let mut files = Vec::new();
    for (i, tr) in generated.iter().enumerate() {
        let name = format!("traj{i}.pos");
        write_position_file(&out.join(&name), &tr.frames)?;
        files.push(name);
        // ground-truth reaction coordinate, for oracle comparisons
        let mut coord = String::from("frame,coord\n");
        for (f, &x) in tr.reaction_coord.iter().enumerate() {
            coord.push_str(&format!("{f},{x:.12e}\n"));
        }
        fs::write(out.join(format!("traj{i}.coord.csv")), coord)?;
    }
    let interval_ns = cfg.dt * cfg.save_every as f64;
    Manifest::write(&out.join("manifest.txt"), DatasetKind::Positions, interval_ns, &files)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// featurize
// ---------------------------------------------------------------------------

fn cmd_featurize(input: &Path, out: &Path, hidden: usize, seed: u64) -> Result<()> {
    let seed = env_seed_override(seed)?;
    let manifest = Manifest::parse(input)?;
    if manifest.kind != DatasetKind::Positions {
        return Err(Error::Config("featurize expects a positions dataset".into()));
    }
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for file in &manifest.files {
        let frames = if file.extension().is_some_and(|e| e == "csv") {
            fragmix::pipeline::dataset::read_position_csv(file)?
        } else {
            fragmix::pipeline::dataset::read_position_file(file)?
        };
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Input(format!("unusable file name {}", file.display())))?;
        let name = format!("{stem}.tok");
        fragmix::geometry::featurize_cached(&frames, hidden, seed, &out.join(&name))?;
        files.push(name);
    }
    Manifest::write(&out.join("manifest.txt"), DatasetKind::Tokens, manifest.interval_ns, &files)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)?,
        None => RunConfig::default_text(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    cfg.apply_seed_override(std::env::var("FRAGMIX_SEED").ok())?;
    Ok(cfg)
}

fn cmd_train(objective: &str, data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    fs::create_dir_all(out)?;
    let manifest = Manifest::parse(data)?;
    let ds = load_dataset(&manifest, cfg.hidden, cfg.seed, cfg.stride)?;
    let lag = lag_frames(cfg.lag_ns, manifest.interval_ns, cfg.stride)?;
    let (train_units, val_units) = split(&ds.lengths(), &cfg.split_spec()?)?;
    let (train_pairs, skipped) = lagged_pairs(&train_units, lag)?;
    let (val_pairs, _) = lagged_pairs(&val_units, lag)?;
    for s in &skipped {
        eprintln!(
            "warning: trajectory {} fragment [{}, {}) shorter than lag {lag}, skipped",
            s.traj, s.start, s.end
        );
    }
    if val_pairs.is_empty() {
        return Err(Error::Split("validation set has no lagged pairs".into()));
    }

    match objective {
        "vamp" => {
            let mut task = build_vamp_task(&cfg, &ds, lag, val_pairs)?;
            let result = train(&mut task, &train_pairs, &cfg.train_config(cfg.lr_vamp))?;
            eprintln!(
                "training stopped after {} steps: {}",
                result.steps_run, result.stop_reason
            );
            fs::write(out.join("curves.csv"), curves_csv(&result.curves))?;
            let mut params = Vec::new();
            task.visit_params(&mut |n, p| params.push((n, p.clone())));
            save_checkpoint(&out.join("model.fmx"), &cfg.raw_text, &params)?;
            println!("best_val={}", result.best_val);
        }
        "spib" => {
            // stage 1: VAMP coordinates for the k-means label initializer
            let mut vamp = build_vamp_task(&cfg, &ds, lag, val_pairs.clone())?;
            let vresult = train(&mut vamp, &train_pairs, &cfg.train_config(cfg.lr_vamp))?;
            eprintln!(
                "vamp stage stopped after {} steps: {} (best_val={})",
                vresult.steps_run, vresult.stop_reason, vresult.best_val
            );
            let embeds = vamp.model.embed_all(&ds, cfg.batch.min(2048))?;
            let coords = head_coords(&vamp, &embeds, ds.total_frames())?;
            let mut vparams = Vec::new();
            vamp.visit_params(&mut |n, p| vparams.push((n, p.clone())));
            save_checkpoint(&out.join("vamp_init.fmx"), &cfg.raw_text, &vparams)?;

            // stage 2: SPIB end to end with refinement
            let (mut task, reduced) =
                build_spib_task(&cfg, &ds, lag, val_pairs, &coords, cfg.vamp_dim)?;
            if reduced {
                eprintln!(
                    "warning: fewer distinct coordinates than spib.states; clusters reduced"
                );
            }
            let result = train(&mut task, &train_pairs, &cfg.train_config(cfg.lr_spib))?;
            eprintln!(
                "spib stage stopped after {} steps: {} ({} refinements, history {:?})",
                result.steps_run, result.stop_reason, task.refines_done, task.refine_history
            );
            // final refinement pass at the best parameters labels every frame
            task.refine()?;
            fs::write(out.join("curves.csv"), curves_csv(&result.curves))?;
            let mut labels = String::from("traj,frame,label\n");
            for (t, traj) in task.labels.iter().enumerate() {
                for (f, &l) in traj.iter().enumerate() {
                    labels.push_str(&format!("{t},{f},{l}\n"));
                }
            }
            fs::write(out.join("labels.csv"), labels)?;
            let mut params = Vec::new();
            task.visit_params(&mut |n, p| params.push((n, p.clone())));
            save_checkpoint(&out.join("model.fmx"), &cfg.raw_text, &params)?;
            println!("best_val={}", result.best_val);
        }
        other => {
            return Err(Error::Config(format!("unknown objective '{other}' (expected vamp|spib)")))
        }
    }
    Ok(())
}

/// Chi-head outputs for every frame given trunk embeddings.
fn head_coords(
    task: &fragmix::model::VampTask,
    embeds: &[f64],
    total: usize,
) -> Result<Vec<f64>> {
    let tape = Tape::eval();
    let d = task.model.embed_dim;
    let mut coords = Vec::with_capacity(total * task.head.out_dim);
    let chunk = 4096;
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let h = fragmix::tensor::Tensor::from_vec(
            embeds[start * d..end * d].to_vec(),
            &[end - start, d],
        )?;
        let f = task.head.forward(&tape, &h)?;
        coords.extend_from_slice(f.data());
        start = end;
    }
    Ok(coords)
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry '{p}'")))
        })
        .collect()
}

fn cmd_profile(
    sizes: &str,
    windows: &str,
    ops: &str,
    batch: usize,
    out: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let sizes = parse_list(sizes, "size")?;
    let windows = parse_list(windows, "window")?;
    let ops: Vec<GraphOperatorKind> = ops
        .split(',')
        .map(|o| GraphOperatorKind::parse(o.trim(), 2))
        .collect::<Result<_>>()?;
    if sizes.is_empty() || windows.is_empty() || ops.is_empty() {
        return Err(Error::Config("profile needs sizes, windows, and operators".into()));
    }
    let seed = env_seed_override(seed)?;
    let settings = ProfileSettings { batch, seed, ..Default::default() };
    let rows = profile(&sizes, &windows, &ops, &settings)?;
    let csv = profile_csv(&rows);
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// msm
// ---------------------------------------------------------------------------

fn read_indexed_csv(path: &Path, header: &str) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let first = lines.next().ok_or(Error::Parse { offset: 0, msg: "empty CSV".into() })?;
    if first.trim() != header {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("expected header '{header}', got '{first}'"),
        });
    }
    let mut per_traj: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    let mut offset = first.len() as u64 + 1;
    for line in lines {
        let this = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse { offset: this, msg: format!("expected 3 fields: '{line}'") });
        }
        let traj: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { offset: this, msg: format!("bad traj '{}'", parts[0]) })?;
        let frame: usize = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { offset: this, msg: format!("bad frame '{}'", parts[1]) })?;
        let value: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { offset: this, msg: format!("bad value '{}'", parts[2]) })?;
        per_traj.entry(traj).or_default().push((frame, value));
    }
    Ok(per_traj
        .into_values()
        .map(|mut rows| {
            rows.sort_by_key(|&(f, _)| f);
            rows.into_iter().map(|(_, v)| v).collect()
        })
        .collect())
}

fn cmd_msm(
    labels_path: &Path,
    lag: usize,
    interval_ns: f64,
    out: &Path,
    descriptors: Option<&Path>,
    min_count: u64,
) -> Result<()> {
    let labels: Vec<Vec<usize>> = read_indexed_csv(labels_path, "traj,frame,label")?
        .into_iter()
        .map(|traj| traj.into_iter().map(|v| v as usize).collect())
        .collect();
    if labels.is_empty() {
        return Err(Error::Input("labels file is empty".into()));
    }
    let n_states = labels.iter().flatten().max().map_or(0, |&m| m + 1);
    let model = msm::build(&labels, n_states, lag)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("edges.csv"), model.edges_csv(interval_ns, min_count))?;
    let desc = match descriptors {
        Some(p) => Some(read_indexed_csv(p, "traj,frame,value")?),
        None => None,
    };
    fs::write(out.join("nodes.csv"), model.nodes_csv(&labels, desc.as_deref()))?;
    let ts = msm::implied_timescales(&model.transition, n_states, lag as f64 * interval_ns);
    let mut tcsv = String::from("rank,timescale_ns\n");
    for (i, t) in ts.iter().enumerate() {
        tcsv.push_str(&format!("{},{t:.12e}\n", i + 1));
    }
    fs::write(out.join("timescales.csv"), tcsv)?;
    for z in &model.zero_rows {
        eprintln!("warning: state {z} has no outgoing counts; kept as absorbing");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attn
// ---------------------------------------------------------------------------

fn restore_model(model: &mut DynModel, ckpt: &Checkpoint) -> Result<()> {
    let mut missing = Vec::new();
    model.visit_params("model", &mut |name, p| match ckpt.params.get(&name) {
        Some((data, shape)) if shape == p.shape() => {
            *p = fragmix::tensor::Tensor::param(data.clone(), shape).expect("checkpoint shape");
        }
        _ => missing.push(name),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!("checkpoint missing model parameters: {}", missing.join(", "))))
    }
}

fn cmd_attn(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    max_frames: usize,
    chunk: usize,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = RunConfig::parse(&ckpt.config_text)?;
    cfg.apply_seed_override(std::env::var("FRAGMIX_SEED").ok())?;
    if cfg.arch != "full" {
        return Err(Error::Config(
            "attention maps need the full architecture (checkpoint was head-only)".into(),
        ));
    }
    let manifest = Manifest::parse(data)?;
    let ds = load_dataset(&manifest, cfg.hidden, cfg.seed, cfg.stride)?;
    // maps require the naive path: blockwise never materializes weights
    let mut model = build_dyn_model(&cfg, ds.token_dim, 0, Some(AttentionKind::Naive))?;
    restore_model(&mut model, &ckpt)?;

    let total = ds.total_frames();
    let cap = if max_frames == 0 { total } else { max_frames.min(total) };
    let mut collected: Vec<AttentionMaps> = Vec::new();
    let mut used = 0usize;
    'outer: for traj in 0..ds.trajs.len() {
        let frames = ds.trajs[traj].n_frames;
        let mut start = 0;
        while start < frames {
            if used >= cap {
                break 'outer;
            }
            let end = (start + chunk.max(1)).min(frames).min(start + (cap - used));
            let idx: Vec<PairIndex> = (start..end).map(|t| PairIndex { traj, t }).collect();
            let tape = Tape::eval();
            let (tokens, anchors) = gather_batch(&ds, &idx, 0)?;
            let anchor_refs: Option<Vec<&[f64]>> =
                anchors.as_ref().map(|a| a.iter().map(|v| v.as_slice()).collect());
            let (_, maps) =
                model.embed(&tape, &tokens, anchor_refs.as_deref(), &ds.ligand_mask, true)?;
            if let Some(m) = maps {
                collected.push(m);
            }
            used += end - start;
            start = end;
        }
    }
    let merged = AttentionMaps::merge(collected)
        .ok_or_else(|| Error::Input("no frames evaluated".into()))?;
    fs::write(out, merged.to_csv())?;
    Ok(())
}
