//! Runtime/memory profiler: wall-clock per training step and peak tracked
//! allocations across (system size, window, operator) grids, plus the
//! attention-memory scaling measurement behind the O(M d) claim.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::radius_graph;
use crate::mixer::{attention_blockwise, attention_naive, AttentionKind, MixerNet};
use crate::objectives::vamp::VampHead;
use crate::pipeline::train::TrainTask;
use crate::pipeline::split::PairIndex;
use crate::tensor::{alloc, Tape, Tensor};
use crate::tmm::{GraphOperatorKind, TmmNet};

#[derive(Debug, Clone)]
pub struct ProfileRow {
    pub n_residues: usize,
    pub window: usize,
    pub operator: String,
    pub ms_per_step: f64,
    pub peak_bytes: u64,
    pub pair_count: u64,
}

/// Self-attention pairs after merging `n` residues with window `w`.
pub fn pair_count(n: usize, w: usize) -> u64 {
    let m = n.div_ceil(w) as u64;
    m * m
}

#[derive(Debug, Clone, Copy)]
pub struct ProfileSettings {
    pub batch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub block: usize,
    pub cutoff: f64,
    pub warmup_steps: usize,
    pub timed_steps: usize,
    pub seed: u64,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings {
            batch: 4,
            hidden: 64,
            heads: 4,
            layers: 3,
            block: 64,
            cutoff: 10.0,
            warmup_steps: 2,
            timed_steps: 5,
            seed: 99,
        }
    }
}

struct ProfileTask {
    tmm: TmmNet,
    mixer: MixerNet,
    head: VampHead,
    tokens: Tensor,
    graph: crate::geometry::RadiusGraph,
    batch: usize,
    ligand: Vec<bool>,
}

impl TrainTask for ProfileTask {
    fn train_loss(&mut self, tape: &Tape, _batch: &[PairIndex]) -> Result<Tensor> {
        let graphs: Vec<&crate::geometry::RadiusGraph> =
            std::iter::repeat(&self.graph).take(self.batch).collect();
        let merged = self.tmm.forward(tape, &self.tokens, &graphs, &self.ligand)?;
        let (mixed, _) = self.mixer.forward(tape, &merged, false)?;
        let pooled = self.mixer.pool(tape, &mixed)?;
        let feats = self.head.forward(tape, &pooled)?;
        let sq = tape.mul(&feats, &feats)?;
        tape.mean_all(&sq)
    }

    fn validation_score(&mut self) -> Result<f64> {
        Ok(0.0)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        use crate::nn::Params;
        self.tmm.visit_params("tmm", f);
        self.mixer.visit_params("mixer", f);
        self.head.visit_params("head", f);
    }
}

/// Random anchor coordinates at roughly uniform density so the radius
/// graph has a realistic degree regardless of system size.
fn synthetic_anchors(n: usize, cutoff: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // target ~12 neighbors inside the cutoff sphere
    let density = 12.0 / (4.0 / 3.0 * std::f64::consts::PI * cutoff.powi(3));
    let side = (n as f64 / density).cbrt();
    (0..n * 3).map(|_| rng.gen_range(0.0..side)).collect()
}

/// Median wall-clock per forward+backward step and peak tracked bytes for
/// one (N, w, operator) configuration.
pub fn profile_one(
    n: usize,
    w: usize,
    op: GraphOperatorKind,
    s: &ProfileSettings,
) -> Result<ProfileRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let anchors = synthetic_anchors(n, s.cutoff, s.seed ^ 1);
    let graph = radius_graph(&anchors, s.cutoff)?;
    let tokens: Vec<f64> =
        (0..s.batch * n * s.hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut task = ProfileTask {
        tmm: TmmNet::init(&mut rng, op, w, s.hidden)?,
        mixer: MixerNet::init(
            &mut rng,
            s.hidden,
            s.heads,
            s.layers,
            2 * s.hidden,
            0.0,
            AttentionKind::Blockwise { block: s.block },
        )?,
        head: VampHead::init(&mut rng, s.hidden, s.hidden, 2),
        tokens: Tensor::from_vec(tokens, &[s.batch, n, s.hidden])?,
        graph,
        batch: s.batch,
        ligand: vec![false; n],
    };
    let mut optim = crate::pipeline::train::Adam::new(1e-4);
    let run_step = |task: &mut ProfileTask, optim: &mut crate::pipeline::train::Adam, step: u64| -> Result<()> {
        let tape = Tape::training(s.seed, step);
        let loss = task.train_loss(&tape, &[])?;
        tape.backward(&loss)?;
        optim.step(task);
        Ok(())
    };
    for i in 0..s.warmup_steps {
        run_step(&mut task, &mut optim, i as u64)?;
    }
    let mut times = Vec::with_capacity(s.timed_steps);
    let mut peak_bytes = 0u64;
    for i in 0..s.timed_steps {
        let start = Instant::now();
        let (res, extra_floats) =
            alloc::measure_peak_extra(|| run_step(&mut task, &mut optim, (s.warmup_steps + i) as u64));
        res?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        peak_bytes = peak_bytes.max(extra_floats as u64 * 8);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ProfileRow {
        n_residues: n,
        window: w,
        operator: op.name().to_string(),
        ms_per_step: times[times.len() / 2],
        peak_bytes,
        pair_count: pair_count(n, w),
    })
}

/// Full grid; emits one row per (N, w, operator).
pub fn profile(
    sizes: &[usize],
    windows: &[usize],
    ops: &[GraphOperatorKind],
    s: &ProfileSettings,
) -> Result<Vec<ProfileRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        for &w in windows {
            for &op in ops {
                rows.push(profile_one(n, w, op, s)?);
            }
        }
    }
    Ok(rows)
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("N,w,operator,ms_per_step,peak_bytes,pair_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{},{}\n",
            r.n_residues, r.window, r.operator, r.ms_per_step, r.peak_bytes, r.pair_count
        ));
    }
    out
}

/// Peak auxiliary floats allocated by each attention path (forward) at the
/// given sequence lengths. Inputs are allocated outside the window.
pub fn attention_memory_scaling(
    ms: &[usize],
    d: usize,
    block: usize,
    seed: u64,
) -> Vec<(usize, u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ms.iter()
        .map(|&m| {
            let q: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, naive_floats) =
                alloc::measure_peak_extra(|| attention_naive(&q, &k, &v, m, d));
            let (_, block_floats) =
                alloc::measure_peak_extra(|| attention_blockwise(&q, &k, &v, m, d, block));
            (m, naive_floats as u64, block_floats as u64)
        })
        .collect()
}

/// Least-squares slope of log(y) against log(x): the scaling exponent.
pub fn fit_power_law(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_counts_exact() {
        assert_eq!(pair_count(2645, 6), 441 * 441);
        assert_eq!(pair_count(2645, 6), 194_481);
        assert_eq!(pair_count(2645, 1), 2645 * 2645);
        assert_eq!(pair_count(214, 6), 36 * 36);
        assert_eq!(pair_count(128, 4), 32 * 32);
    }

    #[test]
    fn pair_count_is_per_sample_and_scales_linearly_with_batch() {
        // the reported pair count is per sample; total attention pair
        // evaluations per step are batch * pair_count, linear in batch
        let s1 = ProfileSettings { batch: 1, hidden: 16, layers: 1, timed_steps: 1, warmup_steps: 0, ..Default::default() };
        let s2 = ProfileSettings { batch: 2, ..s1 };
        let r1 = profile_one(24, 2, GraphOperatorKind::Gc, &s1).unwrap();
        let r2 = profile_one(24, 2, GraphOperatorKind::Gc, &s2).unwrap();
        assert_eq!(r1.pair_count, r2.pair_count);
        assert_eq!(2 * s1.batch as u64 * r1.pair_count, s2.batch as u64 * r2.pair_count);
    }

    #[test]
    fn power_law_fit_recovers_known_exponent() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(1.7)))
            .collect();
        let slope = fit_power_law(&pts);
        assert!((slope - 1.7).abs() < 1e-9);
    }

    #[test]
    fn attention_memory_exponents_separate() {
        let rows = attention_memory_scaling(&[64, 128, 256], 8, 32, 1);
        let naive: Vec<(f64, f64)> =
            rows.iter().map(|&(m, n, _)| (m as f64, n as f64)).collect();
        let blocked: Vec<(f64, f64)> =
            rows.iter().map(|&(m, _, b)| (m as f64, b as f64)).collect();
        assert!(fit_power_law(&naive) > 1.8, "naive slope {}", fit_power_law(&naive));
        assert!(fit_power_law(&blocked) < 1.3, "blockwise slope {}", fit_power_law(&blocked));
    }

    #[test]
    fn profile_rows_carry_exact_pair_counts() {
        let s = ProfileSettings { batch: 1, hidden: 16, layers: 1, timed_steps: 1, warmup_steps: 0, ..Default::default() };
        let rows =
            profile(&[24], &[1, 4], &[GraphOperatorKind::Gc], &s).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].pair_count, 24 * 24);
        assert_eq!(rows[1].pair_count, 36);
        assert!(rows.iter().all(|r| r.ms_per_step > 0.0 && r.peak_bytes > 0));
        let csv = profile_csv(&rows);
        assert!(csv.starts_with("N,w,operator,ms_per_step,peak_bytes,pair_count"));
        assert_eq!(csv.lines().count(), 3);
    }
}
