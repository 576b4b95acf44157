//! Trajectory-level train/validation splitting and lagged-pair indexing.
//!
//! Splits operate on whole units — either complete trajectories or
//! temporal fragments of them — so strongly correlated neighboring frames
//! never straddle the train/validation boundary. Lagged pairs never cross
//! a unit boundary either.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    ByTrajectory,
    /// Cut each trajectory into this many equal temporal fragments first.
    TemporalFragments(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub fraction: f64,
    pub mode: SplitMode,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fraction: 0.2, mode: SplitMode::ByTrajectory, seed: 0 }
    }
}

/// A contiguous frame range `[start, end)` within one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitUnit {
    pub traj: usize,
    pub start: usize,
    pub end: usize,
}

impl SplitUnit {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// All units a dataset decomposes into under the given mode.
pub fn units(lengths: &[usize], mode: SplitMode) -> Vec<SplitUnit> {
    let mut out = Vec::new();
    for (traj, &len) in lengths.iter().enumerate() {
        match mode {
            SplitMode::ByTrajectory => out.push(SplitUnit { traj, start: 0, end: len }),
            SplitMode::TemporalFragments(n) => {
                let n = n.max(1);
                for f in 0..n {
                    let start = len * f / n;
                    let end = len * (f + 1) / n;
                    if end > start {
                        out.push(SplitUnit { traj, start, end });
                    }
                }
            }
        }
    }
    out
}

/// Deterministic split: shuffle units with the seed and hold out
/// `round(fraction * n_units)` of them for validation.
pub fn split(lengths: &[usize], spec: &SplitSpec) -> Result<(Vec<SplitUnit>, Vec<SplitUnit>)> {
    if !(0.0..1.0).contains(&spec.fraction) {
        return Err(Error::Split(format!("validation fraction {} outside [0, 1)", spec.fraction)));
    }
    let all = units(lengths, spec.mode);
    if all.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 units to split, have {}",
            all.len()
        )));
    }
    let n_val = (spec.fraction * all.len() as f64).round() as usize;
    if n_val == 0 {
        return Err(Error::Split(format!(
            "validation fraction {} of {} units selects nothing",
            spec.fraction,
            all.len()
        )));
    }
    if n_val >= all.len() {
        return Err(Error::Split("validation selection leaves no training units".into()));
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let val: Vec<SplitUnit> = order[..n_val].iter().map(|&i| all[i]).collect();
    let train: Vec<SplitUnit> = order[n_val..].iter().map(|&i| all[i]).collect();
    Ok((train, val))
}

/// One time-lagged sample: frames `t` and `t + lag` of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub traj: usize,
    pub t: usize,
}

/// All ordered pairs `(t, t+lag)` inside the given units. Units shorter
/// than the lag contribute nothing and are reported back.
pub fn lagged_pairs(units: &[SplitUnit], lag: usize) -> Result<(Vec<PairIndex>, Vec<SplitUnit>)> {
    if lag == 0 {
        return Err(Error::Config("lag must be >= 1 frame".into()));
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for u in units {
        if u.len() <= lag {
            skipped.push(*u);
            continue;
        }
        for t in u.start..u.end - lag {
            pairs.push(PairIndex { traj: u.traj, t });
        }
    }
    Ok((pairs, skipped))
}

/// Epoch ordering: a seeded shuffle of all pairs (uniform, without
/// replacement).
pub fn epoch_order(n_pairs: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::tensor::rng::key(seed, epoch, 2, 0));
    order.shuffle(&mut rng);
    order
}
