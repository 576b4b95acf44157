//! Markov state models by transition counting: sliding-window counts at a
//! fixed lag, row-normalized transition matrix without reversibility
//! symmetrization, empirical populations, implied timescales, and the
//! plot-ready CSV graph emission.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MarkovStateModel {
    pub n_states: usize,
    /// Unsymmetrized transition counts, row-major `n_states^2`.
    pub counts: Vec<u64>,
    /// Row-stochastic transition matrix; zero-count rows become identity
    /// rows (absorbing convention) and are listed in `zero_rows`.
    pub transition: Vec<f64>,
    /// Empirical state frequencies over all frames.
    pub populations: Vec<f64>,
    pub lag_frames: usize,
    pub zero_rows: Vec<usize>,
}

/// Sliding-window transition counts: every within-trajectory pair
/// `(s_t, s_{t+lag})` increments one cell. No pair crosses a trajectory
/// boundary.
pub fn count_transitions(labels: &[Vec<usize>], n_states: usize, lag: usize) -> Result<Vec<u64>> {
    if lag == 0 {
        return Err(Error::Config("lag must be >= 1 frame".into()));
    }
    let mut c = vec![0u64; n_states * n_states];
    for traj in labels {
        for (t, &a) in traj.iter().enumerate() {
            if t + lag >= traj.len() {
                break;
            }
            let b = traj[t + lag];
            if a >= n_states || b >= n_states {
                return Err(Error::Input(format!(
                    "label {} outside {n_states} states",
                    a.max(b)
                )));
            }
            c[a * n_states + b] += 1;
        }
    }
    Ok(c)
}

/// Row-normalize counts; rows without outgoing counts become identity rows
/// and are reported.
pub fn transition_matrix(counts: &[u64], n_states: usize) -> (Vec<f64>, Vec<usize>) {
    let mut t = vec![0.0; n_states * n_states];
    let mut zero_rows = Vec::new();
    for i in 0..n_states {
        let row_sum: u64 = counts[i * n_states..(i + 1) * n_states].iter().sum();
        if row_sum == 0 {
            t[i * n_states + i] = 1.0;
            zero_rows.push(i);
        } else {
            for j in 0..n_states {
                t[i * n_states + j] = counts[i * n_states + j] as f64 / row_sum as f64;
            }
        }
    }
    (t, zero_rows)
}

/// Empirical state populations over all frames.
pub fn populations(labels: &[Vec<usize>], n_states: usize) -> Vec<f64> {
    let mut p = vec![0.0; n_states];
    let mut total = 0usize;
    for traj in labels {
        for &s in traj {
            p[s] += 1.0;
            total += 1;
        }
    }
    if total > 0 {
        p.iter_mut().for_each(|v| *v /= total as f64);
    }
    p
}

/// Implied timescales of a row-stochastic matrix observed at `lag_time`:
/// `t_i = -lag / ln |lambda_i|` for eigenvalue moduli below one, sorted
/// descending. Complex pairs are reported once per eigenvalue by modulus.
pub fn implied_timescales(t: &[f64], n_states: usize, lag_time: f64) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n_states, n_states, t);
    let eig = m.complex_eigenvalues();
    let mut mods: Vec<f64> = eig.iter().map(|c| (c.re * c.re + c.im * c.im).sqrt()).collect();
    mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
    mods.into_iter()
        .filter(|&l| l < 1.0 - 1e-12 && l > 0.0)
        .map(|l| -lag_time / l.ln())
        .collect()
}

/// Assemble the full model from per-trajectory labels.
pub fn build(labels: &[Vec<usize>], n_states: usize, lag: usize) -> Result<MarkovStateModel> {
    let counts = count_transitions(labels, n_states, lag)?;
    let (transition, zero_rows) = transition_matrix(&counts, n_states);
    Ok(MarkovStateModel {
        n_states,
        populations: populations(labels, n_states),
        counts,
        transition,
        lag_frames: lag,
        zero_rows,
    })
}

impl MarkovStateModel {
    /// Total observed pairs: `sum_traj max(L - lag, 0)`.
    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Edge list CSV `from_state,to_state,count,rate_per_ns`. The rate is
    /// transitions per nanosecond of observed pair-time; edges at or below
    /// `min_count` are dropped (keeps the highest-probability transitions).
    pub fn edges_csv(&self, frame_interval_ns: f64, min_count: u64) -> String {
        let observed_ns = self.total_counts() as f64 * frame_interval_ns;
        let mut out = String::from("from_state,to_state,count,rate_per_ns\n");
        for a in 0..self.n_states {
            for b in 0..self.n_states {
                let c = self.counts[a * self.n_states + b];
                if c > min_count {
                    let rate = if observed_ns > 0.0 { c as f64 / observed_ns } else { 0.0 };
                    out.push_str(&format!("{a},{b},{c},{rate:.12e}\n"));
                }
            }
        }
        out
    }

    /// Node list CSV `state,population[,mean_d0,...]`; per-state means of
    /// optional frame-aligned descriptor columns.
    pub fn nodes_csv(&self, labels: &[Vec<usize>], descriptors: Option<&[Vec<f64>]>) -> String {
        let n_desc = descriptors.map_or(0, |d| {
            if d.is_empty() || d[0].is_empty() {
                0
            } else {
                1
            }
        });
        let mut header = String::from("state,population");
        if n_desc > 0 {
            header.push_str(",mean_d0");
        }
        let mut out = header + "\n";
        let mut sums = vec![0.0; self.n_states];
        let mut cnts = vec![0usize; self.n_states];
        if let Some(desc) = descriptors {
            for (traj, dtraj) in labels.iter().zip(desc) {
                for (&s, &v) in traj.iter().zip(dtraj) {
                    sums[s] += v;
                    cnts[s] += 1;
                }
            }
        }
        for s in 0..self.n_states {
            out.push_str(&format!("{s},{:.12e}", self.populations[s]));
            if n_desc > 0 {
                let mean = if cnts[s] > 0 { sums[s] / cnts[s] as f64 } else { 0.0 };
                out.push_str(&format!(",{mean:.12e}"));
            }
            out.push('\n');
        }
        out
    }
}
