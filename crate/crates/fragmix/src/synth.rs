//! Synthetic dynamics with exact oracles.
//!
//! Three continuous systems driven by Euler-Maruyama overdamped Langevin
//! steps, each emitted as position frames in the pipeline's format:
//!
//! * `Ou`: a single linear relaxation mode with analytic spectrum.
//! * `DoubleWell`: quartic double well, one slow barrier-crossing mode.
//! * `ToyPolymer`: a 12-bead chain whose hinge dihedral (beads 5-8) moves
//!   in a two-minimum potential while the remaining torsions relax fast;
//!   the hinge swings one arm, changing radius-graph connectivity between
//!   the open and closed states.
//!
//! The oracle discretizes the 1D generator on a grid, builds the exact
//! one-step transition kernel from the integrator's Gaussian increments,
//! and reads implied timescales from the dense operator's spectrum.
//!
//! A discrete two-state chain fixture (one-hot tokens) backs the VAMP-2
//! score oracle end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Frame, TokenSet};
use crate::msm::implied_timescales as implied_timescales_dense;
use crate::nn::gaussian;
use crate::tensor::rng as crng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticSystem {
    Ou { theta: f64, sigma: f64 },
    DoubleWell { barrier: f64, kt: f64, friction: f64 },
    ToyPolymer { n_beads: usize, barrier: f64, kt: f64 },
}

impl SyntheticSystem {
    pub fn default_ou() -> Self {
        SyntheticSystem::Ou { theta: 1.0, sigma: 1.0 }
    }

    pub fn default_double_well() -> Self {
        SyntheticSystem::DoubleWell { barrier: 1.0, kt: 1.0 / 3.0, friction: 1.0 }
    }

    pub fn default_toy_polymer() -> Self {
        SyntheticSystem::ToyPolymer { n_beads: 12, barrier: 2.5, kt: 1.0 }
    }
}

/// Drift of the 1D systems (force over friction).
fn drift_1d(system: &SyntheticSystem, x: f64) -> f64 {
    match *system {
        SyntheticSystem::Ou { theta, .. } => -theta * x,
        SyntheticSystem::DoubleWell { barrier, friction, .. } => {
            -4.0 * barrier * x * (x * x - 1.0) / friction
        }
        SyntheticSystem::ToyPolymer { .. } => unreachable!("polymer is not a 1D system"),
    }
}

/// Std-dev of the Gaussian increment for one Euler step.
fn noise_1d(system: &SyntheticSystem, dt: f64) -> f64 {
    match *system {
        SyntheticSystem::Ou { sigma, .. } => sigma * dt.sqrt(),
        SyntheticSystem::DoubleWell { kt, friction, .. } => (2.0 * kt * dt / friction).sqrt(),
        SyntheticSystem::ToyPolymer { .. } => unreachable!(),
    }
}

fn check_stability(system: &SyntheticSystem, dt: f64) -> Result<()> {
    let stiffness = match *system {
        SyntheticSystem::Ou { theta, .. } => theta,
        // curvature at the well bottoms
        SyntheticSystem::DoubleWell { barrier, friction, .. } => 8.0 * barrier / friction,
        SyntheticSystem::ToyPolymer { barrier, .. } => 2.0 * barrier, // V'' = 4h = 2*barrier
    };
    if stiffness * dt >= 0.5 {
        return Err(Error::Integration(format!(
            "timestep {dt} too large for stiffness {stiffness} (need dt * stiffness < 0.5)"
        )));
    }
    Ok(())
}

/// One generated trajectory: emitted frames plus the underlying reaction
/// coordinate per frame (x for the 1D systems, hinge dihedral for the
/// polymer), kept for oracle comparisons.
pub struct SynthTraj {
    pub frames: Vec<Frame>,
    pub reaction_coord: Vec<f64>,
}

/// Generation settings shared by all systems.
#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub dt: f64,
    /// Integrator steps per saved frame.
    pub save_every: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { dt: 0.01, save_every: 10, seed: 7 }
    }
}

/// Reference-frame scale for embedding the 1D coordinate into positions:
/// two static reference residues plus the particle residue at `SCALE * x`.
/// The references are deliberately asymmetric (one off-axis) so invariant
/// descriptors resolve the sign of x even after residue pooling.
const WALL_X: f64 = 5.0;
const WALL_B_Y: f64 = 3.0;
const SCALE: f64 = 5.0;

fn frame_1d(x: f64) -> Frame {
    Frame {
        positions: vec![-WALL_X, 0.0, 0.0, WALL_X, WALL_B_Y, 0.0, SCALE * x, 0.0, 0.0],
        residue_index: vec![0, 1, 2],
        anchor: vec![0, 1, 2],
        ligand_mask: vec![false; 3],
    }
}

/// Simulate 1D Euler-Maruyama and return the saved coordinate path.
fn simulate_1d(
    system: &SyntheticSystem,
    x0: f64,
    n_frames: usize,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_stability(system, cfg.dt)?;
    let noise = noise_1d(system, cfg.dt);
    let mut x = x0;
    let mut path = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        for _ in 0..cfg.save_every {
            x += drift_1d(system, x) * cfg.dt + noise * gaussian(rng);
            if !x.is_finite() || x.abs() > 1e3 {
                return Err(Error::Integration(format!("trajectory diverged at x={x}")));
            }
        }
        path.push(x);
    }
    Ok(path)
}

/// Generate `n_trajs` independent trajectories of `n_frames` saved frames.
pub fn generate(
    system: &SyntheticSystem,
    n_frames: usize,
    n_trajs: usize,
    cfg: &GenConfig,
) -> Result<Vec<SynthTraj>> {
    if n_frames == 0 || n_trajs == 0 {
        return Err(Error::Config("need at least one frame and one trajectory".into()));
    }
    (0..n_trajs)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(crng::key(cfg.seed, t as u64, 0, 0));
            match system {
                SyntheticSystem::Ou { sigma, theta } => {
                    // start from the stationary distribution
                    let x0 = if *sigma > 0.0 {
                        gaussian(&mut rng) * sigma / (2.0 * theta).sqrt()
                    } else {
                        1.0
                    };
                    let path = simulate_1d(system, x0, n_frames, cfg, &mut rng)?;
                    Ok(SynthTraj {
                        frames: path.iter().map(|&x| frame_1d(x)).collect(),
                        reaction_coord: path,
                    })
                }
                SyntheticSystem::DoubleWell { .. } => {
                    // alternate starting wells across trajectories
                    let x0 = if t % 2 == 0 { -1.0 } else { 1.0 };
                    let path = simulate_1d(system, x0, n_frames, cfg, &mut rng)?;
                    Ok(SynthTraj {
                        frames: path.iter().map(|&x| frame_1d(x)).collect(),
                        reaction_coord: path,
                    })
                }
                SyntheticSystem::ToyPolymer { n_beads, barrier, kt } => {
                    generate_polymer(*n_beads, *barrier, *kt, n_frames, cfg, &mut rng, t)
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Toy polymer: chain geometry driven by torsion dynamics
// ---------------------------------------------------------------------------

const BOND_LENGTH: f64 = 3.8;
const BOND_ANGLE: f64 = 1.92; // ~110 degrees
/// Mean of the fast arm torsions; gauche-like so the arms curl and the
/// hinge controls cross-arm contacts.
const ARM_DIHEDRAL: f64 = 1.2217; // 70 degrees
/// The two hinge minima (radians): open at 90 degrees, closed at 270.
pub const HINGE_MINIMA: (f64, f64) =
    (std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2 + std::f64::consts::PI);
/// Fast-torsion relaxation rate.
const FAST_THETA: f64 = 10.0;
const FAST_STD: f64 = 0.25;

/// Hinge potential `V = h (1 - cos 2(phi - phi0))`, barrier `2h = barrier`.
fn hinge_drift(phi: f64, barrier: f64) -> f64 {
    let h = 0.5 * barrier;
    -2.0 * h * (2.0 * (phi - HINGE_MINIMA.0)).sin()
}

/// Index (along the dihedral list) of the hinge torsion: the dihedral over
/// beads (4,5,6,7) sets the position of bead 7.
fn hinge_slot(n_beads: usize) -> usize {
    assert!(n_beads >= 9, "polymer needs at least 9 beads for an interior hinge");
    7 - 3
}

#[allow(clippy::too_many_arguments)]
fn generate_polymer(
    n_beads: usize,
    barrier: f64,
    kt: f64,
    n_frames: usize,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
    traj_index: usize,
) -> Result<SynthTraj> {
    check_stability(&SyntheticSystem::ToyPolymer { n_beads, barrier, kt }, cfg.dt)?;
    let n_dihedrals = n_beads - 3;
    let hinge = hinge_slot(n_beads);
    let mut phis = vec![ARM_DIHEDRAL; n_dihedrals];
    phis[hinge] = if traj_index % 2 == 0 { HINGE_MINIMA.0 } else { HINGE_MINIMA.1 };
    let noise_slow = (2.0 * kt * cfg.dt).sqrt();
    let noise_fast = FAST_STD * (2.0 * FAST_THETA * cfg.dt).sqrt();

    let mut frames = Vec::with_capacity(n_frames);
    let mut coord = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        for _ in 0..cfg.save_every {
            for (i, phi) in phis.iter_mut().enumerate() {
                if i == hinge {
                    *phi += hinge_drift(*phi, barrier) * cfg.dt + noise_slow * gaussian(rng);
                } else {
                    // fast OU torsions around the gauche arm angle
                    *phi += -FAST_THETA * (*phi - ARM_DIHEDRAL) * cfg.dt
                        + noise_fast * gaussian(rng);
                }
            }
        }
        let positions = build_chain(n_beads, &phis);
        frames.push(Frame {
            positions,
            residue_index: (0..n_beads as u32).collect(),
            anchor: (0..n_beads as u32).collect(),
            ligand_mask: vec![false; n_beads],
        });
        coord.push(wrap_angle(phis[hinge]));
    }
    Ok(SynthTraj { frames, reaction_coord: coord })
}

pub fn wrap_angle(phi: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut p = phi % two_pi;
    if p < 0.0 {
        p += two_pi;
    }
    p
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Cartesian chain from fixed bond lengths/angles and the given dihedrals
/// (natural extension reference frame placement).
fn build_chain(n_beads: usize, dihedrals: &[f64]) -> Vec<f64> {
    let mut pos = vec![[0.0f64; 3]; n_beads];
    pos[0] = [0.0, 0.0, 0.0];
    pos[1] = [BOND_LENGTH, 0.0, 0.0];
    pos[2] = [
        BOND_LENGTH - BOND_LENGTH * BOND_ANGLE.cos(),
        BOND_LENGTH * BOND_ANGLE.sin(),
        0.0,
    ];
    for i in 3..n_beads {
        let phi = dihedrals[i - 3];
        let (a, b, c) = (pos[i - 3], pos[i - 2], pos[i - 1]);
        let d_local = [
            -BOND_LENGTH * BOND_ANGLE.cos(),
            BOND_LENGTH * phi.cos() * BOND_ANGLE.sin(),
            -BOND_LENGTH * phi.sin() * BOND_ANGLE.sin(),
        ];
        let bc = unit([c[0] - b[0], c[1] - b[1], c[2] - b[2]]);
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let n = unit(cross(ab, bc));
        let m = cross(n, bc);
        for k in 0..3 {
            pos[i][k] = c[k] + bc[k] * d_local[0] + m[k] * d_local[1] + n[k] * d_local[2];
        }
    }
    pos.into_iter().flatten().collect()
}

/// Measured dihedral angle of four points, in [0, 2 pi).
pub fn dihedral(p0: &[f64], p1: &[f64], p2: &[f64], p3: &[f64]) -> f64 {
    let b1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
    let b2 = [p2[0] - p1[0], p2[1] - p1[1], p2[2] - p1[2]];
    let b3 = [p3[0] - p2[0], p3[1] - p2[1], p3[2] - p2[2]];
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let m1 = cross(n1, unit(b2));
    wrap_angle(m1.iter().zip(&n2).map(|(a, b)| a * b).sum::<f64>().atan2(
        n1.iter().zip(&n2).map(|(a, b)| a * b).sum::<f64>(),
    ))
}

// ---------------------------------------------------------------------------
// Two-state chain fixture
// ---------------------------------------------------------------------------

/// Discrete two-state Markov chain sampled from its stationary
/// distribution, emitted as one-hot tokens (one residue, two channels).
pub fn generate_chain2(
    stay: f64,
    n_frames: usize,
    n_trajs: usize,
    seed: u64,
) -> Result<Vec<(Vec<u8>, TokenSet)>> {
    if !(0.0..=1.0).contains(&stay) {
        return Err(Error::Config(format!("stay probability {stay} outside [0, 1]")));
    }
    Ok((0..n_trajs)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(crng::key(seed, t as u64, 1, 0));
            let mut s: u8 = if rng.gen_bool(0.5) { 1 } else { 0 };
            let mut states = Vec::with_capacity(n_frames);
            let mut tokens = Vec::with_capacity(n_frames * 2);
            for _ in 0..n_frames {
                states.push(s);
                tokens.extend_from_slice(if s == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] });
                if !rng.gen_bool(stay) {
                    s = 1 - s;
                }
            }
            (states, TokenSet { n_residues: 1, hidden: 2, n_frames, tokens })
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Grid transfer-operator oracle
// ---------------------------------------------------------------------------

/// Abramowitz-Stegun style complementary error function (|err| < 1.2e-7),
/// ample for bin probabilities.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Exact one-step bin-to-bin transition matrix of the Euler integrator on
/// `n_bins` grid cells spanning `[lo, hi]`. Rows are renormalized so mass
/// leaking past the boundary bins is reflected into them.
pub fn grid_kernel(
    system: &SyntheticSystem,
    dt: f64,
    n_bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<f64>> {
    if matches!(system, SyntheticSystem::ToyPolymer { .. }) {
        return Err(Error::Config(
            "grid kernel covers the 1D systems; the polymer oracle counts a long trajectory"
                .into(),
        ));
    }
    check_stability(system, dt)?;
    let width = (hi - lo) / n_bins as f64;
    let sd = noise_1d(system, dt);
    let mut k = vec![0.0; n_bins * n_bins];
    for i in 0..n_bins {
        let x = lo + (i as f64 + 0.5) * width;
        let mean = x + drift_1d(system, x) * dt;
        let row = &mut k[i * n_bins..(i + 1) * n_bins];
        for (j, slot) in row.iter_mut().enumerate() {
            let a = lo + j as f64 * width;
            let b = a + width;
            *slot = normal_cdf((b - mean) / sd) - normal_cdf((a - mean) / sd);
        }
        let sum: f64 = row.iter().sum();
        for slot in row.iter_mut() {
            *slot /= sum;
        }
    }
    Ok(k)
}

fn dense_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                for j in 0..n {
                    c[i * n + j] += aik * b[k * n + j];
                }
            }
        }
    }
    c
}

fn dense_matpow(k: &[f64], n: usize, mut p: usize) -> Vec<f64> {
    let mut result = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
    }
    let mut base = k.to_vec();
    while p > 0 {
        if p & 1 == 1 {
            result = dense_matmul(&result, &base, n);
        }
        base = dense_matmul(&base, &base, n);
        p >>= 1;
    }
    result
}

/// Oracle implied timescales of a 1D system at lag `lag_steps * dt`, from
/// dense propagation of the one-step kernel.
pub fn oracle_timescales(
    system: &SyntheticSystem,
    dt: f64,
    lag_steps: usize,
    n_bins: usize,
) -> Result<Vec<f64>> {
    if lag_steps == 0 {
        return Err(Error::Config("lag must be >= 1 step".into()));
    }
    let (lo, hi) = match *system {
        SyntheticSystem::Ou { theta, sigma } => {
            let sd = sigma / (2.0 * theta).sqrt();
            (-5.0 * sd, 5.0 * sd)
        }
        SyntheticSystem::DoubleWell { barrier, kt, .. } => {
            // wells at +-1; spread inside a well ~ sqrt(kT / 8 barrier)
            let sd = (kt / (8.0 * barrier)).sqrt();
            (-1.0 - 6.0 * sd, 1.0 + 6.0 * sd)
        }
        SyntheticSystem::ToyPolymer { .. } => {
            return Err(Error::Config("use polymer_dihedral_oracle for the polymer".into()))
        }
    };
    let k = grid_kernel(system, dt, n_bins, lo, hi)?;
    let kt = dense_matpow(&k, n_bins, lag_steps);
    Ok(implied_timescales_dense(&kt, n_bins, lag_steps as f64 * dt))
}

/// Statistical oracle for the polymer hinge: simulate the 1D hinge torsion
/// for `n_steps`, bin the angle, count lagged transitions, and return the
/// implied timescales of the counted chain.
pub fn polymer_dihedral_oracle(
    barrier: f64,
    kt: f64,
    dt: f64,
    n_steps: usize,
    lag_steps: usize,
    n_bins: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (2.0 * kt * dt).sqrt();
    let mut phi = HINGE_MINIMA.0;
    let mut path = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        phi += hinge_drift(phi, barrier) * dt + noise * gaussian(&mut rng);
        path.push(wrap_angle(phi));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let bin_of = |p: f64| ((p / two_pi * n_bins as f64) as usize).min(n_bins - 1);
    let mut counts = vec![0.0f64; n_bins * n_bins];
    for t in 0..n_steps - lag_steps {
        counts[bin_of(path[t]) * n_bins + bin_of(path[t + lag_steps])] += 1.0;
    }
    let mut t = vec![0.0; n_bins * n_bins];
    for i in 0..n_bins {
        let row_sum: f64 = counts[i * n_bins..(i + 1) * n_bins].iter().sum();
        if row_sum > 0.0 {
            for j in 0..n_bins {
                t[i * n_bins + j] = counts[i * n_bins + j] / row_sum;
            }
        } else {
            t[i * n_bins + i] = 1.0;
        }
    }
    Ok(implied_timescales_dense(&t, n_bins, lag_steps as f64 * dt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ou_zero_noise_decays_exponentially() {
        let sys = SyntheticSystem::Ou { theta: 1.0, sigma: 0.0 };
        let cfg = GenConfig { dt: 0.001, save_every: 100, seed: 1 };
        let trajs = generate(&sys, 20, 1, &cfg).unwrap();
        let path = &trajs[0].reaction_coord;
        // x(t) ~ x0 e^{-theta t} with t = 0.1 per frame
        for (f, &x) in path.iter().enumerate() {
            let t = 0.1 * (f + 1) as f64;
            let expect = (-t).exp();
            assert!((x - expect).abs() / expect < 0.01, "frame {f}: {x} vs {expect}");
        }
    }

    #[test]
    fn same_seed_identical_trajectories() {
        let sys = SyntheticSystem::default_double_well();
        let cfg = GenConfig::default();
        let a = generate(&sys, 50, 2, &cfg).unwrap();
        let b = generate(&sys, 50, 2, &cfg).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.reaction_coord, tb.reaction_coord);
        }
        let c = generate(&sys, 50, 2, &GenConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a[0].reaction_coord, c[0].reaction_coord);
    }

    #[test]
    fn unstable_timestep_rejected() {
        let sys = SyntheticSystem::DoubleWell { barrier: 10.0, kt: 1.0, friction: 1.0 };
        let cfg = GenConfig { dt: 0.01, save_every: 1, seed: 0 };
        assert!(matches!(generate(&sys, 10, 1, &cfg), Err(Error::Integration(_))));
    }

    #[test]
    fn double_well_occupancy_balanced() {
        let sys = SyntheticSystem::default_double_well();
        let cfg = GenConfig { dt: 0.01, save_every: 1, seed: 3 };
        let trajs = generate(&sys, 100_000, 1, &cfg).unwrap();
        let n_right =
            trajs[0].reaction_coord.iter().filter(|&&x| x > 0.0).count() as f64;
        let n = trajs[0].reaction_coord.len() as f64;
        // binomial with strong correlation; allow a generous band around 1/2
        let frac = n_right / n;
        assert!((frac - 0.5).abs() < 0.2, "right-well occupancy {frac}");
    }

    #[test]
    fn chain_reconstruction_reproduces_requested_dihedrals() {
        let n = 12;
        let dihedrals: Vec<f64> =
            (0..n - 3).map(|i| wrap_angle(0.5 + 0.61 * i as f64)).collect();
        let pos = build_chain(n, &dihedrals);
        for i in 3..n {
            let measured = dihedral(
                &pos[(i - 3) * 3..(i - 3) * 3 + 3],
                &pos[(i - 2) * 3..(i - 2) * 3 + 3],
                &pos[(i - 1) * 3..(i - 1) * 3 + 3],
                &pos[i * 3..i * 3 + 3],
            );
            let want = dihedrals[i - 3];
            let diff = (measured - want + std::f64::consts::PI)
                .rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
            assert!(diff.abs() < 1e-9, "dihedral {i}: {measured} vs {want}");
        }
        // bond lengths preserved
        for i in 1..n {
            let d: f64 = (0..3)
                .map(|k| (pos[i * 3 + k] - pos[(i - 1) * 3 + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d - BOND_LENGTH).abs() < 1e-9);
        }
    }

    #[test]
    fn polymer_hinge_changes_graph_connectivity() {
        let n = 12;
        let mut phis = vec![ARM_DIHEDRAL; n - 3];
        phis[hinge_slot(n)] = HINGE_MINIMA.0;
        let closed = build_chain(n, &phis);
        phis[hinge_slot(n)] = HINGE_MINIMA.1;
        let open = build_chain(n, &phis);
        let g_closed = crate::geometry::radius_graph(&closed, 10.0).unwrap();
        let g_open = crate::geometry::radius_graph(&open, 10.0).unwrap();
        assert_ne!(g_closed.edges, g_open.edges, "hinge states must differ in connectivity");
    }

    #[test]
    fn ou_oracle_recovers_one_over_theta() {
        let theta = 1.0;
        let sys = SyntheticSystem::Ou { theta, sigma: 1.0 };
        let ts = oracle_timescales(&sys, 0.01, 10, 200).unwrap();
        // Euler discretization shifts 1/theta by O(theta dt)
        assert!((ts[0] - 1.0 / theta).abs() / (1.0 / theta) < 0.02, "t1 {}", ts[0]);
        // analytic OU ladder: t_k = 1/(k theta)
        assert!((ts[1] - 0.5).abs() / 0.5 < 0.02, "t2 {}", ts[1]);
    }

    #[test]
    fn double_well_oracle_has_spectral_gap() {
        let sys = SyntheticSystem::default_double_well();
        let ts = oracle_timescales(&sys, 0.01, 10, 200).unwrap();
        assert!(ts[0] / ts[1] > 10.0, "gap ratio {} (t1={}, t2={})", ts[0] / ts[1], ts[0], ts[1]);
        // Kramers estimate for barrier/kT = 3: about 11 time units
        assert!(ts[0] > 5.0 && ts[0] < 25.0, "slow timescale {}", ts[0]);
    }

    #[test]
    fn oracle_lag_invariant_for_markovian_grid_chain() {
        let sys = SyntheticSystem::default_double_well();
        let t_lag = oracle_timescales(&sys, 0.01, 10, 150).unwrap()[0];
        let t_2lag = oracle_timescales(&sys, 0.01, 20, 150).unwrap()[0];
        assert!((t_lag - t_2lag).abs() / t_lag < 0.02, "{t_lag} vs {t_2lag}");
    }

    #[test]
    fn oracle_converges_under_grid_refinement() {
        let sys = SyntheticSystem::default_double_well();
        let t100 = oracle_timescales(&sys, 0.01, 10, 100).unwrap()[0];
        let t200 = oracle_timescales(&sys, 0.01, 10, 200).unwrap()[0];
        let t400 = oracle_timescales(&sys, 0.01, 10, 400).unwrap()[0];
        let d1 = (t200 - t100).abs();
        let d2 = (t400 - t200).abs();
        assert!(d2 <= d1 * 1.5 + 1e-9, "refinement not converging: {t100} {t200} {t400}");
        assert!((t400 - t200).abs() / t200 < 0.02);
    }

    #[test]
    fn chain2_tokens_are_one_hot_and_deterministic() {
        let a = generate_chain2(0.9, 200, 2, 5).unwrap();
        let b = generate_chain2(0.9, 200, 2, 5).unwrap();
        assert_eq!(a[0].0, b[0].0);
        for (states, tokens) in &a {
            for (f, &s) in states.iter().enumerate() {
                let tok = &tokens.tokens[f * 2..(f + 1) * 2];
                assert_eq!(tok, if s == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] });
            }
        }
        // both states visited
        assert!(a[0].0.iter().any(|&s| s == 0) && a[0].0.iter().any(|&s| s == 1));
    }

    #[test]
    fn polymer_generation_emits_valid_frames() {
        let sys = SyntheticSystem::default_toy_polymer();
        let cfg = GenConfig { dt: 0.005, save_every: 20, seed: 2 };
        let trajs = generate(&sys, 30, 2, &cfg).unwrap();
        for tr in &trajs {
            assert_eq!(tr.frames.len(), 30);
            for f in &tr.frames {
                f.validate().unwrap();
                assert_eq!(f.n_residues(), 12);
            }
        }
        // trajectories started in different wells
        let d0 = trajs[0].reaction_coord[0];
        let d1 = trajs[1].reaction_coord[0];
        assert!((d0 - d1).abs() > 1.0);
    }
}
