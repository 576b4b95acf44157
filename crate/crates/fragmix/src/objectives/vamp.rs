//! VAMP-2: the squared Frobenius norm of the whitened time-lagged
//! correlation matrix, plus one for the constant mode removed by centering.
//!
//! Whitening inverts covariance square roots through the symmetric
//! eigendecomposition; eigenvalues below `eps` are truncated to keep the
//! estimate bounded when features are degenerate.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Mlp2, Params};
use crate::tensor::{Tape, Tensor};

/// Feature network chi mapping pooled embeddings to `k` basis functions;
/// the same weights serve the instantaneous and lagged frames.
pub struct VampHead {
    pub mlp: Mlp2,
    pub out_dim: usize,
}

impl VampHead {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, k: usize) -> VampHead {
        VampHead { mlp: Mlp2::init(rng, d_in, hidden, k), out_dim: k }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(tape, x)
    }
}

impl Params for VampHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mlp.visit_params(&join(prefix, "chi"), f);
    }
}

/// Inverse square root of a symmetric positive semi-definite matrix with
/// eigenvalue truncation below `eps`. Differentiable.
fn inv_sqrt_truncated(tape: &Tape, c: &Tensor, eps: f64, what: &str) -> Result<Tensor> {
    let (vals, vecs) = tape.sym_eig(c)?;
    if vals.data().iter().all(|&l| l < eps) {
        return Err(Error::DegenerateFeatures(format!(
            "{what}: every eigenvalue is below eps={eps}; features carry no variance"
        )));
    }
    let inv = tape.rsqrt_clamped(&vals, eps);
    // V diag(inv) V^T; the suffix broadcast scales columns of V.
    let scaled = tape.mul(&vecs, &inv)?;
    let vt = tape.transpose2d(&vecs)?;
    tape.matmul(&scaled, &vt)
}

/// VAMP-2 from precomputed (already centered) covariance matrices.
pub fn vamp2_from_covariances(
    tape: &Tape,
    c00: &Tensor,
    c0t: &Tensor,
    ctt: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("whitening eps {eps} must be positive")));
    }
    let w00 = inv_sqrt_truncated(tape, c00, eps, "C00")?;
    let wtt = inv_sqrt_truncated(tape, ctt, eps, "Ctt")?;
    let k = tape.matmul(&tape.matmul(&w00, c0t)?, &wtt)?;
    let sq = tape.mul(&k, &k)?;
    let frob2 = tape.sum_all(&sq)?;
    Ok(tape.add_scalar(&frob2, 1.0))
}

/// VAMP-2 score of paired feature batches `f0`, `ftau` (`[B, k]` each).
/// Mean-centers both, forms batch-averaged covariances, whitens with
/// truncation, and returns `||C00^-1/2 C0t Ctt^-1/2||_F^2 + 1`.
pub fn vamp2_score(tape: &Tape, f0: &Tensor, ftau: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, k) = f0.dims2()?;
    if ftau.shape() != f0.shape() {
        return Err(Error::Dimension(format!(
            "vamp2: f0 {:?} and ftau {:?} must agree",
            f0.shape(),
            ftau.shape()
        )));
    }
    if b < k {
        return Err(Error::Dimension(format!(
            "vamp2: batch of {b} cannot estimate {k}x{k} covariances"
        )));
    }
    let mu0 = tape.mean_rows(f0)?;
    let mut_ = tape.mean_rows(ftau)?;
    let f0c = tape.sub(f0, &mu0)?;
    let ftc = tape.sub(ftau, &mut_)?;
    let f0t = tape.transpose2d(&f0c)?;
    let ftt = tape.transpose2d(&ftc)?;
    let inv_b = 1.0 / b as f64;
    let c00 = tape.mul_scalar(&tape.matmul(&f0t, &f0c)?, inv_b);
    let c0t = tape.mul_scalar(&tape.matmul(&f0t, &ftc)?, inv_b);
    let ctt = tape.mul_scalar(&tape.matmul(&ftt, &ftc)?, inv_b);
    vamp2_from_covariances(tape, &c00, &c0t, &ctt, eps)
}

/// Streaming covariance accumulator for validation scoring: chunks of
/// (f0, ftau) rows are added, centered covariances come out at the end.
#[derive(Clone)]
pub struct CovAccumulator {
    k: usize,
    n: usize,
    sum0: Vec<f64>,
    sumt: Vec<f64>,
    m00: Vec<f64>,
    m0t: Vec<f64>,
    mtt: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(k: usize) -> CovAccumulator {
        CovAccumulator {
            k,
            n: 0,
            sum0: vec![0.0; k],
            sumt: vec![0.0; k],
            m00: vec![0.0; k * k],
            m0t: vec![0.0; k * k],
            mtt: vec![0.0; k * k],
        }
    }

    pub fn add(&mut self, f0: &[f64], ftau: &[f64]) {
        let k = self.k;
        debug_assert_eq!(f0.len() % k, 0);
        let rows = f0.len() / k;
        for r in 0..rows {
            let a = &f0[r * k..(r + 1) * k];
            let b = &ftau[r * k..(r + 1) * k];
            for i in 0..k {
                self.sum0[i] += a[i];
                self.sumt[i] += b[i];
                for j in 0..k {
                    self.m00[i * k + j] += a[i] * a[j];
                    self.m0t[i * k + j] += a[i] * b[j];
                    self.mtt[i * k + j] += b[i] * b[j];
                }
            }
        }
        self.n += rows;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Centered covariance tensors (C00, C0t, Ctt).
    pub fn covariances(&self) -> Result<(Tensor, Tensor, Tensor)> {
        if self.n == 0 {
            return Err(Error::DegenerateFeatures("no pairs accumulated".into()));
        }
        let k = self.k;
        let n = self.n as f64;
        let center = |m: &[f64], sa: &[f64], sb: &[f64]| -> Vec<f64> {
            let mut c = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    c[i * k + j] = m[i * k + j] / n - (sa[i] / n) * (sb[j] / n);
                }
            }
            c
        };
        Ok((
            Tensor::from_vec(center(&self.m00, &self.sum0, &self.sum0), &[k, k])?,
            Tensor::from_vec(center(&self.m0t, &self.sum0, &self.sumt), &[k, k])?,
            Tensor::from_vec(center(&self.mtt, &self.sumt, &self.sumt), &[k, k])?,
        ))
    }

    /// Non-differentiable score from everything accumulated so far.
    pub fn score(&self, eps: f64) -> Result<f64> {
        let tape = Tape::eval();
        let (c00, c0t, ctt) = self.covariances()?;
        Ok(vamp2_from_covariances(&tape, &c00, &c0t, &ctt, eps)?.item())
    }

    /// Estimated singular functions of the whitened lagged covariance:
    /// the slow collective coordinates. Returns the feature means and a
    /// `[k, r]` projection so that coordinate `i` of a feature row `f` is
    /// `sum_j P[j, i] (f[j] - mean[j])`, ordered slowest first.
    pub fn singular_projection(&self, eps: f64, r: usize) -> Result<SlowProjection> {
        let tape = Tape::eval();
        let (c00, c0t, ctt) = self.covariances()?;
        let w00 = inv_sqrt_truncated(&tape, &c00, eps, "C00")?;
        let wtt = inv_sqrt_truncated(&tape, &ctt, eps, "Ctt")?;
        let kmat = tape.matmul(&tape.matmul(&w00, &c0t)?, &wtt)?;
        // left singular vectors of K from the symmetric K K^T
        let kt = tape.transpose2d(&kmat)?;
        let kkt = tape.matmul(&kmat, &kt)?;
        let (vals, vecs) = tape.sym_eig(&kkt)?; // ascending
        let k = self.k;
        let r = r.min(k);
        let mut projection = vec![0.0; k * r];
        let mut singular_values = Vec::with_capacity(r);
        let (vd, w00d) = (vecs.data(), w00.data());
        for out in 0..r {
            let col = k - 1 - out; // descending singular value order
            singular_values.push(vals.data()[col].max(0.0).sqrt());
            // P[:, out] = W00 * u_col
            for row in 0..k {
                let mut s = 0.0;
                for j in 0..k {
                    s += w00d[row * k + j] * vd[j * k + col];
                }
                projection[row * r + out] = s;
            }
        }
        let n = self.n as f64;
        Ok(SlowProjection {
            mean0: self.sum0.iter().map(|s| s / n).collect(),
            projection,
            singular_values,
            k,
            r,
        })
    }
}

/// Linear map from centered chi features onto the estimated slowest
/// singular coordinates.
#[derive(Debug, Clone)]
pub struct SlowProjection {
    pub mean0: Vec<f64>,
    /// Row-major `[k, r]`.
    pub projection: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub k: usize,
    pub r: usize,
}

impl SlowProjection {
    /// Project feature rows `[n, k]` to slow coordinates `[n, r]`.
    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let n = features.len() / self.k;
        let mut out = vec![0.0; n * self.r];
        for row in 0..n {
            let f = &features[row * self.k..(row + 1) * self.k];
            for i in 0..self.r {
                let mut s = 0.0;
                for j in 0..self.k {
                    s += (f[j] - self.mean0[j]) * self.projection[j * self.r + i];
                }
                out[row * self.r + i] = s;
            }
        }
        out
    }
}

/// Exact covariances of the stationary two-state chain with one-hot
/// features; the analytic fixture behind the 1.64 oracle.
pub fn two_state_chain_covariances(t_stay: f64) -> (Tensor, Tensor, Tensor) {
    // stationary distribution (1/2, 1/2); pi_i T_ij joint occupancy
    let joint = [
        [0.5 * t_stay, 0.5 * (1.0 - t_stay)],
        [0.5 * (1.0 - t_stay), 0.5 * t_stay],
    ];
    let mut c00 = vec![0.0; 4];
    let mut c0t = vec![0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            let centered_ii = if i == j { 0.25 } else { -0.25 };
            c00[i * 2 + j] = centered_ii;
            c0t[i * 2 + j] = joint[i][j] - 0.25;
        }
    }
    (
        Tensor::from_vec(c00.clone(), &[2, 2]).unwrap(),
        Tensor::from_vec(c0t, &[2, 2]).unwrap(),
        Tensor::from_vec(c00, &[2, 2]).unwrap(),
    )
}
