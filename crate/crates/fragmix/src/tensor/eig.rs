//! Symmetric eigendecomposition by cyclic Jacobi rotations, with a
//! backward rule so whitening transforms stay differentiable.

use super::tape::Tape;
use super::Tensor;
use crate::error::{Error, Result};

const SYM_TOL: f64 = 1e-8;
const OFF_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Plain (non-tape) Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues ascending and the matching orthonormal eigenvector
/// columns: `a * v_i = lambda_i * v_i`.
pub fn jacobi_eig(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), n * n);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i * n + j] - a[j * n + i]).abs() > SYM_TOL {
                return Err(Error::Symmetry(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
        }
    }
    // Work on the symmetrized copy so tiny asymmetries cannot bias rotations.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = OFF_TOL * scale;

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| 2.0 * m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = m[k * n + p];
                        let akq = m[k * n + q];
                        m[k * n + p] = c * akp - s * akq;
                        m[p * n + k] = m[k * n + p];
                        m[k * n + q] = s * akp + c * akq;
                        m[q * n + k] = m[k * n + q];
                    }
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut vals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let mut sorted_vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            sorted_vecs[k * n + new_col] = v[k * n + old_col];
        }
    }
    vals = sorted_vals;
    Ok((vals, sorted_vecs))
}

impl Tape {
    /// Differentiable symmetric eigendecomposition.
    ///
    /// Outputs are `(eigenvalues [n], eigenvectors [n, n])` with eigenvalues
    /// ascending and eigenvectors as orthonormal columns. The backward rule
    /// assumes distinct eigenvalues; contributions inside a numerically
    /// degenerate pair are dropped rather than amplified.
    pub fn sym_eig(&self, a: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, n2) = a.dims2()?;
        if n != n2 {
            return Err(Error::Dimension(format!("sym_eig: non-square shape {:?}", a.shape())));
        }
        let (vals, vecs) = jacobi_eig(a.data(), n)?;
        let req = self.wants_grad(&[a]);
        let tvals = Tensor::from_op(vals.clone(), vec![n], req);
        let tvecs = Tensor::from_op(vecs.clone(), vec![n, n], req);
        if req {
            let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            self.push(
                vec![a.clone()],
                vec![tvals.clone(), tvecs.clone()],
                Box::new(move |gs| {
                    let gl = gs[0].as_ref();
                    let gv = gs[1].as_ref();
                    // M = diag(gl) + F (.) (V^T gV), F_ij = 1/(l_j - l_i)
                    let mut mid = vec![0.0; n * n];
                    if let Some(gl) = gl {
                        for i in 0..n {
                            mid[i * n + i] = gl[i];
                        }
                    }
                    if let Some(gv) = gv {
                        for i in 0..n {
                            for j in 0..n {
                                if i == j {
                                    continue;
                                }
                                let denom = vals[j] - vals[i];
                                if denom.abs() < 1e-12 * scale {
                                    continue;
                                }
                                let mut c = 0.0;
                                for k in 0..n {
                                    c += vecs[k * n + i] * gv[k * n + j];
                                }
                                mid[i * n + j] += c / denom;
                            }
                        }
                    }
                    // gA = sym(V M V^T)
                    let mut vm = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let mut s = 0.0;
                            for k in 0..n {
                                s += vecs[i * n + k] * mid[k * n + j];
                            }
                            vm[i * n + j] = s;
                        }
                    }
                    let mut ga = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let mut s = 0.0;
                            for k in 0..n {
                                s += vm[i * n + k] * vecs[j * n + k];
                            }
                            ga[i * n + j] = s;
                        }
                    }
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let sym = 0.5 * (ga[i * n + j] + ga[j * n + i]);
                            ga[i * n + j] = sym;
                            ga[j * n + i] = sym;
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok((tvals, tvecs))
    }
}
