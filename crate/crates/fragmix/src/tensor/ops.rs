//! Primitive tensor operations and their vector-Jacobian products.
//!
//! Shapes follow two rules: binary elementwise ops broadcast only when the
//! right operand's shape is a suffix of the left's (covers bias rows and
//! per-column vectors over a leading batch dimension); everything else
//! requires an explicit reshape.

use super::tape::Tape;
use super::{rng, Tensor};
use crate::error::{Error, Result};

fn suffix_len(a: &Tensor, b: &Tensor, op: &str) -> Result<usize> {
    let ash = a.shape();
    let bsh = b.shape();
    if bsh.len() <= ash.len() && ash[ash.len() - bsh.len()..] == *bsh {
        Ok(b.numel().max(1))
    } else {
        Err(Error::Dimension(format!(
            "{op}: shape {bsh:?} is not a suffix of {ash:?}"
        )))
    }
}

fn last_dim(t: &Tensor, op: &str) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::Dimension(format!("{op}: needs a non-empty last dimension"))),
    }
}

impl Tape {
    fn binary(
        &self,
        a: &Tensor,
        b: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        // (x, y, g) -> (dx, dy)
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let bn = suffix_len(a, b, op)?;
        let ad = a.data();
        let bd = b.data();
        let data: Vec<f64> = ad.iter().enumerate().map(|(i, &x)| fwd(x, bd[i % bn])).collect();
        let req = self.wants_grad(&[a, b]);
        let out = Tensor::from_op(data, a.shape().to_vec(), req);
        if req {
            let (ac, bc) = (a.clone(), b.clone());
            self.push(
                vec![a.clone(), b.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let ad = ac.data();
                    let bd = bc.data();
                    let mut ga = vec![0.0; ad.len()];
                    let mut gb = vec![0.0; bn];
                    for i in 0..ad.len() {
                        let (dx, dy) = bwd(ad[i], bd[i % bn], g[i]);
                        ga[i] = dx;
                        gb[i % bn] += dy;
                    }
                    vec![Some(ga), Some(gb)]
                }),
            );
        }
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "div", |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    fn unary(
        &self,
        a: &Tensor,
        fwd: impl Fn(f64) -> f64,
        // (x, y, g) -> dx
        bwd: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| fwd(x)).collect();
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, a.shape().to_vec(), req);
        if req {
            let (ac, oc) = (a.clone(), out.clone());
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let ad = ac.data();
                    let od = oc.data();
                    let ga = (0..ad.len()).map(|i| bwd(ad[i], od[i], g[i])).collect();
                    vec![Some(ga)]
                }),
            );
        }
        out
    }

    pub fn add_scalar(&self, a: &Tensor, s: f64) -> Tensor {
        self.unary(a, |x| x + s, |_, _, g| g)
    }

    pub fn mul_scalar(&self, a: &Tensor, s: f64) -> Tensor {
        self.unary(a, move |x| x * s, move |_, _, g| g * s)
    }

    pub fn neg(&self, a: &Tensor) -> Tensor {
        self.mul_scalar(a, -1.0)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        self.unary(a, sigmoid_scalar, |_, y, g| g * y * (1.0 - y))
    }

    pub fn silu(&self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x * sigmoid_scalar(x), |x, _, g| {
            let s = sigmoid_scalar(x);
            g * s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn exp(&self, a: &Tensor) -> Tensor {
        self.unary(a, f64::exp, |_, y, g| g * y)
    }

    pub fn log(&self, a: &Tensor) -> Tensor {
        self.unary(a, f64::ln, |x, _, g| g / x)
    }

    pub fn sqrt(&self, a: &Tensor) -> Tensor {
        self.unary(a, f64::sqrt, |_, y, g| g * 0.5 / y)
    }

    /// `x -> 1/sqrt(x)` with entries below `eps` clamped to zero. Used for
    /// truncated whitening of covariance eigenvalues.
    pub fn rsqrt_clamped(&self, a: &Tensor, eps: f64) -> Tensor {
        self.unary(
            a,
            move |x| if x < eps { 0.0 } else { 1.0 / x.sqrt() },
            move |x, _, g| if x < eps { 0.0 } else { g * -0.5 * x.powf(-1.5) },
        )
    }

    pub fn softmax_lastdim(&self, a: &Tensor) -> Result<Tensor> {
        let d = last_dim(a, "softmax_lastdim")?;
        let rows = a.numel() / d;
        let ad = a.data();
        let mut data = vec![0.0; a.numel()];
        for r in 0..rows {
            softmax_row(&ad[r * d..(r + 1) * d], &mut data[r * d..(r + 1) * d]);
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, a.shape().to_vec(), req);
        if req {
            let oc = out.clone();
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let s = oc.data();
                    let mut ga = vec![0.0; s.len()];
                    for r in 0..rows {
                        let (sr, gr) = (&s[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            ga[r * d + j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    pub fn log_softmax_lastdim(&self, a: &Tensor) -> Result<Tensor> {
        let d = last_dim(a, "log_softmax_lastdim")?;
        let rows = a.numel() / d;
        let ad = a.data();
        let mut data = vec![0.0; a.numel()];
        for r in 0..rows {
            let row = &ad[r * d..(r + 1) * d];
            let lse = logsumexp_row(row);
            for j in 0..d {
                data[r * d + j] = row[j] - lse;
            }
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, a.shape().to_vec(), req);
        if req {
            let oc = out.clone();
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let lp = oc.data();
                    let mut ga = vec![0.0; lp.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..d {
                            ga[r * d + j] = gr[j] - lp[r * d + j].exp() * gsum;
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// `[..., D] -> [...]` log-sum-exp over the last dimension.
    pub fn logsumexp_lastdim(&self, a: &Tensor) -> Result<Tensor> {
        let d = last_dim(a, "logsumexp_lastdim")?;
        let rows = a.numel() / d;
        let ad = a.data();
        let data: Vec<f64> = (0..rows).map(|r| logsumexp_row(&ad[r * d..(r + 1) * d])).collect();
        let shape = reduced_shape(a.shape());
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, shape, req);
        if req {
            let (ac, oc) = (a.clone(), out.clone());
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let ad = ac.data();
                    let od = oc.data();
                    let mut ga = vec![0.0; ad.len()];
                    for r in 0..rows {
                        for j in 0..d {
                            ga[r * d + j] = (ad[r * d + j] - od[r]).exp() * g[r];
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(vec![s], vec![1], req);
        if req {
            let n = a.numel();
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap()[0];
                    vec![Some(vec![g; n])]
                }),
            );
        }
        Ok(out)
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel() as f64;
        let s = self.sum_all(a)?;
        Ok(self.mul_scalar(&s, 1.0 / n))
    }

    /// `[..., D] -> [...]` sum over the last dimension.
    pub fn sum_lastdim(&self, a: &Tensor) -> Result<Tensor> {
        let d = last_dim(a, "sum_lastdim")?;
        let rows = a.numel() / d;
        let ad = a.data();
        let data: Vec<f64> = (0..rows).map(|r| ad[r * d..(r + 1) * d].iter().sum()).collect();
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, reduced_shape(a.shape()), req);
        if req {
            let n = a.numel();
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; n];
                    for r in 0..rows {
                        ga[r * d..(r + 1) * d].fill(g[r]);
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// Column means of a 2D tensor: `[R, C] -> [C]`.
    pub fn mean_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        let ad = a.data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += ad[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![c], req);
        if req {
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j] / r as f64;
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents differ, {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let req = self.wants_grad(&[a, b]);
        let out = Tensor::from_op(data, vec![m, n], req);
        if req {
            let (ac, bc) = (a.clone(), b.clone());
            self.push(
                vec![a.clone(), b.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let ga = if ac.requires_grad() {
                        // dA = G * B^T : dot of g-rows with b-rows
                        let bd = bc.data();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let br = &bd[kk * n..(kk + 1) * n];
                                da[i * k + kk] = dot(gr, br);
                            }
                        }
                        Some(da)
                    } else {
                        None
                    };
                    let gb = if bc.requires_grad() {
                        // dB = A^T * G
                        let ad = ac.data();
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let aik = ad[i * k + kk];
                                if aik != 0.0 {
                                    let dbr = &mut db[kk * n..(kk + 1) * n];
                                    for j in 0..n {
                                        dbr[j] += aik * gr[j];
                                    }
                                }
                            }
                        }
                        Some(db)
                    } else {
                        None
                    };
                    vec![ga, gb]
                }),
            );
        }
        Ok(out)
    }

    pub fn transpose2d(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        let ad = a.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ad[i * c + j];
            }
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![c, r], req);
        if req {
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// Zero-copy reshape; element count must be unchanged.
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} ({} elements) -> {:?} ({} elements)",
                a.shape(),
                a.numel(),
                shape,
                numel
            )));
        }
        let req = self.wants_grad(&[a]);
        let out = a.view_of(shape.to_vec(), req);
        if req {
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| vec![gs[0].clone()]),
            );
        }
        Ok(out)
    }

    /// Concatenate 2D tensors along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat2d(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat2d: no inputs".into()));
        }
        if axis > 1 {
            return Err(Error::Dimension(format!("concat2d: invalid axis {axis}")));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| p.dims2()).collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let (rows, cols, data) = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(Error::Dimension("concat2d axis 0: column counts differ".into()));
            }
            let rows: usize = dims.iter().map(|&(r, _)| r).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for p in parts {
                data.extend_from_slice(p.data());
            }
            (rows, c0, data)
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(Error::Dimension("concat2d axis 1: row counts differ".into()));
            }
            let cols: usize = dims.iter().map(|&(_, c)| c).sum();
            let mut data = vec![0.0; r0 * cols];
            let mut off = 0;
            for (p, &(_, c)) in parts.iter().zip(&dims) {
                let pd = p.data();
                for i in 0..r0 {
                    data[i * cols + off..i * cols + off + c].copy_from_slice(&pd[i * c..(i + 1) * c]);
                }
                off += c;
            }
            (r0, cols, data)
        };
        let refs: Vec<&Tensor> = parts.to_vec();
        let req = self.wants_grad(&refs);
        let out = Tensor::from_op(data, vec![rows, cols], req);
        if req {
            let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            self.push(
                owned,
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut grads = Vec::with_capacity(dims.len());
                    if axis == 0 {
                        let mut row_off = 0;
                        for &(r, c) in &dims {
                            grads.push(Some(g[row_off * c..(row_off + r) * c].to_vec()));
                            row_off += r;
                        }
                    } else {
                        let mut col_off = 0;
                        for &(r, c) in &dims {
                            let mut gp = vec![0.0; r * c];
                            for i in 0..r {
                                gp[i * c..(i + 1) * c]
                                    .copy_from_slice(&g[i * cols + col_off..i * cols + col_off + c]);
                            }
                            grads.push(Some(gp));
                            col_off += c;
                        }
                    }
                    grads
                }),
            );
        }
        Ok(out)
    }

    /// Row gather with zero-padding: output row `r` is `a[idx[r]]`, or zeros
    /// where `idx[r] < 0`.
    pub fn gather_rows(&self, a: &Tensor, idx: &[i64]) -> Result<Tensor> {
        let (rows, c) = a.dims2()?;
        for &i in idx {
            if i >= rows as i64 {
                return Err(Error::Dimension(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
        }
        let ad = a.data();
        let mut data = vec![0.0; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            if i >= 0 {
                data[r * c..(r + 1) * c].copy_from_slice(&ad[i as usize * c..(i as usize + 1) * c]);
            }
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![idx.len(), c], req);
        if req {
            let idx = idx.to_vec();
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; rows * c];
                    for (r, &i) in idx.iter().enumerate() {
                        if i >= 0 {
                            let dst = &mut ga[i as usize * c..(i as usize + 1) * c];
                            for (d, s) in dst.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// Sum rows of `a` into `n_rows` buckets: `out[tgt[e]] += a[e]`.
    pub fn scatter_sum_rows(&self, a: &Tensor, tgt: &[usize], n_rows: usize) -> Result<Tensor> {
        let (e, c) = a.dims2()?;
        if tgt.len() != e {
            return Err(Error::Dimension(format!(
                "scatter_sum_rows: {} targets for {} rows",
                tgt.len(),
                e
            )));
        }
        if let Some(&bad) = tgt.iter().find(|&&t| t >= n_rows) {
            return Err(Error::Dimension(format!(
                "scatter_sum_rows: target {bad} out of range for {n_rows} rows"
            )));
        }
        let ad = a.data();
        let mut data = vec![0.0; n_rows * c];
        for (r, &t) in tgt.iter().enumerate() {
            let dst = &mut data[t * c..(t + 1) * c];
            for (d, s) in dst.iter_mut().zip(&ad[r * c..(r + 1) * c]) {
                *d += s;
            }
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![n_rows, c], req);
        if req {
            let tgt = tgt.to_vec();
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; e * c];
                    for (r, &t) in tgt.iter().enumerate() {
                        ga[r * c..(r + 1) * c].copy_from_slice(&g[t * c..(t + 1) * c]);
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// Per-row element pick: `[B, S] x idx[B] -> [B]`.
    pub fn gather_lastdim(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (b, s) = a.dims2()?;
        if idx.len() != b {
            return Err(Error::Dimension(format!(
                "gather_lastdim: {} indices for {} rows",
                idx.len(),
                b
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s) {
            return Err(Error::Dimension(format!(
                "gather_lastdim: index {bad} out of range for {s} columns"
            )));
        }
        let ad = a.data();
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| ad[r * s + i]).collect();
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![b], req);
        if req {
            let idx = idx.to_vec();
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; b * s];
                    for (r, &i) in idx.iter().enumerate() {
                        ga[r * s + i] = g[r];
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// `[B, M, h*d] -> [B*h, M, d]`: regroup per-token channels into
    /// per-head attention groups.
    pub fn split_heads(&self, a: &Tensor, heads: usize) -> Result<Tensor> {
        let (b, m, hd) = a.dims3()?;
        if heads == 0 || hd % heads != 0 {
            return Err(Error::Dimension(format!(
                "split_heads: channel dim {hd} not divisible by {heads} heads"
            )));
        }
        let d = hd / heads;
        let ad = a.data();
        let mut data = vec![0.0; a.numel()];
        for bi in 0..b {
            for mi in 0..m {
                for h in 0..heads {
                    let src = bi * m * hd + mi * hd + h * d;
                    let dst = (bi * heads + h) * m * d + mi * d;
                    data[dst..dst + d].copy_from_slice(&ad[src..src + d]);
                }
            }
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![b * heads, m, d], req);
        if req {
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; g.len()];
                    for bi in 0..b {
                        for mi in 0..m {
                            for h in 0..heads {
                                let src = bi * m * hd + mi * hd + h * d;
                                let dst = (bi * heads + h) * m * d + mi * d;
                                ga[src..src + d].copy_from_slice(&g[dst..dst + d]);
                            }
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// Inverse of [`Tape::split_heads`]: `[B*h, M, d] -> [B, M, h*d]`.
    pub fn merge_heads(&self, a: &Tensor, heads: usize) -> Result<Tensor> {
        let (bh, m, d) = a.dims3()?;
        if heads == 0 || bh % heads != 0 {
            return Err(Error::Dimension(format!(
                "merge_heads: group dim {bh} not divisible by {heads} heads"
            )));
        }
        let b = bh / heads;
        let hd = heads * d;
        let ad = a.data();
        let mut data = vec![0.0; a.numel()];
        for bi in 0..b {
            for mi in 0..m {
                for h in 0..heads {
                    let src = (bi * heads + h) * m * d + mi * d;
                    let dst = bi * m * hd + mi * hd + h * d;
                    data[dst..dst + d].copy_from_slice(&ad[src..src + d]);
                }
            }
        }
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![b, m, hd], req);
        if req {
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; g.len()];
                    for bi in 0..b {
                        for mi in 0..m {
                            for h in 0..heads {
                                let src = (bi * heads + h) * m * d + mi * d;
                                let dst = bi * m * hd + mi * hd + h * d;
                                ga[src..src + d].copy_from_slice(&g[dst..dst + d]);
                            }
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// Mean over the middle axis: `[B, M, H] -> [B, H]`.
    pub fn mean_axis1(&self, a: &Tensor) -> Result<Tensor> {
        let (b, m, h) = a.dims3()?;
        let ad = a.data();
        let mut data = vec![0.0; b * h];
        for bi in 0..b {
            for mi in 0..m {
                let src = &ad[bi * m * h + mi * h..bi * m * h + (mi + 1) * h];
                let dst = &mut data[bi * h..(bi + 1) * h];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / m as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, vec![b, h], req);
        if req {
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let mut ga = vec![0.0; b * m * h];
                    for bi in 0..b {
                        for mi in 0..m {
                            let dst = &mut ga[bi * m * h + mi * h..bi * m * h + (mi + 1) * h];
                            for (d, s) in dst.iter_mut().zip(&g[bi * h..(bi + 1) * h]) {
                                *d = s * inv;
                            }
                        }
                    }
                    vec![Some(ga)]
                }),
            );
        }
        Ok(out)
    }

    /// Layer normalization over the last dimension with a learned scale
    /// (no bias), eps 1e-5.
    pub fn layernorm(&self, a: &Tensor, gamma: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let d = last_dim(a, "layernorm")?;
        if gamma.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layernorm: scale shape {:?} does not match last dim {d}",
                gamma.shape()
            )));
        }
        let rows = a.numel() / d;
        let ad = a.data();
        let gd = gamma.data();
        let mut data = vec![0.0; a.numel()];
        let mut mus = vec![0.0; rows];
        let mut istds = vec![0.0; rows];
        for r in 0..rows {
            let row = &ad[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            mus[r] = mu;
            istds[r] = istd;
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) * istd * gd[j];
            }
        }
        let req = self.wants_grad(&[a, gamma]);
        let out = Tensor::from_op(data, a.shape().to_vec(), req);
        if req {
            let (ac, gc) = (a.clone(), gamma.clone());
            self.push(
                vec![a.clone(), gamma.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let ad = ac.data();
                    let gd = gc.data();
                    let mut ga = vec![0.0; ad.len()];
                    let mut ggamma = vec![0.0; d];
                    for r in 0..rows {
                        let row = &ad[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let (mu, istd) = (mus[r], istds[r]);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mu) * istd;
                            let dxhat = gr[j] * gd[j];
                            ggamma[j] += gr[j] * xhat;
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mu) * istd;
                            let dxhat = gr[j] * gd[j];
                            ga[r * d + j] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    vec![Some(ga), Some(ggamma)]
                }),
            );
        }
        Ok(out)
    }

    /// Inverted dropout: identity in evaluation mode, keeps each element
    /// with probability `1 - rate` and rescales otherwise. The mask stream
    /// is keyed by `(seed, step, op_id, element)`.
    pub fn dropout(&self, a: &Tensor, rate: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.is_training() || rate == 0.0 {
            // Identity, but keep the gradient path alive.
            return Ok(self.add_scalar(a, 0.0));
        }
        let (seed, step) = self.rng_key();
        let op = self.next_op_id();
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..a.numel())
            .map(|i| if rng::uniform(seed, step, op, i as u64) >= rate { scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let req = self.wants_grad(&[a]);
        let out = Tensor::from_op(data, a.shape().to_vec(), req);
        if req {
            self.push(
                vec![a.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    vec![Some(g.iter().zip(&mask).map(|(x, m)| x * m).collect())]
                }),
            );
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    crow[j] += aik * brow[j];
                }
            }
        }
    }
    c
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}
