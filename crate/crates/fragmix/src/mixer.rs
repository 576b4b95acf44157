//! Transformer token mixer over fragment tokens.
//!
//! Two attention paths compute the same values: a naive reference that
//! materializes the full M x M weight matrix (composed from tape
//! primitives, so its backward is plain autodiff) and an exact blockwise
//! path that streams key/value chunks with a running row max and
//! normalizer, never allocating more than O(block + M d) auxiliary floats.
//! The blockwise backward recomputes per-block weights from the saved
//! (m, l) row statistics.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Mlp2, Params};
use crate::tensor::alloc::TrackedVec;
use crate::tensor::ops::dot;
use crate::tensor::{rng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Naive,
    Blockwise { block: usize },
}

impl AttentionKind {
    pub fn parse(s: &str, block: usize) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Self::Naive),
            "blockwise" => {
                if block == 0 {
                    return Err(Error::Config("attention block size must be >= 1".into()));
                }
                Ok(Self::Blockwise { block })
            }
            other => Err(Error::Config(format!(
                "unknown attention path '{other}' (expected naive|blockwise)"
            ))),
        }
    }
}

/// Single-sequence exact attention, full weight matrix materialized.
/// This is the reference the blockwise path is checked against.
pub fn attention_naive(q: &[f64], k: &[f64], v: &[f64], m: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = TrackedVec::zeros(m * m);
    for i in 0..m {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut probs[i * m..(i + 1) * m];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for slot in row.iter_mut() {
            *slot = (*slot - mx).exp();
            sum += *slot;
        }
        for slot in row.iter_mut() {
            *slot /= sum;
        }
    }
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..m {
            let p = probs[i * m + j];
            let vr = &v[j * d..(j + 1) * d];
            for (o, vv) in orow.iter_mut().zip(vr) {
                *o += p * vv;
            }
        }
    }
    out
}

/// Per-element inverted-dropout multiplier for attention weights; the
/// stream key makes the mask identical between forward and backward.
#[derive(Clone, Copy)]
struct AttnDropout {
    seed: u64,
    step: u64,
    op: u64,
    rate: f64,
    m: usize,
}

impl AttnDropout {
    fn multiplier(&self, group: usize, i: usize, j: usize) -> f64 {
        let idx = ((group * self.m + i) * self.m + j) as u64;
        if rng::uniform(self.seed, self.step, self.op, idx) >= self.rate {
            1.0 / (1.0 - self.rate)
        } else {
            0.0
        }
    }
}

/// Streaming-softmax forward for one group. Fills `out` (m*d) and the
/// per-query running max `mrow` and normalizer `lrow`.
fn blockwise_group_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    m: usize,
    d: usize,
    block: usize,
    drop: Option<(AttnDropout, usize)>,
    out: &mut [f64],
    mrow: &mut [f64],
    lrow: &mut [f64],
) {
    let scale = 1.0 / (d as f64).sqrt();
    let block = block.max(1);
    let mut scores = TrackedVec::zeros(block);
    let mut acc = TrackedVec::zeros(d);
    for i in 0..m {
        let qi = &q[i * d..(i + 1) * d];
        let mut mi = f64::NEG_INFINITY;
        let mut li = 0.0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut j0 = 0;
        while j0 < m {
            let j1 = (j0 + block).min(m);
            let mut mb = f64::NEG_INFINITY;
            for j in j0..j1 {
                let s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                scores[j - j0] = s;
                mb = mb.max(s);
            }
            let mnew = mi.max(mb);
            let c_old = if mi == f64::NEG_INFINITY { 0.0 } else { (mi - mnew).exp() };
            li *= c_old;
            acc.iter_mut().for_each(|a| *a *= c_old);
            for j in j0..j1 {
                let p = (scores[j - j0] - mnew).exp();
                li += p;
                let pe = match drop {
                    Some((dk, g)) => p * dk.multiplier(g, i, j),
                    None => p,
                };
                if pe != 0.0 {
                    let vr = &v[j * d..(j + 1) * d];
                    for (a, vv) in acc.iter_mut().zip(vr) {
                        *a += pe * vv;
                    }
                }
            }
            mi = mnew;
            j0 = j1;
        }
        mrow[i] = mi;
        lrow[i] = li;
        for (o, a) in out[i * d..(i + 1) * d].iter_mut().zip(acc.iter()) {
            *o = a / li;
        }
    }
}

/// Single-sequence exact blockwise attention (no dropout). Identical value
/// to [`attention_naive`]; auxiliary memory O(block + m*d).
pub fn attention_blockwise(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    m: usize,
    d: usize,
    block: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    let mut mrow = TrackedVec::zeros(m);
    let mut lrow = TrackedVec::zeros(m);
    blockwise_group_forward(q, k, v, m, d, block, None, &mut out, &mut mrow, &mut lrow);
    out
}

/// Blockwise backward for one group, recomputing attention weights from the
/// saved (m, l) statistics. Accumulates into dq/dk/dv.
#[allow(clippy::too_many_arguments)]
fn blockwise_group_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    gout: &[f64],
    mrow: &[f64],
    lrow: &[f64],
    m: usize,
    d: usize,
    block: usize,
    drop: Option<(AttnDropout, usize)>,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let scale = 1.0 / (d as f64).sqrt();
    let block = block.max(1);
    // D_i = <gout_i, out_i>, the softmax-backward row correction.
    let mut dvec = TrackedVec::zeros(m);
    for i in 0..m {
        dvec[i] = dot(&gout[i * d..(i + 1) * d], &out[i * d..(i + 1) * d]);
    }
    let mut j0 = 0;
    while j0 < m {
        let j1 = (j0 + block).min(m);
        for i in 0..m {
            let qi = &q[i * d..(i + 1) * d];
            let gi = &gout[i * d..(i + 1) * d];
            let log_li = mrow[i] + lrow[i].ln();
            for j in j0..j1 {
                let kj = &k[j * d..(j + 1) * d];
                let s = dot(qi, kj) * scale;
                let p = (s - log_li).exp();
                let mm = match drop {
                    Some((dkey, g)) => dkey.multiplier(g, i, j),
                    None => 1.0,
                };
                let dp = dot(gi, &v[j * d..(j + 1) * d]) * mm;
                let ds = p * (dp - dvec[i]);
                if ds != 0.0 {
                    let dqi = &mut dq[i * d..(i + 1) * d];
                    for (a, b) in dqi.iter_mut().zip(kj) {
                        *a += ds * b * scale;
                    }
                    let dkj = &mut dk[j * d..(j + 1) * d];
                    for (a, b) in dkj.iter_mut().zip(qi) {
                        *a += ds * b * scale;
                    }
                }
                let pv = p * mm;
                if pv != 0.0 {
                    let dvj = &mut dv[j * d..(j + 1) * d];
                    for (a, b) in dvj.iter_mut().zip(gi) {
                        *a += pv * b;
                    }
                }
            }
        }
        j0 = j1;
    }
}

impl Tape {
    /// Exact blockwise multi-group attention `[G, M, d] -> [G, M, d]` with
    /// a custom streaming backward. Dropout (on attention weights) is
    /// applied only on training tapes.
    pub fn attention_blockwise_op(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        block: usize,
        dropout_rate: f64,
    ) -> Result<Tensor> {
        let (g, m, d) = check_qkv(q, k, v)?;
        if block == 0 {
            return Err(Error::Config("attention block size must be >= 1".into()));
        }
        let drop = self.attn_dropout(dropout_rate, m)?;
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![0.0; g * m * d];
        let mut mrows = TrackedVec::zeros(g * m);
        let mut lrows = TrackedVec::zeros(g * m);
        for gi in 0..g {
            let s = gi * m * d;
            blockwise_group_forward(
                &qd[s..s + m * d],
                &kd[s..s + m * d],
                &vd[s..s + m * d],
                m,
                d,
                block,
                drop.map(|dk| (dk, gi)),
                &mut out[s..s + m * d],
                &mut mrows[gi * m..(gi + 1) * m],
                &mut lrows[gi * m..(gi + 1) * m],
            );
        }
        let req = self.wants_grad(&[q, k, v]);
        let out = Tensor::from_op(out, vec![g, m, d], req);
        if req {
            let (qc, kc, vc, oc) = (q.clone(), k.clone(), v.clone(), out.clone());
            self.push(
                vec![q.clone(), k.clone(), v.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let gout = gs[0].as_ref().unwrap();
                    let (qd, kd, vd, od) = (qc.data(), kc.data(), vc.data(), oc.data());
                    let mut dq = vec![0.0; qd.len()];
                    let mut dk = vec![0.0; kd.len()];
                    let mut dv = vec![0.0; vd.len()];
                    for gi in 0..g {
                        let s = gi * m * d;
                        blockwise_group_backward(
                            &qd[s..s + m * d],
                            &kd[s..s + m * d],
                            &vd[s..s + m * d],
                            &od[s..s + m * d],
                            &gout[s..s + m * d],
                            &mrows[gi * m..(gi + 1) * m],
                            &lrows[gi * m..(gi + 1) * m],
                            m,
                            d,
                            block,
                            drop.map(|dkey| (dkey, gi)),
                            &mut dq[s..s + m * d],
                            &mut dk[s..s + m * d],
                            &mut dv[s..s + m * d],
                        );
                    }
                    vec![Some(dq), Some(dk), Some(dv)]
                }),
            );
        }
        Ok(out)
    }

    /// Naive multi-group attention composed from tape primitives, so its
    /// backward is ordinary autodiff. Optionally captures the per-group
    /// weight matrices (evaluation mode only).
    pub fn attention_naive_op(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        dropout_rate: f64,
        capture: bool,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        let (g, m, d) = check_qkv(q, k, v)?;
        if capture && self.is_training() {
            return Err(Error::Unsupported(
                "attention maps are captured only in evaluation mode".into(),
            ));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let q2 = self.reshape(q, &[g * m, d])?;
        let k2 = self.reshape(k, &[g * m, d])?;
        let v2 = self.reshape(v, &[g * m, d])?;
        let mut probs_cap = capture.then(|| Vec::with_capacity(g * m * m));
        let mut outs: Vec<Tensor> = Vec::with_capacity(g);
        for gi in 0..g {
            let rows: Vec<i64> = (0..m).map(|r| (gi * m + r) as i64).collect();
            let qg = self.gather_rows(&q2, &rows)?;
            let kg = self.gather_rows(&k2, &rows)?;
            let vg = self.gather_rows(&v2, &rows)?;
            let kt = self.transpose2d(&kg)?;
            let logits = self.mul_scalar(&self.matmul(&qg, &kt)?, scale);
            let p = self.softmax_lastdim(&logits)?;
            if let Some(cap) = probs_cap.as_mut() {
                cap.extend_from_slice(p.data());
            }
            let p = self.dropout(&p, dropout_rate)?;
            outs.push(self.matmul(&p, &vg)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let stacked = self.concat2d(&refs, 0)?;
        let out = self.reshape(&stacked, &[g, m, d])?;
        Ok((out, probs_cap))
    }

    /// Either attention path behind one call.
    pub fn attention(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        kind: AttentionKind,
        dropout_rate: f64,
        capture: bool,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        match kind {
            AttentionKind::Naive => self.attention_naive_op(q, k, v, dropout_rate, capture),
            AttentionKind::Blockwise { block } => {
                if capture {
                    return Err(Error::Unsupported(
                        "attention maps require the naive path; blockwise never materializes them"
                            .into(),
                    ));
                }
                Ok((self.attention_blockwise_op(q, k, v, block, dropout_rate)?, None))
            }
        }
    }

    fn attn_dropout(&self, rate: f64, m: usize) -> Result<Option<AttnDropout>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.is_training() || rate == 0.0 {
            return Ok(None);
        }
        let (seed, step) = self.rng_key();
        Ok(Some(AttnDropout { seed, step, op: self.next_op_id(), rate, m }))
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = q.dims3()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "attention: Q {:?}, K {:?}, V {:?} must agree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(dims)
}

/// Captured attention weights: batch means of the per-head M x M matrices
/// and of their logs (evaluation mode, naive path).
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub m: usize,
    /// `[layer][head * m * m]`, mean probability over the batch.
    pub mean_prob: Vec<Vec<f64>>,
    /// `[layer][head * m * m]`, mean log-weight over the batch.
    pub mean_log: Vec<Vec<f64>>,
    samples: usize,
}

impl AttentionMaps {
    fn new(layers: usize, heads: usize, m: usize) -> Self {
        AttentionMaps {
            layers,
            heads,
            m,
            mean_prob: vec![vec![0.0; heads * m * m]; layers],
            mean_log: vec![vec![0.0; heads * m * m]; layers],
            samples: 0,
        }
    }

    /// Accumulate one captured batch: probs is `[B*heads, M, M]`.
    fn accumulate(&mut self, layer: usize, probs: &[f64], batch: usize) {
        let mm = self.m * self.m;
        for b in 0..batch {
            for h in 0..self.heads {
                let src = &probs[(b * self.heads + h) * mm..(b * self.heads + h + 1) * mm];
                let dst_p = &mut self.mean_prob[layer][h * mm..(h + 1) * mm];
                let dst_l = &mut self.mean_log[layer][h * mm..(h + 1) * mm];
                for ((p, l), &x) in dst_p.iter_mut().zip(dst_l.iter_mut()).zip(src) {
                    *p += x;
                    *l += x.ln();
                }
            }
        }
        if layer == 0 {
            self.samples += batch;
        }
    }

    fn finalize(&mut self) {
        let n = self.samples.max(1) as f64;
        for l in 0..self.layers {
            self.mean_prob[l].iter_mut().for_each(|v| *v /= n);
            self.mean_log[l].iter_mut().for_each(|v| *v /= n);
        }
    }

    /// Merge already-finalized per-batch maps, weighting each batch by its
    /// sample count.
    pub fn merge(maps: Vec<AttentionMaps>) -> Option<AttentionMaps> {
        let total: usize = maps.iter().map(|m| m.samples).sum();
        let mut iter = maps.into_iter();
        let mut acc = iter.next()?;
        let w0 = acc.samples as f64 / total.max(1) as f64;
        for l in 0..acc.layers {
            acc.mean_prob[l].iter_mut().for_each(|v| *v *= w0);
            acc.mean_log[l].iter_mut().for_each(|v| *v *= w0);
        }
        for other in iter {
            let w = other.samples as f64 / total.max(1) as f64;
            for l in 0..acc.layers {
                for (a, b) in acc.mean_prob[l].iter_mut().zip(&other.mean_prob[l]) {
                    *a += w * b;
                }
                for (a, b) in acc.mean_log[l].iter_mut().zip(&other.mean_log[l]) {
                    *a += w * b;
                }
            }
        }
        acc.samples = total;
        Some(acc)
    }

    /// CSV rows: layer, head, query_fragment, key_fragment, mean_log_weight.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,query_fragment,key_fragment,mean_log_weight\n");
        for l in 0..self.layers {
            for h in 0..self.heads {
                for qf in 0..self.m {
                    for kf in 0..self.m {
                        let v = self.mean_log[l][h * self.m * self.m + qf * self.m + kf];
                        out.push_str(&format!("{l},{h},{qf},{kf},{v:.12e}\n"));
                    }
                }
            }
        }
        out
    }
}

/// One pre-layernorm transformer block.
pub struct MixerBlock {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln1: Tensor,
    ln2: Tensor,
    ffn: Mlp2,
}

impl MixerBlock {
    fn init(rng: &mut ChaCha8Rng, h: usize, ffn_dim: usize) -> MixerBlock {
        let proj = |rng: &mut ChaCha8Rng| {
            let std = (1.0 / h as f64).sqrt();
            let w: Vec<f64> = (0..h * h).map(|_| crate::nn::gaussian(rng) * std).collect();
            Tensor::param(w, &[h, h]).unwrap()
        };
        MixerBlock {
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            wo: proj(rng),
            ln1: Tensor::param(vec![1.0; h], &[h]).unwrap(),
            ln2: Tensor::param(vec![1.0; h], &[h]).unwrap(),
            ffn: Mlp2::init(rng, h, ffn_dim, h),
        }
    }
}

impl Params for MixerBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        f(join(prefix, "wo"), &mut self.wo);
        f(join(prefix, "ln1"), &mut self.ln1);
        f(join(prefix, "ln2"), &mut self.ln2);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }
}

/// Stack of transformer blocks plus the attention configuration.
pub struct MixerNet {
    pub blocks: Vec<MixerBlock>,
    pub heads: usize,
    pub hidden: usize,
    pub kind: AttentionKind,
    pub dropout: f64,
}

impl MixerNet {
    pub fn init(
        rng: &mut ChaCha8Rng,
        hidden: usize,
        heads: usize,
        layers: usize,
        ffn_dim: usize,
        dropout: f64,
        kind: AttentionKind,
    ) -> Result<MixerNet> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {hidden} must be divisible by {heads} heads"
            )));
        }
        Ok(MixerNet {
            blocks: (0..layers).map(|_| MixerBlock::init(rng, hidden, ffn_dim)).collect(),
            heads,
            hidden,
            kind,
            dropout,
        })
    }

    /// Token-level output `[B, M, H]`; maps captured only when requested
    /// (naive path, evaluation mode).
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionMaps>)> {
        let (b, m, h) = x.dims3()?;
        if h != self.hidden {
            return Err(Error::Dimension(format!(
                "mixer hidden {} but input has {h} channels",
                self.hidden
            )));
        }
        let mut maps = capture.then(|| AttentionMaps::new(self.blocks.len(), self.heads, m));
        let mut x2 = tape.reshape(x, &[b * m, h])?;
        for (li, blk) in self.blocks.iter().enumerate() {
            let normed = tape.layernorm(&x2, &blk.ln1)?;
            let q = tape.matmul(&normed, &blk.wq)?;
            let k = tape.matmul(&normed, &blk.wk)?;
            let v = tape.matmul(&normed, &blk.wv)?;
            let to_heads = |t: &Tensor| -> Result<Tensor> {
                let t3 = tape.reshape(t, &[b, m, h])?;
                tape.split_heads(&t3, self.heads)
            };
            let (attn, probs) = tape.attention(
                &to_heads(&q)?,
                &to_heads(&k)?,
                &to_heads(&v)?,
                self.kind,
                self.dropout,
                capture,
            )?;
            if let (Some(maps), Some(probs)) = (maps.as_mut(), probs) {
                maps.accumulate(li, &probs, b);
            }
            let merged = tape.merge_heads(&attn, self.heads)?;
            let merged = tape.reshape(&merged, &[b * m, h])?;
            let o = tape.matmul(&merged, &blk.wo)?;
            x2 = tape.add(&x2, &o)?;

            let normed2 = tape.layernorm(&x2, &blk.ln2)?;
            let f = blk.ffn.forward_dropout(tape, &normed2, self.dropout)?;
            x2 = tape.add(&x2, &f)?;
        }
        if let Some(maps) = maps.as_mut() {
            maps.finalize();
        }
        Ok((tape.reshape(&x2, &[b, m, h])?, maps))
    }

    /// Mean-pool fragments to one vector per sample: `[B, M, H] -> [B, H]`.
    pub fn pool(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.mean_axis1(x)
    }
}

impl Params for MixerNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::tensor::ops::sigmoid_scalar;
    use crate::tensor::{finite_difference_grad, max_rel_err};
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_token_returns_value() {
        let out = attention_naive(&[0.3, -0.7], &[1.0, 2.0], &[5.0, -1.0], 1, 2);
        assert_eq!(out, vec![5.0, -1.0]);
    }

    #[test]
    fn zero_queries_average_values() {
        let m = 4;
        let d = 2;
        let q = vec![0.0; m * d];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = rand_vec(&mut rng, m * d);
        let v = rand_vec(&mut rng, m * d);
        let out = attention_naive(&q, &k, &v, m, d);
        for i in 0..m {
            for c in 0..d {
                let mean: f64 = (0..m).map(|j| v[j * d + c]).sum::<f64>() / m as f64;
                assert!((out[i * d + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_softmax_case_d1() {
        // q = k = v = [1, 2]: o_0 = 1 + sigmoid(1), o_1 = 1 + sigmoid(2)
        let out = attention_naive(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 2, 1);
        assert!((out[0] - (1.0 + sigmoid_scalar(1.0))).abs() < 1e-12);
        assert!((out[1] - (1.0 + sigmoid_scalar(2.0))).abs() < 1e-12);
    }

    #[test]
    fn single_block_matches_naive_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, d) = (17, 5);
        let q = rand_vec(&mut rng, m * d);
        let k = rand_vec(&mut rng, m * d);
        let v = rand_vec(&mut rng, m * d);
        let naive = attention_naive(&q, &k, &v, m, d);
        let blocked = attention_blockwise(&q, &k, &v, m, d, m + 10);
        for (a, b) in naive.iter().zip(&blocked) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blockwise_matches_naive_m257() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, d) = (257, 16);
        let q = rand_vec(&mut rng, m * d);
        let k = rand_vec(&mut rng, m * d);
        let v = rand_vec(&mut rng, m * d);
        let naive = attention_naive(&q, &k, &v, m, d);
        let blocked = attention_blockwise(&q, &k, &v, m, d, 32);
        let max_dev = naive
            .iter()
            .zip(&blocked)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-10, "max deviation {max_dev}");
    }

    #[test]
    fn blockwise_backward_matches_naive_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, m, d) = (2, 64, 8);
        let q = rand_vec(&mut rng, g * m * d);
        let k = rand_vec(&mut rng, g * m * d);
        let v = rand_vec(&mut rng, g * m * d);
        let w = rand_vec(&mut rng, g * m * d);

        let run = |blockwise: bool| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let tape = Tape::recording();
            let qt = Tensor::param(q.clone(), &[g, m, d]).unwrap();
            let kt = Tensor::param(k.clone(), &[g, m, d]).unwrap();
            let vt = Tensor::param(v.clone(), &[g, m, d]).unwrap();
            let kind = if blockwise {
                AttentionKind::Blockwise { block: 16 }
            } else {
                AttentionKind::Naive
            };
            let (out, _) = tape.attention(&qt, &kt, &vt, kind, 0.0, false).unwrap();
            let wt = Tensor::from_vec(w.clone(), &[g, m, d]).unwrap();
            let prod = tape.mul(&out, &wt).unwrap();
            let loss = tape.sum_all(&prod).unwrap();
            tape.backward(&loss).unwrap();
            (qt.grad().unwrap(), kt.grad().unwrap(), vt.grad().unwrap())
        };
        let (bq, bk, bv) = run(true);
        let (nq, nk, nv) = run(false);
        assert!(max_rel_err(&bq, &nq) < 1e-8, "dq err {}", max_rel_err(&bq, &nq));
        assert!(max_rel_err(&bk, &nk) < 1e-8, "dk err {}", max_rel_err(&bk, &nk));
        assert!(max_rel_err(&bv, &nv) < 1e-8, "dv err {}", max_rel_err(&bv, &nv));
    }

    #[test]
    fn blockwise_with_dropout_matches_finite_differences() {
        // dropout masks depend on indices, not values, so fd is well posed
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, m, d) = (1, 6, 3);
        let q = rand_vec(&mut rng, g * m * d);
        let k = rand_vec(&mut rng, g * m * d);
        let v = rand_vec(&mut rng, g * m * d);
        let loss_of = |qd: &[f64]| {
            let tape = Tape::training(42, 7);
            let qt = Tensor::param(qd.to_vec(), &[g, m, d]).unwrap();
            let kt = Tensor::from_vec(k.clone(), &[g, m, d]).unwrap();
            let vt = Tensor::from_vec(v.clone(), &[g, m, d]).unwrap();
            let out = tape.attention_blockwise_op(&qt, &kt, &vt, 4, 0.3).unwrap();
            let sq = tape.mul(&out, &out).unwrap();
            let loss = tape.sum_all(&sq).unwrap();
            (tape, qt, loss)
        };
        let (tape, qt, loss) = loss_of(&q);
        tape.backward(&loss).unwrap();
        let analytic = qt.grad().unwrap();
        let numeric = finite_difference_grad(
            |x| {
                let (_t, _q, l) = loss_of(x);
                l.item()
            },
            &q,
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn capture_requires_naive_eval() {
        let q = Tensor::zeros(&[1, 2, 2]);
        let tape = Tape::eval();
        let err = tape
            .attention(&q, &q, &q, AttentionKind::Blockwise { block: 8 }, 0.0, true)
            .unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
        let train = Tape::training(0, 0);
        let err = train
            .attention(&q, &q, &q, AttentionKind::Naive, 0.0, true)
            .unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    fn tiny_mixer(kind: AttentionKind, layers: usize) -> MixerNet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        MixerNet::init(&mut rng, 8, 2, layers, 16, 0.0, kind).unwrap()
    }

    #[test]
    fn zeroed_output_projections_reduce_to_pooled_input() {
        let mut net = tiny_mixer(AttentionKind::Naive, 2);
        for blk in net.blocks.iter_mut() {
            blk.wo = Tensor::param(vec![0.0; 64], &[8, 8]).unwrap();
            blk.ffn.l2 = Linear {
                weight: Tensor::param(vec![0.0; 16 * 8], &[16, 8]).unwrap(),
                bias: Some(Tensor::param(vec![0.0; 8], &[8]).unwrap()),
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_vec(&mut rng, 2 * 3 * 8);
        let xt = Tensor::from_vec(x.clone(), &[2, 3, 8]).unwrap();
        let tape = Tape::eval();
        let (y, _) = net.forward(&tape, &xt, false).unwrap();
        assert_eq!(y.to_vec(), x, "blocks with zero projections must be identity");
        let pooled = net.pool(&tape, &y).unwrap();
        for b in 0..2 {
            for c in 0..8 {
                let mean: f64 = (0..3).map(|m| x[b * 24 + m * 8 + c]).sum::<f64>() / 3.0;
                assert!((pooled.data()[b * 8 + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pooled_output_invariant_to_fragment_permutation() {
        let net = tiny_mixer(AttentionKind::Naive, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = 5;
        let x = rand_vec(&mut rng, m * 8);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = vec![0.0; m * 8];
        for (to, &from) in perm.iter().enumerate() {
            xp[to * 8..(to + 1) * 8].copy_from_slice(&x[from * 8..(from + 1) * 8]);
        }
        let tape = Tape::eval();
        let run = |data: Vec<f64>| {
            let t = Tensor::from_vec(data, &[1, m, 8]).unwrap();
            let (y, _) = net.forward(&tape, &t, false).unwrap();
            net.pool(&tape, &y).unwrap().to_vec()
        };
        let a = run(x);
        let b = run(xp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_maps_rows_sum_to_one_and_logs_finite() {
        let net = tiny_mixer(AttentionKind::Naive, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::from_vec(rand_vec(&mut rng, 4 * 6 * 8), &[4, 6, 8]).unwrap();
        let tape = Tape::eval();
        let (_, maps) = net.forward(&tape, &x, true).unwrap();
        let maps = maps.unwrap();
        assert_eq!(maps.layers, 3);
        for l in 0..maps.layers {
            for h in 0..maps.heads {
                for q in 0..maps.m {
                    let row =
                        &maps.mean_prob[l][h * maps.m * maps.m + q * maps.m..][..maps.m];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-8, "row sum {sum}");
                }
            }
            assert!(maps.mean_log[l].iter().all(|v| v.is_finite()));
        }
        let csv = maps.to_csv();
        assert!(csv.starts_with("layer,head,query_fragment,key_fragment,mean_log_weight"));
        assert_eq!(csv.lines().count(), 1 + 3 * 2 * 6 * 6);
    }

    #[test]
    fn merged_maps_weight_batches_by_sample_count() {
        let net = tiny_mixer(AttentionKind::Naive, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let all = rand_vec(&mut rng, 6 * 4 * 8);
        let tape = Tape::eval();
        // one pass over all six samples
        let x = Tensor::from_vec(all.clone(), &[6, 4, 8]).unwrap();
        let (_, maps_all) = net.forward(&tape, &x, true).unwrap();
        // versus merging a 4-sample and a 2-sample batch
        let a = Tensor::from_vec(all[..4 * 32].to_vec(), &[4, 4, 8]).unwrap();
        let b = Tensor::from_vec(all[4 * 32..].to_vec(), &[2, 4, 8]).unwrap();
        let (_, ma) = net.forward(&tape, &a, true).unwrap();
        let (_, mb) = net.forward(&tape, &b, true).unwrap();
        let merged = AttentionMaps::merge(vec![ma.unwrap(), mb.unwrap()]).unwrap();
        let whole = maps_all.unwrap();
        for (x, y) in whole.mean_log[0].iter().zip(&merged.mean_log[0]) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn three_layer_gradient_check_m36_h64() {
        // finite differences on a coordinate subset keep this affordable
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = {
            let mut r = ChaCha8Rng::seed_from_u64(16);
            MixerNet::init(&mut r, 64, 4, 3, 128, 0.0, AttentionKind::Blockwise { block: 16 })
                .unwrap()
        };
        let n = 36 * 64;
        let x = rand_vec(&mut rng, n);
        let w = rand_vec(&mut rng, 64);
        let loss_of = |data: &[f64]| -> f64 {
            let tape = Tape::recording();
            let t = Tensor::from_vec(data.to_vec(), &[1, 36, 64]).unwrap();
            let (y, _) = net.forward(&tape, &t, false).unwrap();
            let pooled = net.pool(&tape, &y).unwrap();
            let wt = Tensor::from_vec(w.clone(), &[64]).unwrap();
            let prod = tape.mul(&pooled, &wt).unwrap();
            tape.sum_all(&prod).unwrap().item()
        };
        let tape = Tape::recording();
        let t = Tensor::param(x.clone(), &[1, 36, 64]).unwrap();
        let (y, _) = net.forward(&tape, &t, false).unwrap();
        let pooled = net.pool(&tape, &y).unwrap();
        let wt = Tensor::from_vec(w.clone(), &[64]).unwrap();
        let prod = tape.mul(&pooled, &wt).unwrap();
        let loss = tape.sum_all(&prod).unwrap();
        tape.backward(&loss).unwrap();
        let analytic = t.grad().unwrap();

        let mut pick = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let i = pick.gen_range(0..n);
            let h = 1e-5;
            let mut xp = x.clone();
            xp[i] += h;
            let fp = loss_of(&xp);
            xp[i] -= 2.0 * h;
            let fm = loss_of(&xp);
            let num = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {i}: analytic {} vs fd {num}", analytic[i]);
        }
    }
}
