//! State predictive information bottleneck: a Gaussian encoder, a state
//! label decoder, and a variational mixture-of-posteriors prior built from
//! learned pseudo-inputs. Labels are refined during training by decoding
//! the encoder mean and re-assigning each frame to its argmax state.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{gaussian, join, Mlp2, Params};
use crate::tensor::{rng, Tape, Tensor};

const LOG_2PI: f64 = 1.8378770664093453;

impl Tape {
    /// Standard normal noise tensor: counter-keyed on training tapes,
    /// zeros in evaluation mode (deterministic latents).
    pub fn standard_normal(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = if self.is_training() {
            let (seed, step) = self.rng_key();
            let op = self.next_op_id();
            (0..n).map(|i| rng::normal(seed, step, op, i as u64)).collect()
        } else {
            vec![0.0; n]
        };
        Tensor::from_op(data, shape.to_vec(), false)
    }

    /// Log density of every sample under every diagonal Gaussian component:
    /// `z [B, D] x (mu, logvar) [P, D] -> [B, P]`.
    pub fn pairwise_gauss_logpdf(
        &self,
        z: &Tensor,
        mu: &Tensor,
        logvar: &Tensor,
    ) -> Result<Tensor> {
        let (b, d) = z.dims2()?;
        let (p, d2) = mu.dims2()?;
        if d2 != d || logvar.shape() != mu.shape() {
            return Err(Error::Dimension(format!(
                "pairwise_gauss_logpdf: z {:?}, mu {:?}, logvar {:?}",
                z.shape(),
                mu.shape(),
                logvar.shape()
            )));
        }
        let (zd, md, ld) = (z.data(), mu.data(), logvar.data());
        let mut out = vec![0.0; b * p];
        for bi in 0..b {
            for pi in 0..p {
                let mut s = 0.0;
                for di in 0..d {
                    let lv = ld[pi * d + di];
                    let r = zd[bi * d + di] - md[pi * d + di];
                    s += LOG_2PI + lv + r * r * (-lv).exp();
                }
                out[bi * p + pi] = -0.5 * s;
            }
        }
        let req = self.wants_grad(&[z, mu, logvar]);
        let out = Tensor::from_op(out, vec![b, p], req);
        if req {
            let (zc, mc, lc) = (z.clone(), mu.clone(), logvar.clone());
            self.push(
                vec![z.clone(), mu.clone(), logvar.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    let (zd, md, ld) = (zc.data(), mc.data(), lc.data());
                    let mut dz = vec![0.0; zd.len()];
                    let mut dm = vec![0.0; md.len()];
                    let mut dl = vec![0.0; ld.len()];
                    for bi in 0..b {
                        for pi in 0..p {
                            let gbp = g[bi * p + pi];
                            if gbp == 0.0 {
                                continue;
                            }
                            for di in 0..d {
                                let lv = ld[pi * d + di];
                                let iv = (-lv).exp();
                                let r = zd[bi * d + di] - md[pi * d + di];
                                dz[bi * d + di] -= gbp * r * iv;
                                dm[pi * d + di] += gbp * r * iv;
                                dl[pi * d + di] -= 0.5 * gbp * (1.0 - r * r * iv);
                            }
                        }
                    }
                    vec![Some(dz), Some(dm), Some(dl)]
                }),
            );
        }
        Ok(out)
    }
}

/// Loss value plus the scalar terms it was assembled from, for diagnostics
/// and the non-finite error path.
pub struct SpibLossParts {
    /// Negated SPIB objective, ready for minimization.
    pub loss: Tensor,
    /// `E[ln q(s_tau | z)]`.
    pub cross_entropy: f64,
    /// `E[ln p(z|x) - ln r(z)]`.
    pub kl: f64,
}

pub struct SpibNet {
    pub enc_mu: Mlp2,
    pub enc_logvar: Mlp2,
    pub dec: Mlp2,
    /// Learned pseudo-inputs `[P, d_in]` anchoring the mixture prior.
    pub pseudo: Tensor,
    pub d_in: usize,
    pub d_z: usize,
    /// Decoder output dimension; fixed at initialization.
    pub n_states: usize,
    pub beta: f64,
    /// Compact label -> decoder column. Refinement rewrites this map.
    pub active: Vec<usize>,
}

impl SpibNet {
    /// `pseudo_init`, when given, supplies `p` rows of `d_in` floats
    /// (typically random training features) for the pseudo-inputs.
    pub fn init(
        rng_: &mut ChaCha8Rng,
        d_in: usize,
        d_z: usize,
        n_states: usize,
        p: usize,
        beta: f64,
        pseudo_init: Option<&[f64]>,
    ) -> Result<SpibNet> {
        if beta < 0.0 {
            return Err(Error::Config(format!("beta {beta} must be >= 0")));
        }
        if p == 0 || n_states == 0 || d_z == 0 {
            return Err(Error::Config("SPIB needs P, n_states, d_z >= 1".into()));
        }
        let pseudo_data = match pseudo_init {
            Some(rows) => {
                if rows.len() != p * d_in {
                    return Err(Error::Config(format!(
                        "pseudo-input init has {} floats, need {}",
                        rows.len(),
                        p * d_in
                    )));
                }
                rows.to_vec()
            }
            None => (0..p * d_in).map(|_| gaussian(rng_) * 0.5).collect(),
        };
        let enc_mu = Mlp2::init(rng_, d_in, d_in.max(d_z), d_z);
        let mut enc_logvar = Mlp2::init(rng_, d_in, d_in.max(d_z), d_z);
        // start from a moderate posterior width (sigma ~ 0.8): narrow
        // enough for the decoder to separate latents, wide enough that the
        // mixture prior overlaps the posteriors and the KL stays tame
        enc_logvar.l2.bias = Some(Tensor::param(vec![-0.5; d_z], &[d_z])?);
        Ok(SpibNet {
            enc_mu,
            enc_logvar,
            dec: Mlp2::init(rng_, d_z, d_in.max(d_z), n_states),
            pseudo: Tensor::param(pseudo_data, &[p, d_in])?,
            d_in,
            d_z,
            n_states,
            beta,
            active: (0..n_states).collect(),
        })
    }

    pub fn n_pseudo(&self) -> usize {
        self.pseudo.shape()[0]
    }

    pub fn encode(&self, tape: &Tape, h: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.enc_mu.forward(tape, h)?, self.enc_logvar.forward(tape, h)?))
    }

    /// Decoder state probabilities at given latents, rows summing to one.
    pub fn decoder_probs(&self, tape: &Tape, z: &Tensor) -> Result<Tensor> {
        let logits = self.dec.forward(tape, z)?;
        tape.softmax_lastdim(&logits)
    }

    /// Negated SPIB objective for a batch of features `h [B, d_in]` with
    /// compact target labels (indices into `self.active`).
    pub fn loss(&self, tape: &Tape, h: &Tensor, labels: &[usize]) -> Result<SpibLossParts> {
        let (b, _) = h.dims2()?;
        if labels.len() != b {
            return Err(Error::Dimension(format!("{} labels for batch of {b}", labels.len())));
        }
        let decoder_cols: Vec<usize> = labels
            .iter()
            .map(|&l| {
                self.active.get(l).copied().ok_or_else(|| {
                    Error::Input(format!("label {l} outside the {} active states", self.active.len()))
                })
            })
            .collect::<Result<_>>()?;

        let (mu, logvar) = self.encode(tape, h)?;
        let eps = tape.standard_normal(&[b, self.d_z]);
        let sigma = tape.exp(&tape.mul_scalar(&logvar, 0.5));
        let z = tape.add(&mu, &tape.mul(&sigma, &eps)?)?;

        // ln p(z|x): diagonal Gaussian at the sampled latent
        let diff = tape.sub(&z, &mu)?;
        let sq = tape.mul(&diff, &diff)?;
        let inv_var = tape.exp(&tape.neg(&logvar));
        let quad = tape.mul(&sq, &inv_var)?;
        let inner = tape.add(&tape.add_scalar(&logvar, LOG_2PI), &quad)?;
        let log_post = tape.mul_scalar(&tape.sum_lastdim(&inner)?, -0.5);

        // ln r(z): uniform mixture over encoder posteriors at pseudo-inputs
        let (mu_p, logvar_p) = self.encode(tape, &self.pseudo)?;
        let comp = tape.pairwise_gauss_logpdf(&z, &mu_p, &logvar_p)?;
        let lse = tape.logsumexp_lastdim(&comp)?;
        let log_prior = tape.add_scalar(&lse, -(self.n_pseudo() as f64).ln());

        // E[ln q(s_tau | z)]
        let logits = self.dec.forward(tape, &z)?;
        let logp = tape.log_softmax_lastdim(&logits)?;
        let picked = tape.gather_lastdim(&logp, &decoder_cols)?;
        let ce = tape.mean_all(&picked)?;

        let kl = tape.mean_all(&tape.sub(&log_post, &log_prior)?)?;
        let objective = tape.sub(&ce, &tape.mul_scalar(&kl, self.beta))?;
        let loss = tape.neg(&objective);

        let parts = SpibLossParts { cross_entropy: ce.item(), kl: kl.item(), loss };
        if !parts.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "SPIB loss is not finite (cross_entropy={}, kl={})",
                parts.cross_entropy, parts.kl
            )));
        }
        Ok(parts)
    }

    /// Re-assign every frame to the decoder argmax at the encoder mean
    /// (no sampling), drop empty states, and compact indices. Updates the
    /// active-state map and returns the compact labels.
    pub fn refine_labels(&mut self, features: &[f64]) -> Result<Vec<usize>> {
        let n = features.len() / self.d_in;
        let mut raw = Vec::with_capacity(n);
        let chunk = 4096;
        let tape = Tape::eval();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let h = Tensor::from_vec(
                features[start * self.d_in..end * self.d_in].to_vec(),
                &[end - start, self.d_in],
            )?;
            let mu = self.enc_mu.forward(&tape, &h)?;
            let logits = self.dec.forward(&tape, &mu)?;
            let ld = logits.data();
            for r in 0..end - start {
                let row = &ld[r * self.n_states..(r + 1) * self.n_states];
                // ties break toward the lower state index
                let mut best = 0;
                for (s, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = s;
                    }
                }
                raw.push(best);
            }
            start = end;
        }
        let (labels, active) = compact_labels(&raw);
        self.active = active;
        Ok(labels)
    }
}

impl Params for SpibNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.enc_mu.visit_params(&join(prefix, "enc_mu"), f);
        self.enc_logvar.visit_params(&join(prefix, "enc_logvar"), f);
        self.dec.visit_params(&join(prefix, "dec"), f);
        f(join(prefix, "pseudo"), &mut self.pseudo);
    }
}

/// Remove empty states and compact indices: returns (compact labels,
/// sorted original state ids).
pub fn compact_labels(raw: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut active: Vec<usize> = raw.to_vec();
    active.sort_unstable();
    active.dedup();
    let labels = raw
        .iter()
        .map(|&r| active.binary_search(&r).expect("label present in active set"))
        .collect();
    (labels, active)
}

/// Fraction of frames whose label changed between refinements.
pub fn label_change_fraction(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
    changed as f64 / a.len() as f64
}
