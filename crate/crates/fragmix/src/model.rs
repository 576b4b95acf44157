//! Model assembly: residue tokens through the token-merging module and the
//! transformer mixer to a pooled embedding, with a VAMP head or SPIB model
//! on top, wired into the training loop as tasks.

use crate::error::{Error, Result};
use crate::geometry::{radius_graph, RadiusGraph};
use crate::mixer::{AttentionMaps, MixerNet};
use crate::nn::Params;
use crate::objectives::spib::{compact_labels, SpibNet};
use crate::objectives::vamp::{vamp2_from_covariances, vamp2_score, CovAccumulator, VampHead};
use crate::pipeline::dataset::LoadedDataset;
use crate::pipeline::split::PairIndex;
use crate::pipeline::train::TrainTask;
use crate::tensor::{Tape, Tensor};
use crate::tmm::TmmNet;

/// Embedding trunk. `Full` is the whole pipeline (graph conv, windowed
/// merge, positional encoding, transformer, mean pool); `HeadOnly` pools
/// raw tokens, for token-level fixtures without geometry.
pub enum Trunk {
    Full { tmm: TmmNet, mixer: MixerNet },
    HeadOnly,
}

pub struct DynModel {
    pub trunk: Trunk,
    /// Output dimension of [`DynModel::embed`].
    pub embed_dim: usize,
    pub cutoff: f64,
}

impl DynModel {
    /// Pooled embedding of a token batch. `anchors` carries one flat
    /// `[N * 3]` coordinate slice per batch frame when the trunk needs
    /// radius graphs.
    pub fn embed(
        &self,
        tape: &Tape,
        tokens: &Tensor,
        anchors: Option<&[&[f64]]>,
        ligand_mask: &[bool],
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionMaps>)> {
        match &self.trunk {
            Trunk::HeadOnly => Ok((tape.mean_axis1(tokens)?, None)),
            Trunk::Full { tmm, mixer } => {
                let anchors = anchors.ok_or_else(|| {
                    Error::Config(
                        "full architecture needs residue positions to build radius graphs \
                         (dataset provides tokens only)"
                            .into(),
                    )
                })?;
                let graphs: Vec<RadiusGraph> = anchors
                    .iter()
                    .map(|a| radius_graph(a, self.cutoff))
                    .collect::<Result<_>>()?;
                let refs: Vec<&RadiusGraph> = graphs.iter().collect();
                let merged = tmm.forward(tape, tokens, &refs, ligand_mask)?;
                let (mixed, maps) = mixer.forward(tape, &merged, capture)?;
                Ok((mixer.pool(tape, &mixed)?, maps))
            }
        }
    }

    /// Evaluation-mode embeddings of every frame, trajectory-major, as a
    /// flat `[total_frames * embed_dim]` buffer.
    pub fn embed_all(&self, data: &LoadedDataset, chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.total_frames() * self.embed_dim);
        for traj in 0..data.trajs.len() {
            let frames = data.trajs[traj].n_frames;
            let mut start = 0;
            while start < frames {
                let end = (start + chunk).min(frames);
                let idx: Vec<PairIndex> =
                    (start..end).map(|t| PairIndex { traj, t }).collect();
                let tape = Tape::eval();
                let (tokens, anchors) = gather_batch(data, &idx, 0)?;
                let anchor_refs: Option<Vec<&[f64]>> =
                    anchors.as_ref().map(|a| a.iter().map(|v| v.as_slice()).collect());
                let (emb, _) = self.embed(
                    &tape,
                    &tokens,
                    anchor_refs.as_deref(),
                    &data.ligand_mask,
                    false,
                )?;
                out.extend_from_slice(emb.data());
                start = end;
            }
        }
        Ok(out)
    }
}

impl Params for DynModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Trunk::Full { tmm, mixer } = &mut self.trunk {
            tmm.visit_params(&crate::nn::join(prefix, "tmm"), f);
            mixer.visit_params(&crate::nn::join(prefix, "mixer"), f);
        }
    }
}

/// Tokens (and anchor slices, when present) for the frames `t + offset` of
/// the given pairs.
pub fn gather_batch(
    data: &LoadedDataset,
    pairs: &[PairIndex],
    offset: usize,
) -> Result<(Tensor, Option<Vec<Vec<f64>>>)> {
    let b = pairs.len();
    let (n, h) = (data.n_residues, data.token_dim);
    let mut tokens = Vec::with_capacity(b * n * h);
    let mut anchors: Option<Vec<Vec<f64>>> = data.has_anchors().then(Vec::new);
    for p in pairs {
        tokens.extend_from_slice(data.token_frame(p.traj, p.t + offset));
        if let Some(list) = anchors.as_mut() {
            list.push(data.anchor_frame(p.traj, p.t + offset).unwrap().to_vec());
        }
    }
    Ok((Tensor::from_vec(tokens, &[b, n, h])?, anchors))
}

// ---------------------------------------------------------------------------
// VAMP training task
// ---------------------------------------------------------------------------

pub struct VampTask<'a> {
    pub model: DynModel,
    pub head: VampHead,
    pub data: &'a LoadedDataset,
    pub lag: usize,
    pub eps: f64,
    pub val_pairs: Vec<PairIndex>,
    pub val_chunk: usize,
}

impl VampTask<'_> {
    fn features(&self, tape: &Tape, pairs: &[PairIndex], offset: usize) -> Result<Tensor> {
        let (tokens, anchors) = gather_batch(self.data, pairs, offset)?;
        let anchor_refs: Option<Vec<&[f64]>> =
            anchors.as_ref().map(|a| a.iter().map(|v| v.as_slice()).collect());
        let (emb, _) =
            self.model
                .embed(tape, &tokens, anchor_refs.as_deref(), &self.data.ligand_mask, false)?;
        self.head.forward(tape, &emb)
    }

    /// Deterministic VAMP-2 score over a pair set, accumulating covariances
    /// in chunks so validation never materializes giant batches.
    pub fn score_pairs(&self, pairs: &[PairIndex]) -> Result<f64> {
        self.accumulate(pairs)?.score(self.eps)
    }

    fn accumulate(&self, pairs: &[PairIndex]) -> Result<CovAccumulator> {
        if pairs.is_empty() {
            return Err(Error::Input("no pairs to score".into()));
        }
        let mut acc = CovAccumulator::new(self.head.out_dim);
        for chunk in pairs.chunks(self.val_chunk.max(1)) {
            let tape = Tape::eval();
            let f0 = self.features(&tape, chunk, 0)?;
            let ft = self.features(&tape, chunk, self.lag)?;
            acc.add(f0.data(), ft.data());
        }
        Ok(acc)
    }

    /// Slowest estimated singular coordinates of every frame: covariances
    /// over `pairs` fix the whitening, chi features of all frames are
    /// projected onto the top `r` singular functions.
    pub fn slow_coordinates(&self, pairs: &[PairIndex], r: usize) -> Result<Vec<f64>> {
        let proj = self.accumulate(pairs)?.singular_projection(self.eps, r)?;
        let emb = self.model.embed_all(self.data, 2048)?;
        let total = self.data.total_frames();
        let tape = Tape::eval();
        let h = Tensor::from_vec(emb, &[total, self.model.embed_dim])?;
        let chi = self.head.forward(&tape, &h)?;
        Ok(proj.apply(chi.data()))
    }
}

impl TrainTask for VampTask<'_> {
    fn train_loss(&mut self, tape: &Tape, batch: &[PairIndex]) -> Result<Tensor> {
        let f0 = self.features(tape, batch, 0)?;
        let ft = self.features(tape, batch, self.lag)?;
        let score = vamp2_score(tape, &f0, &ft, self.eps)?;
        Ok(tape.neg(&score))
    }

    fn validation_score(&mut self) -> Result<f64> {
        self.score_pairs(&self.val_pairs.clone())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.model.visit_params("model", f);
        self.head.visit_params("vamp", f);
    }
}

/// Exact-expectation VAMP-2 of the two-state-chain fixture, the oracle the
/// trained fixture score is compared against.
pub fn chain2_exact_score(stay: f64, eps: f64) -> Result<f64> {
    let (c00, c0t, ctt) = crate::objectives::vamp::two_state_chain_covariances(stay);
    let tape = Tape::eval();
    Ok(vamp2_from_covariances(&tape, &c00, &c0t, &ctt, eps)?.item())
}

// ---------------------------------------------------------------------------
// SPIB training task with periodic label refinement
// ---------------------------------------------------------------------------

pub struct SpibTask<'a> {
    pub model: DynModel,
    pub spib: SpibNet,
    pub data: &'a LoadedDataset,
    pub lag: usize,
    /// Compact labels per trajectory frame (indices into `spib.active`).
    pub labels: Vec<Vec<usize>>,
    pub val_pairs: Vec<PairIndex>,
    pub val_chunk: usize,
    pub refine_every: usize,
    pub max_refines: usize,
    pub refine_tol: f64,
    pub refines_done: usize,
    pub converged: bool,
    /// Change fraction per refinement, for logs.
    pub refine_history: Vec<f64>,
    pub embed_chunk: usize,
}

impl SpibTask<'_> {
    fn batch_loss(&self, tape: &Tape, batch: &[PairIndex]) -> Result<Tensor> {
        let (tokens, anchors) = gather_batch(self.data, batch, 0)?;
        let anchor_refs: Option<Vec<&[f64]>> =
            anchors.as_ref().map(|a| a.iter().map(|v| v.as_slice()).collect());
        let (emb, _) =
            self.model
                .embed(tape, &tokens, anchor_refs.as_deref(), &self.data.ligand_mask, false)?;
        let targets: Vec<usize> =
            batch.iter().map(|p| self.labels[p.traj][p.t + self.lag]).collect();
        Ok(self.spib.loss(tape, &emb, &targets)?.loss)
    }

    /// Decoder-space labels of all frames under the current active map.
    fn decoder_labels(&self) -> Vec<Vec<usize>> {
        self.labels
            .iter()
            .map(|traj| traj.iter().map(|&l| self.spib.active[l]).collect())
            .collect()
    }

    /// Refine labels over the whole dataset; returns the change fraction
    /// measured in decoder space.
    pub fn refine(&mut self) -> Result<f64> {
        let feats = self.model.embed_all(self.data, self.embed_chunk)?;
        let before = self.decoder_labels();
        let flat = self.spib.refine_labels(&feats)?;
        // split flat labels back into trajectories
        let mut labels = Vec::with_capacity(self.data.trajs.len());
        let mut cursor = 0;
        for traj in &self.data.trajs {
            labels.push(flat[cursor..cursor + traj.n_frames].to_vec());
            cursor += traj.n_frames;
        }
        self.labels = labels;
        let after = self.decoder_labels();
        let total: usize = before.iter().map(Vec::len).sum();
        let changed: usize = before
            .iter()
            .zip(&after)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum();
        Ok(changed as f64 / total.max(1) as f64)
    }
}

impl TrainTask for SpibTask<'_> {
    fn train_loss(&mut self, tape: &Tape, batch: &[PairIndex]) -> Result<Tensor> {
        self.batch_loss(tape, batch)
    }

    fn validation_score(&mut self) -> Result<f64> {
        // deterministic: evaluation tape uses the encoder mean as latent
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in self.val_pairs.clone().chunks(self.val_chunk.max(1)) {
            let tape = Tape::eval();
            let loss = self.batch_loss(&tape, chunk)?;
            total += loss.item() * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(-total / count.max(1) as f64)
    }

    fn on_epoch_end(&mut self, epoch: usize) -> Result<bool> {
        if self.converged
            || self.refines_done >= self.max_refines
            || (epoch + 1) % self.refine_every != 0
        {
            return Ok(false);
        }
        let change = self.refine()?;
        self.refines_done += 1;
        self.refine_history.push(change);
        if change < self.refine_tol {
            self.converged = true;
        }
        Ok(self.converged)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.model.visit_params("model", f);
        self.spib.visit_params("spib", f);
    }
}

// ---------------------------------------------------------------------------
// Config-driven construction
// ---------------------------------------------------------------------------

/// Build the embedding trunk described by a run configuration.
/// `tag` decorrelates initializations of independently built models under
/// one seed; `attention` overrides the configured path (the attention-map
/// exporter forces the naive path).
pub fn build_dyn_model(
    cfg: &crate::config::RunConfig,
    token_dim: usize,
    tag: u64,
    attention: Option<crate::mixer::AttentionKind>,
) -> Result<DynModel> {
    use rand::SeedableRng;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(crate::tensor::rng::key(cfg.seed, tag, 3, 0));
    match cfg.arch.as_str() {
        "head" => Ok(DynModel { trunk: Trunk::HeadOnly, embed_dim: token_dim, cutoff: cfg.cutoff }),
        "full" => {
            if token_dim != cfg.hidden {
                return Err(Error::Config(format!(
                    "dataset tokens have {token_dim} channels but model.hidden = {}",
                    cfg.hidden
                )));
            }
            let tmm = TmmNet::init(&mut rng, cfg.operator_kind()?, cfg.window, cfg.hidden)?;
            let mixer = MixerNet::init(
                &mut rng,
                cfg.hidden,
                cfg.heads,
                cfg.layers,
                cfg.ffn_dim_effective(),
                cfg.dropout,
                attention.map_or_else(|| cfg.attention_kind(), Ok)?,
            )?;
            Ok(DynModel {
                trunk: Trunk::Full { tmm, mixer },
                embed_dim: cfg.hidden,
                cutoff: cfg.cutoff,
            })
        }
        other => Err(Error::Config(format!("model.arch '{other}' (expected full|head)"))),
    }
}

/// VAMP task over a loaded dataset (trunk + chi head per the config).
pub fn build_vamp_task<'a>(
    cfg: &crate::config::RunConfig,
    data: &'a LoadedDataset,
    lag: usize,
    val_pairs: Vec<PairIndex>,
) -> Result<VampTask<'a>> {
    use rand::SeedableRng;
    let model = build_dyn_model(cfg, data.token_dim, 0, None)?;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(crate::tensor::rng::key(cfg.seed, 0, 4, 0));
    let head = VampHead::init(&mut rng, model.embed_dim, cfg.hidden, cfg.vamp_dim);
    Ok(VampTask {
        model,
        head,
        data,
        lag,
        eps: cfg.eps,
        val_pairs,
        val_chunk: cfg.batch.min(2048),
    })
}

/// SPIB task: fresh trunk, encoder/decoder sized by the config, labels from
/// k-means on the supplied coordinates, pseudo-inputs sampled from the
/// embedded frames.
pub fn build_spib_task<'a>(
    cfg: &crate::config::RunConfig,
    data: &'a LoadedDataset,
    lag: usize,
    val_pairs: Vec<PairIndex>,
    vamp_coords: &[f64],
    coord_dim: usize,
) -> Result<(SpibTask<'a>, bool)> {
    use rand::{Rng, SeedableRng};
    let model = build_dyn_model(cfg, data.token_dim, 1, None)?;
    let total = data.total_frames();
    let (labels, n_states, reduced) = initial_labels_from_kmeans(
        vamp_coords,
        total,
        coord_dim,
        cfg.spib_states,
        crate::tensor::rng::key(cfg.seed, 1, 5, 0),
        &data.lengths(),
    )?;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(crate::tensor::rng::key(cfg.seed, 1, 4, 0));
    // pseudo-inputs: random embedded frames
    let embeds = model.embed_all(data, cfg.batch.min(2048))?;
    let d = model.embed_dim;
    let pseudo: Vec<f64> = (0..cfg.spib_pseudo)
        .flat_map(|_| {
            let f = rng.gen_range(0..total);
            embeds[f * d..(f + 1) * d].to_vec()
        })
        .collect();
    let spib = SpibNet::init(
        &mut rng,
        d,
        cfg.spib_latent,
        n_states,
        cfg.spib_pseudo,
        cfg.spib_beta,
        Some(&pseudo),
    )?;
    Ok((
        SpibTask {
            model,
            spib,
            data,
            lag,
            labels,
            val_pairs,
            val_chunk: cfg.batch.min(2048),
            refine_every: cfg.spib_refine_every,
            max_refines: cfg.spib_max_refines,
            refine_tol: cfg.spib_refine_tol,
            refines_done: 0,
            converged: false,
            refine_history: Vec::new(),
            embed_chunk: cfg.batch.min(2048),
        },
        reduced,
    ))
}

/// Initial SPIB labels: k-means on VAMP-learned coordinates, compacted so
/// cluster ids form the decoder's state space.
pub fn initial_labels_from_kmeans(
    coords: &[f64],
    n_frames: usize,
    dim: usize,
    k: usize,
    seed: u64,
    lengths: &[usize],
) -> Result<(Vec<Vec<usize>>, usize, bool)> {
    let km = crate::objectives::kmeans(coords, n_frames, dim, k, seed)?;
    let (compact, active) = compact_labels(&km.assignments);
    let mut labels = Vec::with_capacity(lengths.len());
    let mut cursor = 0;
    for &len in lengths {
        labels.push(compact[cursor..cursor + len].to_vec());
        cursor += len;
    }
    Ok((labels, active.len(), km.was_reduced()))
}
