//! Residue geometry: radius graphs over anchor atoms and a deterministic
//! rotation/translation-invariant residue featurizer.
//!
//! The featurizer stands in for an offline pretrained network: per residue
//! it collects sorted anchor-anchor neighbor distances, local density
//! counts, the intra-residue atom count, and the residue radius of
//! gyration, then projects the descriptor to `H` dimensions with a fixed
//! seeded orthonormal matrix.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of sorted neighbor-distance slots in the descriptor.
pub const NEIGHBOR_SLOTS: usize = 8;
/// Radii for the local density counts.
pub const DENSITY_RADII: [f64; 3] = [4.0, 8.0, 12.0];
/// Descriptor length: neighbor slots + density counts + atom count + Rg.
pub const DESCRIPTOR_DIM: usize = NEIGHBOR_SLOTS + DENSITY_RADII.len() + 2;

/// One stored configuration: atom positions plus the residue bookkeeping
/// needed to reduce atoms to residue anchors.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Flat `[n_atoms * 3]` coordinates in angstroms.
    pub positions: Vec<f64>,
    /// Residue id per atom; ids are contiguous from 0.
    pub residue_index: Vec<u32>,
    /// Anchor atom index per residue (C-alpha / P equivalent).
    pub anchor: Vec<u32>,
    /// Per-residue ligand flag.
    pub ligand_mask: Vec<bool>,
}

impl Frame {
    pub fn n_atoms(&self) -> usize {
        self.residue_index.len()
    }

    pub fn n_residues(&self) -> usize {
        self.anchor.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.n_atoms() * 3 {
            return Err(Error::Input(format!(
                "frame has {} coordinates for {} atoms",
                self.positions.len(),
                self.n_atoms()
            )));
        }
        if self.positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coordinates".into()));
        }
        let n_res = self.n_residues();
        if self.ligand_mask.len() != n_res {
            return Err(Error::Input("ligand mask length mismatch".into()));
        }
        let mut seen = vec![false; n_res];
        for &r in &self.residue_index {
            if r as usize >= n_res {
                return Err(Error::Input(format!("residue id {r} out of range")));
            }
            seen[r as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Input("residue ids not contiguous from 0".into()));
        }
        for (res, &a) in self.anchor.iter().enumerate() {
            if a as usize >= self.n_atoms() || self.residue_index[a as usize] as usize != res {
                return Err(Error::Input(format!(
                    "anchor atom {a} does not belong to residue {res}"
                )));
            }
        }
        Ok(())
    }

    /// Anchor coordinates, flat `[n_residues * 3]`.
    pub fn anchors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_residues() * 3);
        for &a in &self.anchor {
            let a = a as usize;
            out.extend_from_slice(&self.positions[a * 3..a * 3 + 3]);
        }
        out
    }
}

/// Symmetric directed edge list over residues within `cutoff`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusGraph {
    pub edges: Vec<(u32, u32)>,
    pub cutoff: f64,
    pub n_nodes: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// All ordered pairs of anchor points within `cutoff` (brute force; the
/// point counts here stay in the thousands).
pub fn radius_graph(anchors: &[f64], cutoff: f64) -> Result<RadiusGraph> {
    if anchors.is_empty() || anchors.len() % 3 != 0 {
        return Err(Error::Input(format!(
            "anchor buffer of {} floats is not a non-empty list of 3D points",
            anchors.len()
        )));
    }
    if anchors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite coordinates".into()));
    }
    if cutoff <= 0.0 {
        return Err(Error::Input(format!("cutoff {cutoff} must be positive")));
    }
    let n = anchors.len() / 3;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if dist(&anchors[i * 3..i * 3 + 3], &anchors[j * 3..j * 3 + 3]) <= cutoff {
                edges.push((i as u32, j as u32));
                edges.push((j as u32, i as u32));
            }
        }
    }
    edges.sort_unstable();
    Ok(RadiusGraph { edges, cutoff, n_nodes: n })
}

/// Raw invariant descriptor for every residue, `[n_residues * DESCRIPTOR_DIM]`.
fn descriptors(frame: &Frame) -> Vec<f64> {
    let n = frame.n_residues();
    let anchors = frame.anchors();
    let mut out = vec![0.0; n * DESCRIPTOR_DIM];

    // Per-residue atom membership for count and radius of gyration.
    let mut atom_count = vec![0usize; n];
    let mut com = vec![0.0; n * 3];
    for (a, &r) in frame.residue_index.iter().enumerate() {
        let r = r as usize;
        atom_count[r] += 1;
        for k in 0..3 {
            com[r * 3 + k] += frame.positions[a * 3 + k];
        }
    }
    for r in 0..n {
        for k in 0..3 {
            com[r * 3 + k] /= atom_count[r] as f64;
        }
    }
    let mut rg2 = vec![0.0; n];
    for (a, &r) in frame.residue_index.iter().enumerate() {
        let r = r as usize;
        rg2[r] += dist(&frame.positions[a * 3..a * 3 + 3], &com[r * 3..r * 3 + 3]).powi(2);
    }

    let mut nbr = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        nbr.clear();
        for j in 0..n {
            if j != i {
                nbr.push(dist(&anchors[i * 3..i * 3 + 3], &anchors[j * 3..j * 3 + 3]));
            }
        }
        nbr.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = &mut out[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM];
        for (slot, v) in d.iter_mut().take(NEIGHBOR_SLOTS).zip(nbr.iter()) {
            *slot = *v;
        }
        for (k, radius) in DENSITY_RADII.iter().enumerate() {
            d[NEIGHBOR_SLOTS + k] = nbr.iter().filter(|&&x| x <= *radius).count() as f64;
        }
        d[NEIGHBOR_SLOTS + 3] = atom_count[i] as f64;
        d[NEIGHBOR_SLOTS + 4] = (rg2[i] / atom_count[i] as f64).sqrt();
    }
    out
}

/// Fixed projection from descriptor space to `H` dimensions: the first
/// `DESCRIPTOR_DIM` columns of the Q factor of a seeded Gaussian matrix, so
/// columns are orthonormal and the map is the same in every run.
pub fn projection_matrix(h: usize, seed: u64) -> Result<Vec<f64>> {
    if h < DESCRIPTOR_DIM {
        return Err(Error::Config(format!(
            "hidden dim {h} is smaller than the descriptor count {DESCRIPTOR_DIM}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6665_6174);
    // Gram-Schmidt on DESCRIPTOR_DIM random vectors in R^h.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(DESCRIPTOR_DIM);
    while cols.len() < DESCRIPTOR_DIM {
        let mut v: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in &cols {
            let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= proj * ci;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    // Row-major [h x DESCRIPTOR_DIM].
    let mut q = vec![0.0; h * DESCRIPTOR_DIM];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..h {
            q[i * DESCRIPTOR_DIM + j] = c[i];
        }
    }
    Ok(q)
}

/// Per-residue tokens for one frame, flat `[n_residues * h]`.
pub fn featurize_residue(frame: &Frame, h: usize, seed: u64) -> Result<Vec<f64>> {
    frame.validate()?;
    let q = projection_matrix(h, seed)?;
    Ok(project_descriptors(&descriptors(frame), &q, h))
}

fn project_descriptors(desc: &[f64], q: &[f64], h: usize) -> Vec<f64> {
    let n = desc.len() / DESCRIPTOR_DIM;
    let mut out = vec![0.0; n * h];
    for r in 0..n {
        let d = &desc[r * DESCRIPTOR_DIM..(r + 1) * DESCRIPTOR_DIM];
        let t = &mut out[r * h..(r + 1) * h];
        for i in 0..h {
            let row = &q[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM];
            t[i] = row.iter().zip(d).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Tokens for a whole trajectory of frames sharing one topology.
pub fn featurize_trajectory(frames: &[Frame], h: usize, seed: u64) -> Result<TokenSet> {
    if frames.is_empty() {
        return Err(Error::Input("no frames to featurize".into()));
    }
    let n = frames[0].n_residues();
    let q = projection_matrix(h, seed)?;
    let mut tokens = Vec::with_capacity(frames.len() * n * h);
    for f in frames {
        f.validate()?;
        if f.n_residues() != n {
            return Err(Error::Input("frames disagree on residue count".into()));
        }
        tokens.extend_from_slice(&project_descriptors(&descriptors(f), &q, h));
    }
    Ok(TokenSet { n_residues: n, hidden: h, n_frames: frames.len(), tokens })
}

/// Residue tokens for a trajectory: `n_frames * n_residues * hidden` floats,
/// frame-major row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub n_residues: usize,
    pub hidden: usize,
    pub n_frames: usize,
    pub tokens: Vec<f64>,
}

impl TokenSet {
    pub fn frame(&self, f: usize) -> &[f64] {
        let stride = self.n_residues * self.hidden;
        &self.tokens[f * stride..(f + 1) * stride]
    }
}

const TOKEN_MAGIC: &[u8; 8] = b"G2VTOK1\0";

/// Write the per-trajectory token cache file.
pub fn write_token_file(path: &Path, set: &TokenSet) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + set.tokens.len() * 8);
    buf.extend_from_slice(TOKEN_MAGIC);
    buf.extend_from_slice(&(set.n_residues as u32).to_le_bytes());
    buf.extend_from_slice(&(set.hidden as u32).to_le_bytes());
    buf.extend_from_slice(&(set.n_frames as u32).to_le_bytes());
    for v in &set.tokens {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_token_file(path: &Path) -> Result<TokenSet> {
    let mut file = fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let take = |off: usize, len: usize| -> Result<&[u8]> {
        buf.get(off..off + len).ok_or(Error::Parse {
            offset: off as u64,
            msg: "unexpected end of token file".into(),
        })
    };
    if take(0, 8)? != TOKEN_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad token file magic".into() });
    }
    let u32_at = |off: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let n = u32_at(8)? as usize;
    let h = u32_at(12)? as usize;
    let frames = u32_at(16)? as usize;
    let count = n * h * frames;
    let data = take(20, count * 8)?;
    let tokens: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(TokenSet { n_residues: n, hidden: h, n_frames: frames, tokens })
}

/// Featurize with a file cache: a hit returns the stored tokens verbatim.
pub fn featurize_cached(frames: &[Frame], h: usize, seed: u64, cache: &Path) -> Result<TokenSet> {
    if cache.exists() {
        let set = read_token_file(cache)?;
        if set.hidden == h && set.n_frames == frames.len() {
            return Ok(set);
        }
    }
    let set = featurize_trajectory(frames, h, seed)?;
    write_token_file(cache, &set)?;
    Ok(set)
}
