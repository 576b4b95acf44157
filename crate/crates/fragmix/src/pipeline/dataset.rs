//! Trajectory datasets on disk and in memory.
//!
//! A dataset is a manifest (plain key=value text) naming per-trajectory
//! files, either position files (binary, magic `G2VPOS1\0`) or token cache
//! files (magic `G2VTOK1\0`). Position trajectories are featurized on load
//! with a token cache next to the input; a CSV import covers tiny cases.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{self, Frame, TokenSet};

const POS_MAGIC: &[u8; 8] = b"G2VPOS1\0";

/// Write one trajectory of frames sharing a topology.
pub fn write_position_file(path: &Path, frames: &[Frame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Input("no frames to write".into()));
    }
    let first = &frames[0];
    first.validate()?;
    let n_atoms = first.n_atoms();
    let n_res = first.n_residues();
    let mut buf = Vec::new();
    buf.extend_from_slice(POS_MAGIC);
    buf.extend_from_slice(&(n_atoms as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for &r in &first.residue_index {
        buf.extend_from_slice(&r.to_le_bytes());
    }
    for &a in &first.anchor {
        buf.extend_from_slice(&a.to_le_bytes());
    }
    for &l in &first.ligand_mask {
        buf.push(l as u8);
    }
    for f in frames {
        if f.n_atoms() != n_atoms || f.n_residues() != n_res {
            return Err(Error::Input("frames disagree on topology".into()));
        }
        for v in &f.positions {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_position_file(path: &Path) -> Result<Vec<Frame>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let need = |off: usize, len: usize| -> Result<&[u8]> {
        buf.get(off..off + len).ok_or(Error::Parse {
            offset: off as u64,
            msg: format!("position file truncated in {}", path.display()),
        })
    };
    if need(0, 8)? != POS_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad position file magic".into() });
    }
    let rd_u32 = |off: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(need(off, 4)?.try_into().unwrap()))
    };
    let n_atoms = rd_u32(8)? as usize;
    let n_frames = rd_u32(12)? as usize;
    let mut off = 16;
    let mut residue_index = Vec::with_capacity(n_atoms);
    for _ in 0..n_atoms {
        residue_index.push(rd_u32(off)?);
        off += 4;
    }
    let n_res = residue_index.iter().map(|&r| r as usize + 1).max().unwrap_or(0);
    let mut anchor = Vec::with_capacity(n_res);
    for _ in 0..n_res {
        anchor.push(rd_u32(off)?);
        off += 4;
    }
    let mut ligand_mask = Vec::with_capacity(n_res);
    for _ in 0..n_res {
        ligand_mask.push(need(off, 1)?[0] != 0);
        off += 1;
    }
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let raw = need(off, n_atoms * 3 * 8)?;
        let positions: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += n_atoms * 3 * 8;
        let f = Frame {
            positions,
            residue_index: residue_index.clone(),
            anchor: anchor.clone(),
            ligand_mask: ligand_mask.clone(),
        };
        f.validate()?;
        frames.push(f);
    }
    Ok(frames)
}

/// CSV import for tiny hand-written cases:
/// `frame,atom,x,y,z,residue,is_anchor,is_ligand` with a header row.
pub fn read_position_csv(path: &Path) -> Result<Vec<Frame>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or(Error::Parse { offset: 0, msg: "empty CSV".into() })?
        .1
        .trim();
    if header != "frame,atom,x,y,z,residue,is_anchor,is_ligand" {
        return Err(Error::Parse { offset: 0, msg: format!("unexpected CSV header '{header}'") });
    }
    // (frame, atom) -> row
    let mut rows: Vec<(usize, usize, f64, f64, f64, u32, bool, bool)> = Vec::new();
    let mut offset = header.len() as u64 + 1;
    for (_, line) in lines {
        let this_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 8 {
            return Err(Error::Parse {
                offset: this_offset,
                msg: format!("expected 8 fields, got {}", parts.len()),
            });
        }
        let field = |i: usize| -> Result<f64> {
            parts[i].parse().map_err(|_| Error::Parse {
                offset: this_offset,
                msg: format!("bad number '{}'", parts[i]),
            })
        };
        rows.push((
            field(0)? as usize,
            field(1)? as usize,
            field(2)?,
            field(3)?,
            field(4)?,
            field(5)? as u32,
            field(6)? != 0.0,
            field(7)? != 0.0,
        ));
    }
    if rows.is_empty() {
        return Err(Error::Parse { offset: 0, msg: "CSV has no data rows".into() });
    }
    let n_frames = rows.iter().map(|r| r.0 + 1).max().unwrap();
    let n_atoms = rows.iter().map(|r| r.1 + 1).max().unwrap();
    let n_res = rows.iter().map(|r| r.5 as usize + 1).max().unwrap();
    let mut frames = Vec::with_capacity(n_frames);
    let mut residue_index = vec![0u32; n_atoms];
    let mut anchor = vec![u32::MAX; n_res];
    let mut ligand_mask = vec![false; n_res];
    for r in rows.iter().filter(|r| r.0 == 0) {
        residue_index[r.1] = r.5;
        if r.6 {
            anchor[r.5 as usize] = r.1 as u32;
        }
        if r.7 {
            ligand_mask[r.5 as usize] = true;
        }
    }
    if anchor.iter().any(|&a| a == u32::MAX) {
        return Err(Error::Input("every residue needs exactly one anchor atom".into()));
    }
    for f in 0..n_frames {
        let mut positions = vec![f64::NAN; n_atoms * 3];
        for r in rows.iter().filter(|r| r.0 == f) {
            positions[r.1 * 3] = r.2;
            positions[r.1 * 3 + 1] = r.3;
            positions[r.1 * 3 + 2] = r.4;
        }
        let fr = Frame {
            positions,
            residue_index: residue_index.clone(),
            anchor: anchor.clone(),
            ligand_mask: ligand_mask.clone(),
        };
        fr.validate()?;
        frames.push(fr);
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Positions,
    Tokens,
}

/// Parsed dataset manifest.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub interval_ns: f64,
    pub files: Vec<PathBuf>,
    /// Directory the manifest lives in; file entries are relative to it.
    pub root: PathBuf,
}

impl Manifest {
    pub fn parse(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut kind = None;
        let mut interval_ns = None;
        let mut files = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let this_offset = offset;
            offset += line.len() as u64 + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                offset: this_offset,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            match key.trim() {
                "kind" => {
                    kind = Some(match value.trim() {
                        "positions" => DatasetKind::Positions,
                        "tokens" => DatasetKind::Tokens,
                        other => {
                            return Err(Error::Parse {
                                offset: this_offset,
                                msg: format!("unknown dataset kind '{other}'"),
                            })
                        }
                    })
                }
                "interval_ns" => {
                    interval_ns = Some(value.trim().parse().map_err(|_| Error::Parse {
                        offset: this_offset,
                        msg: format!("bad interval_ns '{value}'"),
                    })?)
                }
                "file" => files.push(root.join(value.trim())),
                other => {
                    return Err(Error::Parse {
                        offset: this_offset,
                        msg: format!("unknown manifest key '{other}'"),
                    })
                }
            }
        }
        Ok(Manifest {
            kind: kind.ok_or(Error::Parse { offset: 0, msg: "manifest missing kind".into() })?,
            interval_ns: interval_ns
                .ok_or(Error::Parse { offset: 0, msg: "manifest missing interval_ns".into() })?,
            files,
            root,
        })
    }

    pub fn write(path: &Path, kind: DatasetKind, interval_ns: f64, files: &[String]) -> Result<()> {
        let mut text = String::from("# fragmix dataset manifest\n");
        text.push_str(&format!(
            "kind={}\n",
            match kind {
                DatasetKind::Positions => "positions",
                DatasetKind::Tokens => "tokens",
            }
        ));
        text.push_str(&format!("interval_ns={interval_ns}\n"));
        for f in files {
            text.push_str(&format!("file={f}\n"));
        }
        fs::write(path, text)?;
        Ok(())
    }
}

/// One in-memory trajectory: tokens always, anchors when positions were
/// available (needed to build per-frame radius graphs).
pub struct TrajectoryData {
    pub n_frames: usize,
    /// `[n_frames * n_residues * token_dim]`
    pub tokens: Vec<f64>,
    /// `[n_frames * n_residues * 3]`
    pub anchors: Option<Vec<f64>>,
}

pub struct LoadedDataset {
    pub trajs: Vec<TrajectoryData>,
    pub n_residues: usize,
    pub token_dim: usize,
    pub ligand_mask: Vec<bool>,
    /// Effective time between kept frames (manifest interval times stride).
    pub frame_interval_ns: f64,
}

impl LoadedDataset {
    pub fn total_frames(&self) -> usize {
        self.trajs.iter().map(|t| t.n_frames).sum()
    }

    pub fn has_anchors(&self) -> bool {
        self.trajs.iter().all(|t| t.anchors.is_some())
    }

    pub fn token_frame(&self, traj: usize, frame: usize) -> &[f64] {
        let stride = self.n_residues * self.token_dim;
        &self.trajs[traj].tokens[frame * stride..(frame + 1) * stride]
    }

    pub fn anchor_frame(&self, traj: usize, frame: usize) -> Option<&[f64]> {
        self.trajs[traj].anchors.as_ref().map(|a| {
            let stride = self.n_residues * 3;
            &a[frame * stride..(frame + 1) * stride]
        })
    }

    /// Frames-per-trajectory, the shape splits operate on.
    pub fn lengths(&self) -> Vec<usize> {
        self.trajs.iter().map(|t| t.n_frames).collect()
    }
}

/// Lag in frames from a physical lag time: `round(lag_ns / (interval *
/// stride))`, at least 1.
pub fn lag_frames(lag_ns: f64, interval_ns: f64, stride: usize) -> Result<usize> {
    if lag_ns <= 0.0 || interval_ns <= 0.0 || stride == 0 {
        return Err(Error::Config(format!(
            "lag_ns {lag_ns}, interval_ns {interval_ns}, stride {stride} must all be positive"
        )));
    }
    Ok(((lag_ns / (interval_ns * stride.max(1) as f64)).round() as usize).max(1))
}

/// Load a manifest into memory, featurizing position trajectories (token
/// cache written next to each position file) and applying `stride`.
pub fn load_dataset(
    manifest: &Manifest,
    hidden: usize,
    feat_seed: u64,
    stride: usize,
) -> Result<LoadedDataset> {
    if manifest.files.is_empty() {
        return Err(Error::Input("manifest lists no trajectory files".into()));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let mut trajs = Vec::new();
    let mut n_residues = None;
    let mut token_dim = None;
    let mut ligand_mask: Option<Vec<bool>> = None;
    for file in &manifest.files {
        let (tokens, anchors, n_res, h, lig) = match manifest.kind {
            DatasetKind::Positions => {
                let frames = if file.extension().is_some_and(|e| e == "csv") {
                    read_position_csv(file)?
                } else {
                    read_position_file(file)?
                };
                let cache = file.with_extension(format!("h{hidden}.tok"));
                let set = geometry::featurize_cached(&frames, hidden, feat_seed, &cache)?;
                let n_res = set.n_residues;
                let anchors: Vec<f64> = frames.iter().flat_map(|f| f.anchors()).collect();
                let lig = frames[0].ligand_mask.clone();
                (set, Some(anchors), n_res, hidden, lig)
            }
            DatasetKind::Tokens => {
                let set = geometry::read_token_file(file)?;
                let n_res = set.n_residues;
                let h = set.hidden;
                let lig = vec![false; n_res];
                (set, None, n_res, h, lig)
            }
        };
        match (n_residues, token_dim) {
            (None, None) => {
                n_residues = Some(n_res);
                token_dim = Some(h);
                ligand_mask = Some(lig);
            }
            (Some(nr), Some(td)) => {
                if nr != n_res || td != h {
                    return Err(Error::Input(format!(
                        "{} disagrees with earlier trajectories on shape",
                        file.display()
                    )));
                }
            }
            _ => unreachable!(),
        }
        trajs.push(apply_stride(tokens, anchors, n_res, h, stride));
    }
    Ok(LoadedDataset {
        trajs,
        n_residues: n_residues.unwrap(),
        token_dim: token_dim.unwrap(),
        ligand_mask: ligand_mask.unwrap(),
        frame_interval_ns: manifest.interval_ns * stride as f64,
    })
}

fn apply_stride(
    set: TokenSet,
    anchors: Option<Vec<f64>>,
    n_res: usize,
    h: usize,
    stride: usize,
) -> TrajectoryData {
    if stride == 1 {
        return TrajectoryData { n_frames: set.n_frames, tokens: set.tokens, anchors };
    }
    let kept: Vec<usize> = (0..set.n_frames).step_by(stride).collect();
    let tstride = n_res * h;
    let mut tokens = Vec::with_capacity(kept.len() * tstride);
    for &f in &kept {
        tokens.extend_from_slice(&set.tokens[f * tstride..(f + 1) * tstride]);
    }
    let anchors = anchors.map(|a| {
        let astride = n_res * 3;
        let mut out = Vec::with_capacity(kept.len() * astride);
        for &f in &kept {
            out.extend_from_slice(&a[f * astride..(f + 1) * astride]);
        }
        out
    });
    TrajectoryData { n_frames: kept.len(), tokens, anchors }
}
