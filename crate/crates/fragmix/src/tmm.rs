//! Token-Merging Module: one graph-convolution layer over the residue
//! radius graph, then a windowed MLP that merges `w` sequential residue
//! tokens into a single fragment token. Fragment-level sinusoidal
//! positional encodings are added after merging.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::RadiusGraph;
use crate::nn::{join, Mlp2, Params};
use crate::tensor::{Tape, Tensor};

/// The four benchmarked single-layer graph operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphOperatorKind {
    /// Degree-normalized convolution with self-loops.
    Gcn,
    /// Unnormalized neighbor sum plus a separate self term.
    Gc,
    /// Residual gated convolution: sigmoid gates on neighbor messages.
    Rggc,
    /// Topology-adaptive convolution: K hops of the symmetrically
    /// normalized adjacency, one weight matrix per hop.
    Tag { hops: usize },
}

impl GraphOperatorKind {
    pub fn parse(s: &str, hops: usize) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Self::Gcn),
            "gc" => Ok(Self::Gc),
            "rggc" => Ok(Self::Rggc),
            "tag" => {
                if hops == 0 {
                    return Err(Error::Config("tag operator needs hops >= 1".into()));
                }
                Ok(Self::Tag { hops })
            }
            other => Err(Error::Config(format!(
                "unknown graph operator '{other}' (expected gcn|gc|rggc|tag)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gcn => "gcn",
            Self::Gc => "gc",
            Self::Rggc => "rggc",
            Self::Tag { .. } => "tag",
        }
    }
}

/// Edge lists of a batch of frames merged into one block-diagonal graph
/// over `n_frames * n_nodes` rows.
pub struct BatchedGraph {
    pub n_nodes: usize,
    pub n_frames: usize,
    /// Directed edges as (receiver, sender) global row indices.
    pub recv: Vec<usize>,
    pub send: Vec<usize>,
    /// Out-degree per global node (self-loops not counted).
    pub degree: Vec<usize>,
}

impl BatchedGraph {
    pub fn new(graphs: &[&RadiusGraph], n_nodes: usize) -> Result<BatchedGraph> {
        let n_frames = graphs.len();
        let mut recv = Vec::new();
        let mut send = Vec::new();
        let mut degree = vec![0usize; n_frames * n_nodes];
        for (f, g) in graphs.iter().enumerate() {
            if g.n_nodes != n_nodes {
                return Err(Error::Graph(format!(
                    "frame {f} graph has {} nodes, expected {n_nodes}",
                    g.n_nodes
                )));
            }
            let off = f * n_nodes;
            for &(i, j) in &g.edges {
                let (i, j) = (i as usize, j as usize);
                if i >= n_nodes || j >= n_nodes {
                    return Err(Error::Graph(format!(
                        "edge ({i},{j}) out of range for {n_nodes} nodes"
                    )));
                }
                if i == j {
                    return Err(Error::Graph(format!("self-edge on node {i}")));
                }
                recv.push(off + i);
                send.push(off + j);
                degree[off + i] += 1;
            }
        }
        Ok(BatchedGraph { n_nodes, n_frames, recv, send, degree })
    }

    pub fn rows(&self) -> usize {
        self.n_nodes * self.n_frames
    }
}

/// Sparse aggregation `y_i = sum_j c_ij x_j` in CSR form, with the
/// transpose precomputed for the backward pass.
pub struct AggMatrix {
    rows: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
    t_row_ptr: Vec<usize>,
    t_col: Vec<usize>,
    t_val: Vec<f64>,
}

impl AggMatrix {
    /// Build from (row, col, value) triplets over a square `rows x rows`
    /// operator.
    pub fn from_triplets(rows: usize, triplets: &[(usize, usize, f64)]) -> AggMatrix {
        let build = |swap: bool| {
            let mut ptr = vec![0usize; rows + 1];
            for &(r, c, _) in triplets {
                ptr[if swap { c } else { r } + 1] += 1;
            }
            for i in 0..rows {
                ptr[i + 1] += ptr[i];
            }
            let mut col = vec![0usize; triplets.len()];
            let mut val = vec![0.0; triplets.len()];
            let mut next = ptr.clone();
            for &(r, c, v) in triplets {
                let (rr, cc) = if swap { (c, r) } else { (r, c) };
                col[next[rr]] = cc;
                val[next[rr]] = v;
                next[rr] += 1;
            }
            (ptr, col, val)
        };
        let (row_ptr, col, val) = build(false);
        let (t_row_ptr, t_col, t_val) = build(true);
        AggMatrix { rows, row_ptr, col, val, t_row_ptr, t_col, t_val }
    }

    fn apply(&self, x: &[f64], c: usize, transpose: bool) -> Vec<f64> {
        let (ptr, col, val) = if transpose {
            (&self.t_row_ptr, &self.t_col, &self.t_val)
        } else {
            (&self.row_ptr, &self.col, &self.val)
        };
        let mut y = vec![0.0; self.rows * c];
        for i in 0..self.rows {
            let yr = &mut y[i * c..(i + 1) * c];
            for e in ptr[i]..ptr[i + 1] {
                let v = val[e];
                let xr = &x[col[e] * c..(col[e] + 1) * c];
                for (o, xv) in yr.iter_mut().zip(xr) {
                    *o += v * xv;
                }
            }
        }
        y
    }

    /// Dense `rows x rows` form, for oracle comparisons in tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.rows];
        for i in 0..self.rows {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[i * self.rows + self.col[e]] = self.val[e];
            }
        }
        d
    }
}

impl Tape {
    /// Fixed-coefficient sparse aggregation as a differentiable op.
    pub fn graph_aggregate(&self, x: &Tensor, m: &Rc<AggMatrix>) -> Result<Tensor> {
        let (n, c) = x.dims2()?;
        if n != m.rows {
            return Err(Error::Graph(format!(
                "aggregation over {} rows applied to {n} node features",
                m.rows
            )));
        }
        let data = m.apply(x.data(), c, false);
        let req = self.wants_grad(&[x]);
        let out = Tensor::from_op(data, vec![n, c], req);
        if req {
            let m = Rc::clone(m);
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move |gs| {
                    let g = gs[0].as_ref().unwrap();
                    vec![Some(m.apply(g, c, true))]
                }),
            );
        }
        Ok(out)
    }
}

/// GCN aggregations: self term `diag(1/d~)` and neighbor term
/// `1/sqrt(d~_i d~_j)` where `d~ = degree + 1`.
pub fn gcn_matrices(bg: &BatchedGraph) -> (AggMatrix, AggMatrix) {
    let rows = bg.rows();
    let selfs: Vec<(usize, usize, f64)> =
        (0..rows).map(|i| (i, i, 1.0 / (bg.degree[i] + 1) as f64)).collect();
    let nbrs: Vec<(usize, usize, f64)> = bg
        .recv
        .iter()
        .zip(&bg.send)
        .map(|(&i, &j)| {
            let di = (bg.degree[i] + 1) as f64;
            let dj = (bg.degree[j] + 1) as f64;
            (i, j, 1.0 / (di * dj).sqrt())
        })
        .collect();
    (AggMatrix::from_triplets(rows, &selfs), AggMatrix::from_triplets(rows, &nbrs))
}

/// Plain adjacency (unit coefficients), the GC neighbor sum.
pub fn adjacency_matrix(bg: &BatchedGraph) -> AggMatrix {
    let trip: Vec<(usize, usize, f64)> =
        bg.recv.iter().zip(&bg.send).map(|(&i, &j)| (i, j, 1.0)).collect();
    AggMatrix::from_triplets(bg.rows(), &trip)
}

/// Symmetrically normalized adjacency `T = D^{-1/2} A D^{-1/2}` without
/// self-loops; isolated nodes contribute nothing.
pub fn tag_matrix(bg: &BatchedGraph) -> AggMatrix {
    let trip: Vec<(usize, usize, f64)> = bg
        .recv
        .iter()
        .zip(&bg.send)
        .map(|(&i, &j)| {
            let di = bg.degree[i] as f64;
            let dj = bg.degree[j] as f64;
            (i, j, 1.0 / (di * dj).sqrt())
        })
        .collect();
    AggMatrix::from_triplets(bg.rows(), &trip)
}

/// Window layout for token merging: row indices into the flattened
/// `[n_frames * n_nodes, H]` token matrix, `-1` meaning a zero pad slot.
/// Non-ligand residues are grouped into ceil(n_poly/w) sequential windows;
/// every ligand residue gets its own zero-padded window.
pub fn window_indices(
    n_nodes: usize,
    n_frames: usize,
    window: usize,
    ligand_mask: &[bool],
) -> Result<(Vec<i64>, usize)> {
    if window == 0 {
        return Err(Error::Config("window size must be >= 1".into()));
    }
    if ligand_mask.len() != n_nodes {
        return Err(Error::Config(format!(
            "ligand mask length {} does not match {n_nodes} residues",
            ligand_mask.len()
        )));
    }
    let poly: Vec<usize> = (0..n_nodes).filter(|&i| !ligand_mask[i]).collect();
    let ligands: Vec<usize> = (0..n_nodes).filter(|&i| ligand_mask[i]).collect();
    let n_windows = poly.len().div_ceil(window) + ligands.len();
    let mut idx = Vec::with_capacity(n_frames * n_windows * window);
    for f in 0..n_frames {
        let off = (f * n_nodes) as i64;
        for chunk in poly.chunks(window) {
            for s in 0..window {
                idx.push(chunk.get(s).map_or(-1, |&r| off + r as i64));
            }
        }
        for &l in &ligands {
            idx.push(off + l as i64);
            idx.extend(std::iter::repeat(-1).take(window - 1));
        }
    }
    Ok((idx, n_windows))
}

/// Fragment count after merging: `ceil((n - n_ligand)/w) + n_ligand`.
pub fn fragment_count(n_nodes: usize, window: usize, n_ligand: usize) -> usize {
    (n_nodes - n_ligand).div_ceil(window) + n_ligand
}

/// Sinusoidal positional encoding table `[m, h]`; `h` must be even.
pub fn positional_encoding(m: usize, h: usize) -> Result<Tensor> {
    if h % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even hidden dim, got {h}")));
    }
    let mut data = vec![0.0; m * h];
    for p in 0..m {
        for i in 0..h / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / h as f64);
            data[p * h + 2 * i] = angle.sin();
            data[p * h + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_vec(data, &[m, h])
}

/// The token-merging module: graph-convolution weights for the configured
/// operator plus the shared window-merge MLP.
pub struct TmmNet {
    pub operator: GraphOperatorKind,
    pub window: usize,
    pub hidden: usize,
    /// W_0..W_K depending on the operator.
    conv: Vec<Tensor>,
    /// RGGC gate weights (W_2, W_3).
    gate: Option<(Tensor, Tensor)>,
    merge: Mlp2,
}

impl TmmNet {
    pub fn init(
        rng: &mut ChaCha8Rng,
        operator: GraphOperatorKind,
        window: usize,
        hidden: usize,
    ) -> Result<TmmNet> {
        if window == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        let n_conv = match operator {
            GraphOperatorKind::Gcn | GraphOperatorKind::Gc => 2,
            GraphOperatorKind::Rggc => 2,
            GraphOperatorKind::Tag { hops } => hops + 1,
        };
        let square = |rng: &mut ChaCha8Rng| {
            let std = (1.0 / hidden as f64).sqrt();
            let w: Vec<f64> = (0..hidden * hidden).map(|_| crate::nn::gaussian(rng) * std).collect();
            Tensor::param(w, &[hidden, hidden]).unwrap()
        };
        let conv: Vec<Tensor> = (0..n_conv).map(|_| square(rng)).collect();
        let gate = matches!(operator, GraphOperatorKind::Rggc)
            .then(|| (square(rng), square(rng)));
        Ok(TmmNet {
            operator,
            window,
            hidden,
            conv,
            gate,
            merge: Mlp2::init(rng, window * hidden, hidden, hidden),
        })
    }

    /// Replace the operator weights (W_0.. and, for RGGC, the gate pair).
    /// Shapes must match the operator's layout; used to pin weights in
    /// oracle comparisons.
    pub fn set_conv_weights(
        &mut self,
        conv: Vec<Tensor>,
        gate: Option<(Tensor, Tensor)>,
    ) -> Result<()> {
        if conv.len() != self.conv.len() {
            return Err(Error::Config(format!(
                "operator {:?} takes {} weight matrices, got {}",
                self.operator,
                self.conv.len(),
                conv.len()
            )));
        }
        for w in &conv {
            if w.shape() != [self.hidden, self.hidden] {
                return Err(Error::Config(format!(
                    "conv weight shape {:?} does not match hidden {}",
                    w.shape(),
                    self.hidden
                )));
            }
        }
        if self.gate.is_some() != gate.is_some() {
            return Err(Error::Config("gate weights required exactly for RGGC".into()));
        }
        self.conv = conv;
        self.gate = gate;
        Ok(())
    }

    /// One message-passing layer over `[rows, H]` node features.
    pub fn graph_conv(&self, tape: &Tape, x: &Tensor, bg: &BatchedGraph) -> Result<Tensor> {
        let (rows, h) = x.dims2()?;
        if rows != bg.rows() {
            return Err(Error::Graph(format!(
                "{rows} feature rows for a graph with {} nodes",
                bg.rows()
            )));
        }
        if h != self.hidden {
            return Err(Error::Dimension(format!(
                "feature dim {h} does not match hidden {}",
                self.hidden
            )));
        }
        match self.operator {
            GraphOperatorKind::Gcn => {
                let (selfm, nbrm) = gcn_matrices(bg);
                let xs = tape.graph_aggregate(x, &Rc::new(selfm))?;
                let xn = tape.graph_aggregate(x, &Rc::new(nbrm))?;
                let a = tape.matmul(&xs, &self.conv[0])?;
                let b = tape.matmul(&xn, &self.conv[1])?;
                tape.add(&a, &b)
            }
            GraphOperatorKind::Gc => {
                let adj = adjacency_matrix(bg);
                let xn = tape.graph_aggregate(x, &Rc::new(adj))?;
                let a = tape.matmul(x, &self.conv[0])?;
                let b = tape.matmul(&xn, &self.conv[1])?;
                tape.add(&a, &b)
            }
            GraphOperatorKind::Rggc => {
                let (w2, w3) = self.gate.as_ref().expect("rggc has gate weights");
                let self_term = tape.matmul(x, &self.conv[0])?;
                if bg.recv.is_empty() {
                    return Ok(self_term);
                }
                let recv: Vec<i64> = bg.recv.iter().map(|&i| i as i64).collect();
                let send: Vec<i64> = bg.send.iter().map(|&i| i as i64).collect();
                let a = tape.matmul(x, w2)?; // per-receiver gate half
                let b = tape.matmul(x, w3)?; // per-sender gate half
                let msg = tape.matmul(x, &self.conv[1])?;
                let ga = tape.gather_rows(&a, &recv)?;
                let gb = tape.gather_rows(&b, &send)?;
                let eta = tape.sigmoid(&tape.add(&ga, &gb)?);
                let gm = tape.gather_rows(&msg, &send)?;
                let gated = tape.mul(&eta, &gm)?;
                let agg = tape.scatter_sum_rows(&gated, &bg.recv, rows)?;
                tape.add(&self_term, &agg)
            }
            GraphOperatorKind::Tag { hops } => {
                let t = Rc::new(tag_matrix(bg));
                let mut acc = tape.matmul(x, &self.conv[0])?;
                let mut tx = x.clone();
                for k in 1..=hops {
                    tx = tape.graph_aggregate(&tx, &t)?;
                    let term = tape.matmul(&tx, &self.conv[k])?;
                    acc = tape.add(&acc, &term)?;
                }
                Ok(acc)
            }
        }
    }

    /// Merge windows of `w` node tokens into fragment tokens:
    /// `[rows, H] -> [n_frames * M, H]`.
    pub fn merge_tokens(
        &self,
        tape: &Tape,
        x: &Tensor,
        bg_frames: usize,
        ligand_mask: &[bool],
    ) -> Result<Tensor> {
        let (rows, h) = x.dims2()?;
        let n_nodes = rows / bg_frames;
        let (idx, m) = window_indices(n_nodes, bg_frames, self.window, ligand_mask)?;
        let gathered = tape.gather_rows(x, &idx)?;
        let windows = tape.reshape(&gathered, &[bg_frames * m, self.window * h])?;
        self.merge.forward(tape, &windows)
    }

    /// Full module: graph convolution, windowed merge, fragment-level
    /// positional encoding. `tokens` is `[B, N, H]`; returns `[B, M, H]`.
    pub fn forward(
        &self,
        tape: &Tape,
        tokens: &Tensor,
        graphs: &[&RadiusGraph],
        ligand_mask: &[bool],
    ) -> Result<Tensor> {
        let (b, n, h) = tokens.dims3()?;
        if graphs.len() != b {
            return Err(Error::Graph(format!("{} graphs for batch of {b}", graphs.len())));
        }
        let bg = BatchedGraph::new(graphs, n)?;
        let x = tape.reshape(tokens, &[b * n, h])?;
        let x = self.graph_conv(tape, &x, &bg)?;
        let merged = self.merge_tokens(tape, &x, b, ligand_mask)?;
        let m = merged.dims2()?.0 / b;
        let merged = tape.reshape(&merged, &[b, m, h])?;
        let pe = positional_encoding(m, h)?;
        tape.add(&merged, &pe)
    }

    pub fn fragment_count_for(&self, n_nodes: usize, ligand_mask: &[bool]) -> usize {
        fragment_count(n_nodes, self.window, ligand_mask.iter().filter(|&&l| l).count())
    }
}

impl Params for TmmNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (k, w) in self.conv.iter_mut().enumerate() {
            f(join(prefix, &format!("conv{k}")), w);
        }
        if let Some((w2, w3)) = &mut self.gate {
            f(join(prefix, "gate2"), w2);
            f(join(prefix, "gate3"), w3);
        }
        self.merge.visit_params(&join(prefix, "merge"), f);
    }
}
