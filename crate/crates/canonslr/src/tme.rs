//! Temporal motion relational enhancement: adjacent-frame token graphs
//! built from scaled query-key correlation, aggregated with one normalized
//! graph convolution and residually fused behind a learnable gate.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4};

use crate::autodiff::CsrMatrix;
use crate::error::{Error, Result};

/// Sparse temporal graph over all spatial tokens of a sequence. Node
/// `(t, i)` is row `t * tokens_per_frame + i`; every edge points from a
/// token in frame `t` to a token in frame `t + 1`.
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    pub frame_count: usize,
    pub tokens_per_frame: usize,
    pub edges: Vec<(usize, usize)>,
}

impl TemporalGraph {
    pub fn node_count(&self) -> usize {
        self.frame_count * self.tokens_per_frame
    }
}

/// Reshapes stage features [T, C, H, W] into spatial tokens [T, B, C] with
/// B = H * W; token (h, w) is row h * W + w of its frame.
pub fn tokenize(f: &ArrayView4<f64>) -> Array3<f64> {
    let (t, c, h, w) = f.dim();
    let b = h * w;
    let mut out = Array3::<f64>::zeros((t, b, c));
    for ti in 0..t {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ti, hi * w + wi, ci]] = f[[ti, ci, hi, wi]];
                }
            }
        }
    }
    out
}

/// Inverse of [`tokenize`]; reproduces the feature layout bit-exactly.
pub fn untokenize(tokens: &ArrayView3<f64>, h: usize, w: usize) -> Result<Array4<f64>> {
    let (t, b, c) = tokens.dim();
    if b != h * w {
        return Err(Error::invalid(format!(
            "token count {b} does not match spatial extent {h}x{w}"
        )));
    }
    let mut out = Array4::<f64>::zeros((t, c, h, w));
    for ti in 0..t {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ti, ci, hi, wi]] = tokens[[ti, hi * w + wi, ci]];
                }
            }
        }
    }
    Ok(out)
}

/// Scaled query-key correlation between adjacent frames: for each t,
/// `S_t(i, j) = <q_{t,i}, k_{t+1,j}> / sqrt(d)` with `q = U_t W_q` and
/// `k = U_{t+1} W_k`. Returns T - 1 matrices; a single-frame sequence has
/// no adjacent pairs and yields an empty sequence.
pub fn correlate(
    tokens: &ArrayView3<f64>,
    w_q: &ArrayView2<f64>,
    w_k: &ArrayView2<f64>,
) -> Vec<Array2<f64>> {
    let (t, _b, _c) = tokens.dim();
    let d = w_q.ncols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(t.saturating_sub(1));
    for ti in 0..t.saturating_sub(1) {
        let q = tokens.index_axis(ndarray::Axis(0), ti).dot(w_q);
        let k = tokens.index_axis(ndarray::Axis(0), ti + 1).dot(w_k);
        out.push(q.dot(&k.t()).mapv(|v| v * scale));
    }
    out
}

/// Connects each token to the K most correlated tokens of the next frame.
/// Ties break toward the lower column index; K clamps to the tokens per
/// frame. The edge count is exactly `(T - 1) * B * min(K, B)`.
pub fn build_graph(
    correlations: &[Array2<f64>],
    frame_count: usize,
    tokens_per_frame: usize,
    k: usize,
) -> Result<TemporalGraph> {
    if k == 0 {
        return Err(Error::invalid("top-K must be at least 1"));
    }
    let b = tokens_per_frame;
    let k_eff = k.min(b);
    let mut edges = Vec::with_capacity(correlations.len() * b * k_eff);
    for (ti, s) in correlations.iter().enumerate() {
        if s.dim() != (b, b) {
            return Err(Error::invalid(format!(
                "correlation matrix {ti} has shape {:?}, expected ({b}, {b})",
                s.dim()
            )));
        }
        for i in 0..b {
            let row = s.row(i);
            let mut order: Vec<usize> = (0..b).collect();
            order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap());
            for &j in order.iter().take(k_eff) {
                edges.push((ti * b + i, (ti + 1) * b + j));
            }
        }
    }
    Ok(TemporalGraph {
        frame_count,
        tokens_per_frame,
        edges,
    })
}

/// Symmetrically normalized adjacency with self-loops,
/// `D^{-1/2} (A + I) D^{-1/2}`, where A is the binary symmetrized edge
/// structure. The result is symmetric, so it is its own transpose in
/// backward passes.
pub fn normalized_adjacency(graph: &TemporalGraph) -> CsrMatrix {
    let n = graph.node_count();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in &graph.edges {
        neighbors[u].push(v);
        neighbors[v].push(u);
    }
    for (i, list) in neighbors.iter_mut().enumerate() {
        list.push(i);
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<f64> = neighbors.iter().map(|l| l.len() as f64).collect();

    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    indptr.push(0);
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            indices.push(j);
            data.push(1.0 / (degree[i] * degree[j]).sqrt());
        }
        indptr.push(indices.len());
    }
    CsrMatrix {
        n,
        indptr,
        indices,
        data,
    }
}

/// One graph-convolution layer over the token graph:
/// `ReLU(normalized_adjacency * X * W)` with no bias.
pub fn graph_convolve(
    graph: &TemporalGraph,
    nodes: &ArrayView2<f64>,
    weights: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = graph.node_count();
    if nodes.nrows() != n {
        return Err(Error::invalid(format!(
            "node features have {} rows, graph has {n} nodes",
            nodes.nrows()
        )));
    }
    if weights.nrows() != nodes.ncols() || weights.ncols() != nodes.ncols() {
        return Err(Error::invalid("graph convolution weights must be square C x C"));
    }
    let adj = normalized_adjacency(graph);
    let mixed = adj.matmul(nodes);
    let out = mixed.dot(weights).mapv(|v| v.max(0.0));
    Ok(out)
}

/// Residual fusion `F + alpha * enhanced`, with the enhanced tokens
/// reshaped back to the feature layout.
pub fn fuse(f: &ArrayView4<f64>, enhanced: &ArrayView2<f64>, alpha: f64) -> Result<Array4<f64>> {
    let (t, c, h, w) = f.dim();
    if enhanced.dim() != (t * h * w, c) {
        return Err(Error::invalid(format!(
            "enhanced features {:?} do not reshape to stage layout [{t}, {c}, {h}, {w}]",
            enhanced.dim()
        )));
    }
    let tokens = enhanced
        .to_owned()
        .into_shape_with_order((t, h * w, c))
        .unwrap();
    let back = untokenize(&tokens.view(), h, w)?;
    Ok(f.to_owned() + &back.mapv(|v| v * alpha))
}
