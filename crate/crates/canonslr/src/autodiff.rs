//! Reverse-mode automatic differentiation over `ndarray` in f64.
//!
//! A [`Graph`] is a per-sample tape: forward constructors evaluate eagerly
//! and record enough context for the backward sweep. Parameters enter the
//! tape as shared leaves (`Arc`) so building a graph never copies weights.
//! Node ids are topologically ordered by construction, so `backward` is a
//! single reverse walk over the node vector.

use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, Ix4};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

impl Tensor {
    /// Slot of this tensor in the gradient vector returned by
    /// [`Graph::backward`].
    pub fn slot(&self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix; used for the normalized graph adjacency.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    /// Dense product `self * x` where x is [n, c].
    pub fn matmul(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let c = x.ncols();
        let mut out = Array2::<f64>::zeros((self.n, c));
        for row in 0..self.n {
            for k in self.indptr[row]..self.indptr[row + 1] {
                let col = self.indices[k];
                let v = self.data[k];
                let src = x.row(col);
                let mut dst = out.row_mut(row);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// Dense representation, for oracle comparisons in tests.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.n, self.n));
        for row in 0..self.n {
            for k in self.indptr[row]..self.indptr[row + 1] {
                out[[row, self.indices[k]]] += self.data[k];
            }
        }
        out
    }
}

enum Value {
    Owned(ArrayD<f64>),
    Shared(Arc<ArrayD<f64>>),
}

impl Value {
    fn view(&self) -> ArrayViewD<'_, f64> {
        match self {
            Value::Owned(a) => a.view(),
            Value::Shared(a) => a.view(),
        }
    }
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    /// `x` is [r, c], `b` is [c], broadcast over rows.
    AddBias(Tensor, Tensor),
    Mul(Tensor, Tensor),
    /// `x * s[0]` with `s` a one-element tensor.
    ScaleBy { x: Tensor, s: Tensor },
    Relu(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    MatMul(Tensor, Tensor),
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
        kernel: usize,
        cols: Array2<f64>,
    },
    Conv1d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        kernel: usize,
        cols: Array2<f64>,
    },
    /// Max over non-overlapping row pairs; `pick` holds the winning source
    /// row per output element.
    MaxPool1d { x: Tensor, pick: Vec<usize> },
    MeanSpatial { x: Tensor },
    SliceRows { x: Tensor, start: usize },
    SliceCols { x: Tensor, start: usize },
    ConcatRows { parts: Vec<Tensor> },
    ConcatCols { parts: Vec<Tensor> },
    ReverseRows(Tensor),
    Transpose(Tensor),
    /// [T, C, H, W] -> [T*H*W, C]; token (t, h, w) is row (t*H + h)*W + w.
    TokensFromFeat { x: Tensor },
    /// Inverse of `TokensFromFeat` back to the given feature shape.
    FeatFromTokens { x: Tensor, shape: [usize; 4] },
    /// `adj * x` with a constant (symmetric) adjacency.
    SparseMatMul { x: Tensor, adj: Arc<CsrMatrix> },
    /// Scalar loss with the input gradient computed at forward time.
    FusedLoss { x: Tensor, grad: ArrayD<f64> },
    /// Weighted sum of scalar nodes.
    WeightedSum { terms: Vec<(f64, Tensor)> },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn value(&self, t: Tensor) -> ArrayViewD<'_, f64> {
        self.nodes[t.0].value.view()
    }

    pub fn value2(&self, t: Tensor) -> ArrayView2<'_, f64> {
        self.value(t).into_dimensionality::<Ix2>().unwrap()
    }

    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf backed by shared storage.
    pub fn param(&mut self, value: Arc<ArrayD<f64>>) -> Tensor {
        self.nodes.push(Node {
            value: Value::Shared(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_bias(&mut self, x: Tensor, b: Tensor) -> Tensor {
        let xv = self.value2(x).to_owned();
        let bv = self.value(b);
        let bv = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = &xv + &bv;
        let rg = self.rg(x) || self.rg(b);
        self.push(v.into_dyn(), Op::AddBias(x, b), rg)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = &self.value(a) * &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale_by(&mut self, x: Tensor, s: Tensor) -> Tensor {
        let sv = self.scalar(s);
        let v = self.value(x).to_owned() * sv;
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Op::ScaleBy { x, s }, rg)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).mapv(|e| e.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).mapv(|e| 1.0 / (1.0 + (-e).exp()));
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    /// 2D matrix product.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = self.value2(a).dot(&self.value2(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v.into_dyn(), Op::MatMul(a, b), rg)
    }

    /// 2D convolution over [N, Cin, H, W] with square kernel, padding `pad`
    /// and stride `stride`. Weight is [Cout, Cin, k, k], bias [Cout].
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize, pad: usize) -> Tensor {
        let xv = self.value(x).into_dimensionality::<Ix4>().unwrap().to_owned();
        let wv = self.value(w).into_dimensionality::<Ix4>().unwrap().to_owned();
        let bv = self.value(b).to_owned();
        let (n, cin, h, wd) = xv.dim();
        let (cout, cin_w, k, k2) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(k, k2);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let cols = im2col_2d(&xv, k, stride, pad, ho, wo);
        let w2d = wv.view().into_shape_with_order((cout, cin * k * k)).unwrap();
        let mut out_mat = cols.dot(&w2d.t());
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        out_mat += &b1;

        let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (ni * ho + oy) * wo + ox;
                    for co in 0..cout {
                        out[[ni, co, oy, ox]] = out_mat[[row, co]];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                kernel: k,
                cols,
            },
            rg,
        )
    }

    /// 1D temporal convolution over [T, C] with "same" padding and stride 1.
    /// Weight is [D, k, C], bias [D].
    pub fn conv1d(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let xv = self.value2(x).to_owned();
        let wv = self.value(w).to_owned();
        let bv = self.value(b).to_owned();
        let (t, c) = xv.dim();
        let wdims = wv.shape();
        let (d, k, c_w) = (wdims[0], wdims[1], wdims[2]);
        assert_eq!(c, c_w, "conv1d channel mismatch");
        let pad = (k - 1) / 2;

        let mut cols = Array2::<f64>::zeros((t, k * c));
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize - pad as isize + j as isize;
                if src >= 0 && (src as usize) < t {
                    cols.slice_mut(ndarray::s![ti, j * c..(j + 1) * c])
                        .assign(&xv.row(src as usize));
                }
            }
        }
        let w2d = wv.view().into_shape_with_order((d, k * c)).unwrap().to_owned();
        let mut out = cols.dot(&w2d.t());
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        out += &b1;

        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out.into_dyn(), Op::Conv1d { x, w, b, kernel: k, cols }, rg)
    }

    /// Temporal max pooling with window 2, stride 2 over rows of [T, C].
    pub fn max_pool1d(&mut self, x: Tensor) -> Tensor {
        let xv = self.value2(x);
        let (t, c) = xv.dim();
        let to = t / 2;
        let mut out = Array2::<f64>::zeros((to, c));
        let mut pick = vec![0usize; to * c];
        for ti in 0..to {
            for ci in 0..c {
                let a = xv[[2 * ti, ci]];
                let b = xv[[2 * ti + 1, ci]];
                if a >= b {
                    out[[ti, ci]] = a;
                    pick[ti * c + ci] = 2 * ti;
                } else {
                    out[[ti, ci]] = b;
                    pick[ti * c + ci] = 2 * ti + 1;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::MaxPool1d { x, pick }, rg)
    }

    /// Spatial mean over [N, C, H, W] -> [N, C].
    pub fn mean_spatial(&mut self, x: Tensor) -> Tensor {
        let xv = self.value(x).into_dimensionality::<Ix4>().unwrap().to_owned();
        let (n, c, h, w) = xv.dim();
        let flat = xv.into_shape_with_order((n, c, h * w)).unwrap();
        let out = flat.mean_axis(Axis(2)).unwrap();
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::MeanSpatial { x }, rg)
    }

    pub fn slice_rows(&mut self, x: Tensor, start: usize, len: usize) -> Tensor {
        let v = self
            .value2(x)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Tensor, start: usize, len: usize) -> Tensor {
        let v = self
            .value2(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Tensor {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|t| self.value2(*t)).collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap();
        let rg = parts.iter().any(|t| self.rg(*t));
        self.push(v.into_dyn(), Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|t| self.value2(*t)).collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap();
        let rg = parts.iter().any(|t| self.rg(*t));
        self.push(v.into_dyn(), Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    pub fn reverse_rows(&mut self, x: Tensor) -> Tensor {
        let v = self.value2(x).slice(ndarray::s![..;-1, ..]).to_owned();
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::ReverseRows(x), rg)
    }

    /// 2D transpose.
    pub fn transpose(&mut self, x: Tensor) -> Tensor {
        let v = self.value2(x).t().to_owned();
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::Transpose(x), rg)
    }

    /// Reshape stage features [T, C, H, W] into spatial tokens [T*H*W, C].
    pub fn tokens_from_feat(&mut self, x: Tensor) -> Tensor {
        let xv = self.value(x).into_dimensionality::<Ix4>().unwrap().to_owned();
        let (t, c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((t * h * w, c));
        for ti in 0..t {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[(ti * h + hi) * w + wi, ci]] = xv[[ti, ci, hi, wi]];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::TokensFromFeat { x }, rg)
    }

    /// Inverse of [`Graph::tokens_from_feat`].
    pub fn feat_from_tokens(&mut self, x: Tensor, shape: [usize; 4]) -> Tensor {
        let xv = self.value2(x).to_owned();
        let [t, c, h, w] = shape;
        assert_eq!(xv.dim(), (t * h * w, c), "token shape mismatch");
        let mut out = Array4::<f64>::zeros((t, c, h, w));
        for ti in 0..t {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[ti, ci, hi, wi]] = xv[[(ti * h + hi) * w + wi, ci]];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::FeatFromTokens { x, shape }, rg)
    }

    /// Product of a constant symmetric sparse matrix with [n, c] features.
    pub fn sparse_matmul(&mut self, adj: Arc<CsrMatrix>, x: Tensor) -> Tensor {
        let v = adj.matmul(&self.value2(x));
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::SparseMatMul { x, adj }, rg)
    }

    /// Scalar loss node whose gradient with respect to `x` was computed by
    /// the caller during the forward pass.
    pub fn fused_loss(&mut self, x: Tensor, loss: f64, grad: ArrayD<f64>) -> Tensor {
        let rg = self.rg(x);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::FusedLoss { x, grad },
            rg,
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Tensor)]) -> Tensor {
        let v: f64 = terms.iter().map(|(w, t)| w * self.scalar(*t)).sum();
        let rg = terms.iter().any(|(_, t)| self.rg(*t));
        self.push(
            ndarray::arr0(v).into_dyn(),
            Op::WeightedSum { terms: terms.to_vec() },
            rg,
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node;
    /// only nodes on a differentiable path to `root` are populated.
    pub fn backward(&self, root: Tensor) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], t: Tensor, delta: ArrayD<f64>) {
        if !self.rg(t) {
            return;
        }
        match &mut grads[t.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accum(grads, *x, g.clone());
                if self.rg(*b) {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    self.accum(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, g * &self.value(*b));
                }
                if self.rg(*b) {
                    self.accum(grads, *b, g * &self.value(*a));
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.scalar(*s);
                if self.rg(*x) {
                    self.accum(grads, *x, g * sv);
                }
                if self.rg(*s) {
                    let dot: f64 = g.iter().zip(self.value(*x).iter()).map(|(a, b)| a * b).sum();
                    let mut d = ArrayD::zeros(self.value(*s).raw_dim());
                    d.iter_mut().for_each(|e| *e = dot);
                    self.accum(grads, *s, d);
                }
            }
            Op::Relu(x) => {
                let mask = self.value(*x).mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *x, g * &mask);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[id].value.view();
                let d = y.mapv(|e| e * (1.0 - e));
                self.accum(grads, *x, g * &d);
            }
            Op::Tanh(x) => {
                let y = self.nodes[id].value.view();
                let d = y.mapv(|e| 1.0 - e * e);
                self.accum(grads, *x, g * &d);
            }
            Op::MatMul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.rg(*a) {
                    let d = g2.dot(&self.value2(*b).t());
                    self.accum(grads, *a, d.into_dyn());
                }
                if self.rg(*b) {
                    let d = self.value2(*a).t().dot(&g2);
                    self.accum(grads, *b, d.into_dyn());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                kernel,
                cols,
            } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, cout, ho, wo) = g4.dim();
                let mut g_mat = Array2::<f64>::zeros((n * ho * wo, cout));
                for ni in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = (ni * ho + oy) * wo + ox;
                            for co in 0..cout {
                                g_mat[[row, co]] = g4[[ni, co, oy, ox]];
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    self.accum(grads, *b, g_mat.sum_axis(Axis(0)).into_dyn());
                }
                if self.rg(*w) {
                    let gw2 = g_mat.t().dot(cols);
                    let wshape = self.value(*w).raw_dim();
                    self.accum(grads, *w, gw2.into_shape_with_order(wshape).unwrap());
                }
                if self.rg(*x) {
                    let xdim = self.value(*x).raw_dim();
                    let (cin, h, wd) = (xdim[1], xdim[2], xdim[3]);
                    let wv = self.value(*w);
                    let w2d = wv
                        .view()
                        .into_shape_with_order((cout, cin * kernel * kernel))
                        .unwrap();
                    let g_cols = g_mat.dot(&w2d);
                    let gx = col2im_2d(&g_cols, n, cin, h, wd, *kernel, *stride, *pad, ho, wo);
                    self.accum(grads, *x, gx.into_dyn());
                }
            }
            Op::Conv1d { x, w, b, kernel, cols } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.rg(*b) {
                    self.accum(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
                if self.rg(*w) {
                    let gw2 = g2.t().dot(cols);
                    let wshape = self.value(*w).raw_dim();
                    self.accum(grads, *w, gw2.into_shape_with_order(wshape).unwrap());
                }
                if self.rg(*x) {
                    let xdim = self.value(*x).raw_dim();
                    let (t, c) = (xdim[0], xdim[1]);
                    let k = *kernel;
                    let pad = (k - 1) / 2;
                    let wv = self.value(*w).to_owned();
                    let w2d = wv.view().into_shape_with_order((wv.shape()[0], k * c)).unwrap().to_owned();
                    let g_cols = g2.dot(&w2d);
                    let mut gx = Array2::<f64>::zeros((t, c));
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize - pad as isize + j as isize;
                            if src >= 0 && (src as usize) < t {
                                let mut dst = gx.row_mut(src as usize);
                                let seg = g_cols.slice(ndarray::s![ti, j * c..(j + 1) * c]);
                                dst += &seg;
                            }
                        }
                    }
                    self.accum(grads, *x, gx.into_dyn());
                }
            }
            Op::MaxPool1d { x, pick } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (to, c) = g2.dim();
                let xdim = self.value(*x).raw_dim();
                let mut gx = Array2::<f64>::zeros((xdim[0], xdim[1]));
                for ti in 0..to {
                    for ci in 0..c {
                        gx[[pick[ti * c + ci], ci]] += g2[[ti, ci]];
                    }
                }
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::MeanSpatial { x } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xdim = self.value(*x).raw_dim();
                let (n, c, h, w) = (xdim[0], xdim[1], xdim[2], xdim[3]);
                let scale = 1.0 / (h * w) as f64;
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = g2[[ni, ci]] * scale;
                        gx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(v);
                    }
                }
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::SliceRows { x, start } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xdim = self.value(*x).raw_dim();
                let mut gx = Array2::<f64>::zeros((xdim[0], xdim[1]));
                gx.slice_mut(ndarray::s![*start..*start + g2.nrows(), ..])
                    .assign(&g2);
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::SliceCols { x, start } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xdim = self.value(*x).raw_dim();
                let mut gx = Array2::<f64>::zeros((xdim[0], xdim[1]));
                gx.slice_mut(ndarray::s![.., *start..*start + g2.ncols()])
                    .assign(&g2);
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::ConcatRows { parts } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut row = 0;
                for p in parts {
                    let n = self.value(*p).shape()[0];
                    let seg = g2.slice(ndarray::s![row..row + n, ..]).to_owned();
                    self.accum(grads, *p, seg.into_dyn());
                    row += n;
                }
            }
            Op::ConcatCols { parts } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut col = 0;
                for p in parts {
                    let n = self.value(*p).shape()[1];
                    let seg = g2.slice(ndarray::s![.., col..col + n]).to_owned();
                    self.accum(grads, *p, seg.into_dyn());
                    col += n;
                }
            }
            Op::ReverseRows(x) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let d = g2.slice(ndarray::s![..;-1, ..]).to_owned();
                self.accum(grads, *x, d.into_dyn());
            }
            Op::Transpose(x) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                self.accum(grads, *x, g2.t().to_owned().into_dyn());
            }
            Op::TokensFromFeat { x } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xdim = self.value(*x).raw_dim();
                let (t, c, h, w) = (xdim[0], xdim[1], xdim[2], xdim[3]);
                let mut gx = Array4::<f64>::zeros((t, c, h, w));
                for ti in 0..t {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                gx[[ti, ci, hi, wi]] = g2[[(ti * h + hi) * w + wi, ci]];
                            }
                        }
                    }
                }
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::FeatFromTokens { x, shape } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let [t, c, h, w] = *shape;
                let mut gx = Array2::<f64>::zeros((t * h * w, c));
                for ti in 0..t {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                gx[[(ti * h + hi) * w + wi, ci]] = g4[[ti, ci, hi, wi]];
                            }
                        }
                    }
                }
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::SparseMatMul { x, adj } => {
                // The normalized adjacency is symmetric, so transpose = self.
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let d = adj.matmul(&g2.view());
                self.accum(grads, *x, d.into_dyn());
            }
            Op::FusedLoss { x, grad } => {
                let s = *g.iter().next().unwrap();
                self.accum(grads, *x, grad * s);
            }
            Op::WeightedSum { terms } => {
                let s = *g.iter().next().unwrap();
                for (w, t) in terms {
                    if self.rg(*t) {
                        let mut d = ArrayD::zeros(self.value(*t).raw_dim());
                        d.fill(w * s);
                        self.accum(grads, *t, d);
                    }
                }
            }
        }
    }
}

fn im2col_2d(x: &Array4<f64>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (n, cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((n * ho * wo, cin * k * k));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ni * ho + oy) * wo + ox;
                for ci in 0..cin {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx as usize >= w {
                                continue;
                            }
                            cols[[row, (ci * k + ky) * k + kx]] = x[[ni, ci, y as usize, xx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d(
    g_cols: &Array2<f64>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let mut gx = Array4::<f64>::zeros((n, cin, h, w));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ni * ho + oy) * wo + ox;
                for ci in 0..cin {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx as usize >= w {
                                continue;
                            }
                            gx[[ni, ci, y as usize, xx as usize]] += g_cols[[row, (ci * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Central finite differences of `f` at `point`, one entry per coordinate.
/// Lives here so both unit tests and the acceptance suite share one oracle.
pub fn finite_difference<F>(point: &mut [f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = point[i];
        point[i] = orig + step;
        let hi = f(point);
        point[i] = orig - step;
        let lo = f(point);
        point[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

/// Relative error with an absolute floor, for comparing analytic gradients
/// against finite differences near zero.
pub fn grad_rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-6);
    (analytic - fd).abs() / denom
}
