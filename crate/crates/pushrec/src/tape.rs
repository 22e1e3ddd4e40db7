//! Tape-based reverse-mode automatic differentiation over 2-D matrices.
//!
//! The policy network is a fixed graph, so the op set is small: dense matmul,
//! row broadcasts, row-wise normalization/softmax, pointwise nonlinearities,
//! a fused causal multi-head attention op, and a few reductions. Values are
//! `ndarray::Array2`; vectors are 1-by-n rows. The engine is generic over the
//! scalar type: the training pipeline runs in `f32`, gradient-checking tests
//! instantiate `f64`.
//!
//! Determinism contract: every op produces bitwise-identical results for a
//! given input regardless of the rayon thread count. Matmuls are split into
//! fixed 64-row blocks (each block is one single-threaded gemm call), the
//! attention op parallelizes over samples with disjoint outputs, and all
//! reductions are sequential.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::slice::ParallelSliceMut;

pub type Mat<T> = Array2<T>;

/// Scalar type the engine runs on.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Row-block size for the deterministic parallel matmul. Fixed so results do
/// not depend on how many rayon workers happen to exist.
const MATMUL_BLOCK: usize = 64;

/// C = A * B with fixed row blocking. Each block is an independent gemm over
/// disjoint output rows, so the result is bitwise stable across thread counts.
pub fn matmul_det<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Mat<T> {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
    let mut c = Mat::<T>::zeros((a.nrows(), b.ncols()));
    if a.nrows() <= MATMUL_BLOCK {
        general_mat_mul(T::one(), &a, &b, T::zero(), &mut c.view_mut());
        return c;
    }
    c.axis_chunks_iter_mut(Axis(0), MATMUL_BLOCK)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), MATMUL_BLOCK).into_par_iter())
        .for_each(|(mut cb, ab)| {
            general_mat_mul(T::one(), &ab, &b, T::zero(), &mut cb);
        });
    c
}


/// Elementwise binary op into a fresh matrix via contiguous slices.
fn ew_binary<T: Real>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    assert_eq!(a.dim(), b.dim());
    let mut out = Mat::<T>::zeros(a.dim());
    let (oa, ab, bb) = (
        out.as_slice_mut().expect("standard layout"),
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
    );
    for i in 0..oa.len() {
        oa[i] = f(ab[i], bb[i]);
    }
    out
}

/// Row-broadcast binary op: b is 1 x n applied to every row of a.
fn ew_row_broadcast<T: Real>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    assert_eq!(b.nrows(), 1);
    assert_eq!(a.ncols(), b.ncols());
    let n = a.ncols();
    let mut out = Mat::<T>::zeros(a.dim());
    let ob = out.as_slice_mut().expect("standard layout");
    let ab = a.as_slice().expect("standard layout");
    let bb = b.as_slice().expect("standard layout");
    for r in 0..a.nrows() {
        let base = r * n;
        for c in 0..n {
            ob[base + c] = f(ab[base + c], bb[c]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Real> {
    Leaf,
    /// C = A * B
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = a + row (1 x n broadcast over rows)
    AddRow(NodeId, NodeId),
    /// y = a * row (1 x n broadcast over rows)
    MulRow(NodeId, NodeId),
    /// y = mul * a + add, elementwise constants
    Affine(NodeId, T, T),
    /// y = a + s, s a 1x1 node broadcast everywhere
    AddBScalar(NodeId, NodeId),
    /// y = a + p tiled vertically; p has a.nrows()/reps rows
    AddTileRows(NodeId, NodeId, usize),
    /// per-row standardization (x - mean) / sqrt(var + eps); aux = 1/std per row
    RowNorm(NodeId, Vec<T>),
    /// x * sigmoid(1.702 x); aux caches the sigmoid values
    Gelu(NodeId, Mat<T>),
    Tanh(NodeId),
    Logistic(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Clamp(NodeId, T, T),
    Min2(NodeId, NodeId),
    /// row-wise softmax with max subtraction
    SoftmaxRows(NodeId),
    /// per-row entropy -sum p ln p (inputs assumed on the simplex), output B x 1
    EntropyRows(NodeId),
    /// fused causal multi-head self-attention over stacked samples;
    /// aux = per (sample, head) attention weights
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq: usize,
        heads: usize,
        attn: Vec<Mat<T>>,
    },
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// pick rows offset, offset+stride, ... (final-timestep readout)
    RowsEvery(NodeId, usize, usize),
    /// B x n -> B x 1, sum across each row
    SumCols(NodeId),
    /// B x n -> 1 x n, mean of each column
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node<T: Real> {
    op: Op<T>,
    value: Mat<T>,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to tape nodes.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
/// Sigmoid-approximation coefficient for GELU.
const GELU_ALPHA: f64 = 1.702;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non 1x1 node");
        v[(0, 0)]
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Mat<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_det(self.value(a).view(), self.value(b).view());
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(self.value(a), self.value(b), |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(self.value(a), self.value(b), |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(self.value(a), self.value(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = ew_row_broadcast(self.value(a), self.value(row), |x, y| x + y);
        let g = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), v, g)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = ew_row_broadcast(self.value(a), self.value(row), |x, y| x * y);
        let g = self.ng(a) || self.ng(row);
        self.push(Op::MulRow(a, row), v, g)
    }

    pub fn affine(&mut self, a: NodeId, mul: T, add: T) -> NodeId {
        let v = self.value(a).mapv(|x| mul * x + add);
        let g = self.ng(a);
        self.push(Op::Affine(a, mul, add), v, g)
    }

    pub fn scale(&mut self, a: NodeId, mul: T) -> NodeId {
        self.affine(a, mul, T::zero())
    }

    pub fn add_bscalar(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        assert_eq!(self.value(scalar).dim(), (1, 1));
        let sv = self.value(scalar)[(0, 0)];
        let v = self.value(a).mapv(|x| x + sv);
        let g = self.ng(a) || self.ng(scalar);
        self.push(Op::AddBScalar(a, scalar), v, g)
    }

    /// y = a + p repeated vertically `reps` times (positional codes over a
    /// stacked batch).
    pub fn add_tile_rows(&mut self, a: NodeId, p: NodeId) -> NodeId {
        let pv_rows = self.value(p).nrows();
        let av_rows = self.value(a).nrows();
        assert!(pv_rows > 0 && av_rows % pv_rows == 0, "tile shape mismatch");
        assert_eq!(self.value(p).ncols(), self.value(a).ncols());
        let reps = av_rows / pv_rows;
        let mut v = self.value(a).clone();
        let pv = self.value(p);
        for r in 0..av_rows {
            let pr = r % pv_rows;
            for c in 0..v.ncols() {
                v[(r, c)] += pv[(pr, c)];
            }
        }
        let g = self.ng(a) || self.ng(p);
        self.push(Op::AddTileRows(a, p, reps), v, g)
    }

    /// Per-row (x - mean) / sqrt(var + eps). Layer-norm core; apply gain/bias
    /// with `mul_row`/`add_row`.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let ncols = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut v = Mat::<T>::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        {
            let xs = x.as_slice().expect("standard layout");
            let vs = v.as_slice_mut().expect("standard layout");
            for r in 0..rows {
                let seg = &xs[r * cols..(r + 1) * cols];
                let mut mean = T::zero();
                for &e in seg {
                    mean += e;
                }
                mean /= ncols;
                let mut var = T::zero();
                for &e in seg {
                    var += (e - mean) * (e - mean);
                }
                var /= ncols;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                let out = &mut vs[r * cols..(r + 1) * cols];
                for (o, &e) in out.iter_mut().zip(seg) {
                    *o = (e - mean) * is;
                }
            }
        }
        let g = self.ng(a);
        self.push(Op::RowNorm(a, inv_std), v, g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let alpha = T::of(GELU_ALPHA);
        let mut sig = Mat::<T>::zeros(x.dim());
        let mut v = Mat::<T>::zeros(x.dim());
        {
            let xs = x.as_slice().expect("standard layout");
            let ss = sig.as_slice_mut().expect("standard layout");
            let vs = v.as_slice_mut().expect("standard layout");
            for i in 0..xs.len() {
                let sg = T::one() / (T::one() + (-alpha * xs[i]).exp());
                ss[i] = sg;
                vs[i] = xs[i] * sg;
            }
        }
        let g = self.ng(a);
        self.push(Op::Gelu(a, sig), v, g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.tanh());
        let g = self.ng(a);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn logistic(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(logistic_fwd);
        let g = self.ng(a);
        self.push(Op::Logistic(a), v, g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.exp());
        let g = self.ng(a);
        self.push(Op::Exp(a), v, g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let g = self.ng(a);
        self.push(Op::Relu(a), v, g)
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(a).mapv(|x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        });
        let g = self.ng(a);
        self.push(Op::Clamp(a, lo, hi), v, g)
    }

    pub fn min2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.dim(), bv.dim());
        let mut v = av.clone();
        v.zip_mut_with(bv, |x, &y| {
            if y < *x {
                *x = y
            }
        });
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Min2(a, b), v, g)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            softmax_row_inplace(&mut row);
        }
        let g = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, g)
    }

    /// Per-row entropy -sum_k p ln p, output B x 1. Entries of p that are
    /// exactly zero contribute zero.
    pub fn entropy_rows(&mut self, p: NodeId) -> NodeId {
        let x = self.value(p);
        let rows = x.nrows();
        let mut v = Mat::<T>::zeros((rows, 1));
        for r in 0..rows {
            let mut h = T::zero();
            for &pk in x.row(r) {
                h -= xlnx(pk);
            }
            v[(r, 0)] = h;
        }
        let g = self.ng(p);
        self.push(Op::EntropyRows(p), v, g)
    }

    /// Fused causal multi-head self-attention. `q`, `k`, `v` are stacked
    /// (batch * seq) x d with d = heads * d_k; rows [i*seq, (i+1)*seq) belong
    /// to sample i. Scores are scaled by 1/sqrt(d_k), masked lower-triangular,
    /// and softmaxed per query row.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq: usize,
        heads: usize,
    ) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (rows, d) = qv.dim();
        assert_eq!(kv.dim(), (rows, d));
        assert_eq!(vv.dim(), (rows, d));
        assert_eq!(rows % seq, 0, "stacked rows not a multiple of seq");
        assert_eq!(d % heads, 0, "embed dim not divisible by heads");
        let batch = rows / seq;
        let dk = d / heads;
        let scale = T::one() / T::of(dk as f64).sqrt();

        let mut out = Mat::<T>::zeros((rows, d));
        let mut attn: Vec<Mat<T>> = vec![Mat::zeros((0, 0)); batch * heads];

        // Each sample writes disjoint output rows and attn slots.
        out.axis_chunks_iter_mut(Axis(0), seq)
            .into_par_iter()
            .zip(attn.par_chunks_mut(heads))
            .enumerate()
            .for_each(|(b, (mut ob, attn_b))| {
                let r0 = b * seq;
                for h in 0..heads {
                    let c0 = h * dk;
                    let qh = qv.slice(s![r0..r0 + seq, c0..c0 + dk]);
                    let kh = kv.slice(s![r0..r0 + seq, c0..c0 + dk]);
                    let vh = vv.slice(s![r0..r0 + seq, c0..c0 + dk]);
                    let mut scores = Mat::<T>::zeros((seq, seq));
                    general_mat_mul(scale, &qh, &kh.t(), T::zero(), &mut scores);
                    // causal mask + row softmax over columns <= row index
                    for i in 0..seq {
                        let mut mx = scores[(i, 0)];
                        for j in 1..=i {
                            if scores[(i, j)] > mx {
                                mx = scores[(i, j)];
                            }
                        }
                        let mut z = T::zero();
                        for j in 0..=i {
                            let e = (scores[(i, j)] - mx).exp();
                            scores[(i, j)] = e;
                            z += e;
                        }
                        for j in 0..=i {
                            scores[(i, j)] /= z;
                        }
                        for j in i + 1..seq {
                            scores[(i, j)] = T::zero();
                        }
                    }
                    let mut oh = ob.slice_mut(s![.., c0..c0 + dk]);
                    general_mat_mul(T::one(), &scores.view(), &vh, T::zero(), &mut oh);
                    attn_b[h] = scores;
                }
            });

        let g = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Op::CausalAttention {
                q,
                k,
                v,
                seq,
                heads,
                attn,
            },
            out,
            g,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let g = self.ng(a);
        self.push(Op::SliceCols(a, start, len), v, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Mat::<T>::zeros((rows, total));
        let mut c = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows);
            v.slice_mut(s![.., c..c + pv.ncols()]).assign(pv);
            c += pv.ncols();
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, g)
    }

    /// Select rows offset, offset+stride, offset+2*stride, ...
    pub fn rows_every(&mut self, a: NodeId, stride: usize, offset: usize) -> NodeId {
        let x = self.value(a);
        let n = (x.nrows() - offset).div_ceil(stride);
        let mut v = Mat::<T>::zeros((n, x.ncols()));
        for i in 0..n {
            v.row_mut(i).assign(&x.row(offset + i * stride));
        }
        let g = self.ng(a);
        self.push(Op::RowsEvery(a, stride, offset), v, g)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = Mat::<T>::zeros((x.nrows(), 1));
        for (r, row) in x.rows().into_iter().enumerate() {
            v[(r, 0)] = row.iter().copied().sum();
        }
        let g = self.ng(a);
        self.push(Op::SumCols(a), v, g)
    }

    /// Column means: B x n -> 1 x n.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let nr = T::of(x.nrows() as f64);
        let mut v = Mat::<T>::zeros((1, x.ncols()));
        for c in 0..x.ncols() {
            let mut acc = T::zero();
            for r in 0..x.nrows() {
                acc += x[(r, c)];
            }
            v[(0, c)] = acc / nr;
        }
        let g = self.ng(a);
        self.push(Op::MeanRows(a), v, g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let s: T = x.iter().copied().sum();
        let g = self.ng(a);
        self.push(Op::SumAll(a), Mat::from_elem((1, 1), s), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = T::of(x.len() as f64);
        let s: T = x.iter().copied().sum::<T>() / n;
        let g = self.ng(a);
        self.push(Op::MeanAll(a), Mat::from_elem((1, 1), s), g)
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), T::one()));

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let da = matmul_det(g.view(), self.value(*b).t());
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = matmul_det(self.value(*a).t(), g.view());
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, ew_binary(g, self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, ew_binary(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    accumulate(grads, *row, sum_over_rows(g));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    accumulate(
                        grads,
                        *a,
                        ew_row_broadcast(g, self.value(*row), |x, y| x * y),
                    );
                }
                if self.ng(*row) {
                    let prod = ew_binary(g, self.value(*a), |x, y| x * y);
                    accumulate(grads, *row, sum_over_rows(&prod));
                }
            }
            Op::Affine(a, mul, _) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.mapv(|x| x * *mul));
                }
            }
            Op::AddBScalar(a, scalar) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*scalar) {
                    let s: T = g.iter().copied().sum();
                    accumulate(grads, *scalar, Mat::from_elem((1, 1), s));
                }
            }
            Op::AddTileRows(a, p, reps) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*p) {
                    let p_rows = g.nrows() / reps;
                    let mut dp = Mat::<T>::zeros((p_rows, g.ncols()));
                    for r in 0..g.nrows() {
                        let pr = r % p_rows;
                        for c in 0..g.ncols() {
                            dp[(pr, c)] += g[(r, c)];
                        }
                    }
                    accumulate(grads, *p, dp);
                }
            }
            Op::RowNorm(a, inv_std) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let (rows, cols) = y.dim();
                    let nc = T::of(cols as f64);
                    let mut da = Mat::<T>::zeros((rows, cols));
                    let ds = da.as_slice_mut().expect("standard layout");
                    let ys = y.as_slice().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    for r in 0..rows {
                        let seg = r * cols..(r + 1) * cols;
                        let (gr, yr) = (&gs[seg.clone()], &ys[seg.clone()]);
                        let mut gm = T::zero();
                        let mut gym = T::zero();
                        for c in 0..cols {
                            gm += gr[c];
                            gym += gr[c] * yr[c];
                        }
                        gm /= nc;
                        gym /= nc;
                        let dr = &mut ds[seg];
                        for c in 0..cols {
                            dr[c] = inv_std[r] * (gr[c] - gm - yr[c] * gym);
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Gelu(a, sig) => {
                if self.ng(*a) {
                    let alpha = T::of(GELU_ALPHA);
                    let x = self.value(*a);
                    let mut da = Mat::<T>::zeros(x.dim());
                    let ds = da.as_slice_mut().expect("standard layout");
                    let xs = x.as_slice().expect("standard layout");
                    let ss = sig.as_slice().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    for i in 0..ds.len() {
                        let sg = ss[i];
                        ds[i] = gs[i] * (sg + alpha * xs[i] * sg * (T::one() - sg));
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Tanh(a) => {
                if self.ng(*a) {
                    let mut da = node.value.mapv(|y| T::one() - y * y);
                    da *= g;
                    accumulate(grads, *a, da);
                }
            }
            Op::Logistic(a) => {
                if self.ng(*a) {
                    let mut da = node.value.mapv(|y| y * (T::one() - y));
                    da *= g;
                    accumulate(grads, *a, da);
                }
            }
            Op::Exp(a) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g * &node.value);
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let x = self.value(*a);
                    let mut da = g.clone();
                    da.zip_mut_with(x, |d, &xi| {
                        if xi <= T::zero() {
                            *d = T::zero()
                        }
                    });
                    accumulate(grads, *a, da);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.ng(*a) {
                    let x = self.value(*a);
                    let mut da = g.clone();
                    da.zip_mut_with(x, |d, &xi| {
                        if xi < *lo || xi > *hi {
                            *d = T::zero()
                        }
                    });
                    accumulate(grads, *a, da);
                }
            }
            Op::Min2(a, b) => {
                // ties route the gradient to the first argument
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for ((d, &x), &y) in da.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        if y < x {
                            *d = T::zero();
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = g.clone();
                    for ((d, &x), &y) in db.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        if y >= x {
                            *d = T::zero();
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let p = &node.value;
                    let (rows, cols) = p.dim();
                    let mut da = Mat::<T>::zeros((rows, cols));
                    for r in 0..rows {
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot += g[(r, c)] * p[(r, c)];
                        }
                        for c in 0..cols {
                            da[(r, c)] = p[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::EntropyRows(p) => {
                if self.ng(*p) {
                    let pv = self.value(*p);
                    let (rows, cols) = pv.dim();
                    // representable in f32; keeps ln(p) bounded when the
                    // softmax underflows to exact zero
                    let tiny = T::of(1e-30);
                    let mut dp = Mat::<T>::zeros((rows, cols));
                    for r in 0..rows {
                        let gr = g[(r, 0)];
                        for c in 0..cols {
                            let pk = if pv[(r, c)] > tiny { pv[(r, c)] } else { tiny };
                            dp[(r, c)] = -gr * (pk.ln() + T::one());
                        }
                    }
                    accumulate(grads, *p, dp);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq,
                heads,
                attn,
            } => {
                let (seq, heads) = (*seq, *heads);
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (rows, d) = qv.dim();
                let dk = d / heads;
                let scale = T::one() / T::of(dk as f64).sqrt();

                let mut dq = Mat::<T>::zeros((rows, d));
                let mut dk_m = Mat::<T>::zeros((rows, d));
                let mut dv = Mat::<T>::zeros((rows, d));

                dq.axis_chunks_iter_mut(Axis(0), seq)
                    .into_par_iter()
                    .zip(dk_m.axis_chunks_iter_mut(Axis(0), seq).into_par_iter())
                    .zip(dv.axis_chunks_iter_mut(Axis(0), seq).into_par_iter())
                    .enumerate()
                    .for_each(|(b, ((mut dqb, mut dkb), mut dvb))| {
                        let r0 = b * seq;
                        for h in 0..heads {
                            let c0 = h * dk;
                            let a = &attn[b * heads + h];
                            let qh = qv.slice(s![r0..r0 + seq, c0..c0 + dk]);
                            let kh = kv.slice(s![r0..r0 + seq, c0..c0 + dk]);
                            let vh = vv.slice(s![r0..r0 + seq, c0..c0 + dk]);
                            let gh = g.slice(s![r0..r0 + seq, c0..c0 + dk]);

                            // dV = A^T g
                            let mut dvh = dvb.slice_mut(s![.., c0..c0 + dk]);
                            general_mat_mul(T::one(), &a.t(), &gh, T::zero(), &mut dvh);
                            // dA = g V^T
                            let mut da = Mat::<T>::zeros((seq, seq));
                            general_mat_mul(T::one(), &gh, &vh.t(), T::zero(), &mut da);
                            // softmax backward per row (masked cols have a=0)
                            let mut ds = Mat::<T>::zeros((seq, seq));
                            for i in 0..seq {
                                let mut dot = T::zero();
                                for j in 0..=i {
                                    dot += da[(i, j)] * a[(i, j)];
                                }
                                for j in 0..=i {
                                    ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
                                }
                            }
                            // dQ = scale * dS K ; dK = scale * dS^T Q
                            let mut dqh = dqb.slice_mut(s![.., c0..c0 + dk]);
                            general_mat_mul(scale, &ds.view(), &kh, T::zero(), &mut dqh);
                            let mut dkh = dkb.slice_mut(s![.., c0..c0 + dk]);
                            general_mat_mul(scale, &ds.t(), &qh, T::zero(), &mut dkh);
                        }
                    });

                if self.ng(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.ng(*k) {
                    accumulate(grads, *k, dk_m);
                }
                if self.ng(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut da = Mat::<T>::zeros(av.dim());
                    da.slice_mut(s![.., *start..*start + *len]).assign(g);
                    accumulate(grads, *a, da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice(s![.., c..c + w]).to_owned());
                    }
                    c += w;
                }
            }
            Op::RowsEvery(a, stride, offset) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut da = Mat::<T>::zeros(av.dim());
                    for i in 0..g.nrows() {
                        da.row_mut(offset + i * stride).assign(&g.row(i));
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::SumCols(a) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut da = Mat::<T>::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let gr = g[(r, 0)];
                        da.row_mut(r).fill(gr);
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::MeanRows(a) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let nr = T::of(av.nrows() as f64);
                    let mut da = Mat::<T>::zeros(av.dim());
                    for r in 0..av.nrows() {
                        for c in 0..av.ncols() {
                            da[(r, c)] = g[(0, c)] / nr;
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::SumAll(a) => {
                if self.ng(*a) {
                    let gv = g[(0, 0)];
                    accumulate(grads, *a, Mat::from_elem(self.value(*a).dim(), gv));
                }
            }
            Op::MeanAll(a) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let gv = g[(0, 0)] / T::of(av.len() as f64);
                    accumulate(grads, *a, Mat::from_elem(av.dim(), gv));
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Mat<T>>], id: NodeId, g: Mat<T>) {
    match &mut grads[id.0] {
        Some(acc) => {
            let a = acc.as_slice_mut().expect("standard layout");
            let b = g.as_slice().expect("standard layout");
            for i in 0..a.len() {
                a[i] += b[i];
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn sum_over_rows<T: Real>(m: &Mat<T>) -> Mat<T> {
    let n = m.ncols();
    let mut out = Mat::<T>::zeros((1, n));
    let os = out.as_slice_mut().expect("standard layout");
    let ms = m.as_slice().expect("standard layout");
    for r in 0..m.nrows() {
        let seg = &ms[r * n..(r + 1) * n];
        for c in 0..n {
            os[c] += seg[c];
        }
    }
    out
}

fn softmax_row_inplace<T: Real>(row: &mut ndarray::ArrayViewMut1<T>) {
    let mut mx = row[0];
    for &x in row.iter() {
        if x > mx {
            mx = x;
        }
    }
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn xlnx<T: Real>(p: T) -> T {
    if p > T::zero() {
        p * p.ln()
    } else {
        T::zero()
    }
}

/// GELU, sigmoid approximation: x * sigmoid(1.702 x).
pub fn gelu_fwd<T: Real>(x: T) -> T {
    x * logistic_fwd(T::of(GELU_ALPHA) * x)
}

pub fn logistic_fwd<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randmat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of d(sum of some scalar loss)/d(leaf) for a
    /// graph builder. The builder must produce a 1x1 loss from the given leaf
    /// values.
    fn check_grad<F>(leaves: Vec<Mat<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let ga = grads.get(ids[li]).expect("missing grad");
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let mut lp = leaves.clone();
                    lp[li][(r, c)] += h;
                    let mut tp = Tape::new();
                    let idp: Vec<NodeId> = lp.iter().map(|l| tp.leaf(l.clone(), true)).collect();
                    let loss_p = build(&mut tp, &idp);
                    let fp = tp.scalar(loss_p);

                    let mut lm = leaves.clone();
                    lm[li][(r, c)] -= h;
                    let mut tm = Tape::new();
                    let idm: Vec<NodeId> = lm.iter().map(|l| tm.leaf(l.clone(), true)).collect();
                    let loss_m = build(&mut tm, &idm);
                    let fm = tm.scalar(loss_m);

                    let gn = (fp - fm) / (2.0 * h);
                    let diff = (ga[(r, c)] - gn).abs();
                    let denom = ga[(r, c)].abs().max(gn.abs()).max(1e-3);
                    assert!(
                        diff / denom < 1e-5,
                        "leaf {li} ({r},{c}): analytic {} vs numeric {}",
                        ga[(r, c)],
                        gn
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_chain_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randmat(&mut rng, 3, 4);
        let b = randmat(&mut rng, 4, 5);
        check_grad(vec![a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1]);
            let g = t.gelu(c);
            t.sum_all(g)
        });
    }

    #[test]
    fn rownorm_softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randmat(&mut rng, 4, 6);
        check_grad(vec![a], |t, ids| {
            let n = t.row_norm(ids[0]);
            let p = t.softmax_rows(n);
            let e = t.entropy_rows(p);
            t.mean_all(e)
        });
    }

    #[test]
    fn pointwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randmat(&mut rng, 3, 5);
        let row = randmat(&mut rng, 1, 5);
        check_grad(vec![a, row], |t, ids| {
            let m = t.mul_row(ids[0], ids[1]);
            let m = t.add_row(m, ids[1]);
            let th = t.tanh(m);
            let lg = t.logistic(th);
            let sc = t.sum_cols(lg);
            let mr = t.mean_rows(sc);
            t.sum_all(mr)
        });
    }

    #[test]
    fn min_clamp_relu_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // keep values away from the kinks
        let a = randmat(&mut rng, 4, 4).mapv(|x| x * 2.0);
        let b = randmat(&mut rng, 4, 4).mapv(|x| x * 2.0 + 0.13);
        check_grad(vec![a, b], |t, ids| {
            let m = t.min2(ids[0], ids[1]);
            let c = t.clamp(m, -1.5, 1.5);
            let r = t.relu(c);
            t.mean_all(r)
        });
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randmat(&mut rng, 6, 4); // 2 samples, seq 3, 2 heads of dim 2
        let k = randmat(&mut rng, 6, 4);
        let v = randmat(&mut rng, 6, 4);
        check_grad(vec![q, k, v], |t, ids| {
            let o = t.causal_attention(ids[0], ids[1], ids[2], 3, 2);
            let g = t.tanh(o);
            t.sum_all(g)
        });
    }

    #[test]
    fn exp_sub_bscalar_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randmat(&mut rng, 3, 3);
        let b = randmat(&mut rng, 3, 3);
        let s = randmat(&mut rng, 1, 1);
        check_grad(vec![a, b, s], |t, ids| {
            let d = t.sub(ids[0], ids[1]);
            let e = t.exp(d);
            let f = t.add_bscalar(e, ids[2]);
            let g = t.affine(f, 0.7, -0.1);
            t.mean_all(g)
        });
    }

    #[test]
    fn add_tile_rows_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = randmat(&mut rng, 6, 3); // 2 reps of a 3-row tile
        let p = randmat(&mut rng, 3, 3);
        check_grad(vec![a, p], |t, ids| {
            let y = t.add_tile_rows(ids[0], ids[1]);
            let y = t.tanh(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn slice_concat_rows_every_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randmat(&mut rng, 6, 5);
        check_grad(vec![a], |t, ids| {
            let s1 = t.slice_cols(ids[0], 0, 2);
            let s2 = t.slice_cols(ids[0], 2, 3);
            let c = t.concat_cols(&[s2, s1]);
            let r = t.rows_every(c, 3, 2);
            let m = t.mul(r, r);
            t.sum_all(m)
        });
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = 5;
        let q = randmat(&mut rng, seq, 4);
        let k = randmat(&mut rng, seq, 4);
        let v = randmat(&mut rng, seq, 4);
        let mut tape = Tape::new();
        let (qi, ki, vi) = (
            tape.leaf(q, true),
            tape.leaf(k, true),
            tape.leaf(v, true),
        );
        let o = tape.causal_attention(qi, ki, vi, seq, 2);
        // pull attn weights out of the op
        if let Op::CausalAttention { attn, .. } = &tape.nodes[o.0].op {
            for a in attn {
                for i in 0..seq {
                    let row_sum: f64 = (0..seq).map(|j| a[(i, j)]).sum();
                    assert!((row_sum - 1.0).abs() < 1e-12);
                    for j in i + 1..seq {
                        assert_eq!(a[(i, j)], 0.0);
                    }
                }
            }
        } else {
            panic!("expected attention node");
        }
    }

    #[test]
    fn matmul_det_matches_reference_and_thread_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randmat(&mut rng, 200, 33);
        let b = randmat(&mut rng, 33, 17);
        let c1 = matmul_det(a.view(), b.view());
        // reference: plain per-element dot in k order
        for r in 0..200 {
            for c in 0..17 {
                let dot: f64 = (0..33).map(|k| a[(r, k)] * b[(k, c)]).sum();
                assert!((c1[(r, c)] - dot).abs() < 1e-12);
            }
        }
        // bitwise identical under a different thread pool size
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c2 = pool.install(|| matmul_det(a.view(), b.view()));
        assert_eq!(c1, c2);
    }
}
