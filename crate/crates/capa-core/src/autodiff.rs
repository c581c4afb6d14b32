//! Minimal reverse-mode differentiation engine.
//!
//! A [`Tape`] records matrix-granular operations on row-major f64 tensors;
//! [`Tape::backward`] walks the recorded graph once in reverse insertion
//! order (which is a reverse topological order, since operands always
//! precede their results) and accumulates gradients.
//!
//! The op set is exactly what the edge-update networks need: dense affine
//! maps, elementwise nonlinearities, sum-pooling over index sets, the
//! structured edge aggregations used by the graph layers, and scalar
//! plumbing for the power projection and the rate objective. Complex
//! quantities cross the engine as paired real channels; a helper implements
//! the 2-channel complex product.
//!
//! Batching convention: a batch of B graphs with K^2 edge rows each is one
//! `[B*K^2, C]` tensor; the structured edge ops take the edge count per
//! block and apply themselves blockwise.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of f64 (vectors are [n,1] or [1,n]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Index groups for sum-pooling: output row g is the sum of input rows in
/// `groups[g]`.
pub type PoolGroups = Rc<Vec<Vec<usize>>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddConst(NodeId, f64),
    ScaleConst(NodeId, f64),
    /// Y = X W^T with X [r, in], W [out, in].
    Linear(NodeId, NodeId),
    /// Y = A B.
    MatMul(NodeId, NodeId),
    /// [m, n] plus a [1, n] row broadcast over all rows.
    AddRowBroadcast(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    /// log2(1 + x)
    Log2OnePlus(NodeId),
    SumAll(NodeId),
    SumPool(NodeId, PoolGroups),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    /// Same data, different shape.
    Reshape(NodeId),
    /// Blockwise edge aggregations on [b*k^2, c] tensors (k = users per block).
    EdgeRowSum(NodeId, usize),
    EdgeColSum(NodeId, usize),
    EdgeTranspose(NodeId, usize),
    EdgeDiagBroadcastRow(NodeId, usize),
    EdgeDiagBroadcastCol(NodeId, usize),
    /// Multiply each block of `block_rows` rows by that block's scalar from
    /// a [b, 1] tensor.
    MulBlockScalar { x: NodeId, s: NodeId, block_rows: usize },
    /// y[r][c] = x[r][c] * col[r], col a [rows, 1] tensor.
    MulColBroadcast(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only compute graph confined to one worker for its lifetime.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zeros if the node is disconnected from the root.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(u, v)| u + v).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(u, v)| u - v).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(u, v)| u * v).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "div shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(u, v)| u / v).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, Op::Div(a, b))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let x = &self.nodes[a.0].value;
        let data = x.data.iter().map(|v| v + c).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, Op::AddConst(a, c))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let x = &self.nodes[a.0].value;
        let data = x.data.iter().map(|v| v * c).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(t, Op::ScaleConst(a, c))
    }

    /// Dense affine core: `Y = X W^T`, X [r, in], W [out, in].
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(xv.cols, wv.cols, "linear in-dim mismatch");
        let (r, out, inn) = (xv.rows, wv.rows, wv.cols);
        let mut y = Tensor::zeros(r, out);
        for i in 0..r {
            let xr = &xv.data[i * inn..(i + 1) * inn];
            let yr = &mut y.data[i * out..(i + 1) * out];
            for o in 0..out {
                let wr = &wv.data[o * inn..(o + 1) * inn];
                let mut acc = 0.0;
                for (a, b) in xr.iter().zip(wr.iter()) {
                    acc += a * b;
                }
                yr[o] = acc;
            }
        }
        self.push(y, Op::Linear(x, w))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.cols, bv.rows, "matmul shape mismatch");
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut y = Tensor::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let coef = av.data[i * k + p];
                if coef == 0.0 {
                    continue;
                }
                let br = &bv.data[p * n..(p + 1) * n];
                let yr = &mut y.data[i * n..(i + 1) * n];
                for (yo, bo) in yr.iter_mut().zip(br.iter()) {
                    *yo += coef * bo;
                }
            }
        }
        self.push(y, Op::MatMul(a, b))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        assert_eq!(bv.rows, 1, "bias must be a row vector");
        assert_eq!(bv.cols, xv.cols, "bias width mismatch");
        let mut y = xv.clone();
        for i in 0..y.rows {
            for j in 0..y.cols {
                y.data[i * y.cols + j] += bv.data[j];
            }
        }
        self.push(y, Op::AddRowBroadcast(x, bias))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|v| v.tanh()).collect();
        let t = Tensor { rows: xv.rows, cols: xv.cols, data };
        self.push(t, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|v| v.max(0.0)).collect();
        let t = Tensor { rows: xv.rows, cols: xv.cols, data };
        self.push(t, Op::Relu(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|v| v * v).collect();
        let t = Tensor { rows: xv.rows, cols: xv.cols, data };
        self.push(t, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|v| v.sqrt()).collect();
        let t = Tensor { rows: xv.rows, cols: xv.cols, data };
        self.push(t, Op::Sqrt(x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|v| 1.0 / v).collect();
        let t = Tensor { rows: xv.rows, cols: xv.cols, data };
        self.push(t, Op::Recip(x))
    }

    pub fn log2_one_plus(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|v| (1.0 + v).log2()).collect();
        let t = Tensor { rows: xv.rows, cols: xv.cols, data };
        self.push(t, Op::Log2OnePlus(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Sum-pool over explicit index groups: output row g sums input rows
    /// `groups[g]`.
    pub fn sum_pool(&mut self, x: NodeId, groups: PoolGroups) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let cols = xv.cols;
        let mut y = Tensor::zeros(groups.len(), cols);
        for (g, rows) in groups.iter().enumerate() {
            let yr = &mut y.data[g * cols..(g + 1) * cols];
            for &r in rows {
                let xr = &xv.data[r * cols..(r + 1) * cols];
                for (a, b) in yr.iter_mut().zip(xr.iter()) {
                    *a += b;
                }
            }
        }
        self.push(y, Op::SumPool(x, groups))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.rows, y.rows, "concat row mismatch");
        let cols = x.cols + y.cols;
        let mut t = Tensor::zeros(x.rows, cols);
        for i in 0..x.rows {
            t.data[i * cols..i * cols + x.cols]
                .copy_from_slice(&x.data[i * x.cols..(i + 1) * x.cols]);
            t.data[i * cols + x.cols..(i + 1) * cols]
                .copy_from_slice(&y.data[i * y.cols..(i + 1) * y.cols]);
        }
        self.push(t, Op::ConcatCols(a, b))
    }

    /// Reinterpret the row-major data with a new shape of equal length.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), rows * cols, "reshape length mismatch");
        let t = Tensor { rows, cols, data: xv.data.clone() };
        self.push(t, Op::Reshape(x))
    }

    /// Columns `[start, end)` of x.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(start < end && end <= xv.cols, "slice out of range");
        let w = end - start;
        let mut y = Tensor::zeros(xv.rows, w);
        for i in 0..xv.rows {
            y.data[i * w..(i + 1) * w]
                .copy_from_slice(&xv.data[i * xv.cols + start..i * xv.cols + end]);
        }
        self.push(y, Op::SliceCols(x, start, end))
    }

    /// y_(b,(k,j)) = sum_i x_(b,(k,i)): row-group total broadcast back to
    /// every member edge.
    pub fn edge_row_sum(&mut self, x: NodeId, k: usize) -> NodeId {
        let y = edge_row_sum_apply(&self.nodes[x.0].value, k);
        self.push(y, Op::EdgeRowSum(x, k))
    }

    /// y_(b,(k,j)) = sum_i x_(b,(i,j)).
    pub fn edge_col_sum(&mut self, x: NodeId, k: usize) -> NodeId {
        let y = edge_col_sum_apply(&self.nodes[x.0].value, k);
        self.push(y, Op::EdgeColSum(x, k))
    }

    /// y_(b,(k,j)) = x_(b,(j,k)).
    pub fn edge_transpose(&mut self, x: NodeId, k: usize) -> NodeId {
        let y = edge_transpose_apply(&self.nodes[x.0].value, k);
        self.push(y, Op::EdgeTranspose(x, k))
    }

    /// y_(b,(k,j)) = x_(b,(k,k)).
    pub fn edge_diag_broadcast_row(&mut self, x: NodeId, k: usize) -> NodeId {
        let y = edge_diag_row_apply(&self.nodes[x.0].value, k);
        self.push(y, Op::EdgeDiagBroadcastRow(x, k))
    }

    /// y_(b,(k,j)) = x_(b,(j,j)).
    pub fn edge_diag_broadcast_col(&mut self, x: NodeId, k: usize) -> NodeId {
        let y = edge_diag_col_apply(&self.nodes[x.0].value, k);
        self.push(y, Op::EdgeDiagBroadcastCol(x, k))
    }

    /// Multiply each block of `block_rows` rows of `x` by the matching
    /// scalar in `s` ([blocks, 1]).
    pub fn mul_block_scalar(&mut self, x: NodeId, s: NodeId, block_rows: usize) -> NodeId {
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        assert_eq!(sv.cols, 1, "block scalars must be a column");
        assert_eq!(xv.rows, sv.rows * block_rows, "block count mismatch");
        let mut y = xv.clone();
        let cols = y.cols;
        for b in 0..sv.rows {
            let coef = sv.data[b];
            for v in &mut y.data[b * block_rows * cols..(b + 1) * block_rows * cols] {
                *v *= coef;
            }
        }
        self.push(y, Op::MulBlockScalar { x, s, block_rows })
    }

    /// Multiply every column of x by the per-row scalar in `col` ([rows, 1]).
    pub fn mul_col_broadcast(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let (xv, cv) = (&self.nodes[x.0].value, &self.nodes[col.0].value);
        assert_eq!(cv.cols, 1, "broadcast factor must be a column");
        assert_eq!(cv.rows, xv.rows, "row count mismatch");
        let mut y = xv.clone();
        for i in 0..y.rows {
            let coef = cv.data[i];
            for v in &mut y.data[i * y.cols..(i + 1) * y.cols] {
                *v *= coef;
            }
        }
        self.push(y, Op::MulColBroadcast(x, col))
    }

    /// 2-channel complex elementwise product:
    /// `(ar + j ai)(br + j bi) = (ar br - ai bi) + j(ar bi + ai br)`.
    pub fn complex_mul(&mut self, a: (NodeId, NodeId), b: (NodeId, NodeId)) -> (NodeId, NodeId) {
        let rr = self.mul(a.0, b.0);
        let ii = self.mul(a.1, b.1);
        let ri = self.mul(a.0, b.1);
        let ir = self.mul(a.1, b.0);
        (self.sub(rr, ii), self.add(ri, ir))
    }

    /// 2-channel complex matrix product.
    pub fn complex_matmul(&mut self, a: (NodeId, NodeId), b: (NodeId, NodeId)) -> (NodeId, NodeId) {
        let rr = self.matmul(a.0, b.0);
        let ii = self.matmul(a.1, b.1);
        let ri = self.matmul(a.0, b.1);
        let ir = self.matmul(a.1, b.0);
        (self.sub(rr, ii), self.add(ri, ir))
    }

    /// Reverse pass from a scalar root. Gradients of all reachable nodes
    /// are accumulated; each node is visited exactly once in reverse
    /// insertion order.
    pub fn backward(&self, root: NodeId) -> Grads {
        let rv = &self.nodes[root.0].value;
        assert_eq!(rv.shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.accumulate(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Grads { grads }
    }

    fn grad_slot<'a>(
        grads: &'a mut [Option<Tensor>],
        id: NodeId,
        shape: (usize, usize),
    ) -> &'a mut Tensor {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    fn accumulate(&self, id: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (d, s) in Self::grad_slot(grads, *a, self.nodes[a.0].value.shape())
                    .data
                    .iter_mut()
                    .zip(&gy.data)
                {
                    *d += s;
                }
                for (d, s) in Self::grad_slot(grads, *b, self.nodes[b.0].value.shape())
                    .data
                    .iter_mut()
                    .zip(&gy.data)
                {
                    *d += s;
                }
            }
            Op::Sub(a, b) => {
                for (d, s) in Self::grad_slot(grads, *a, self.nodes[a.0].value.shape())
                    .data
                    .iter_mut()
                    .zip(&gy.data)
                {
                    *d += s;
                }
                for (d, s) in Self::grad_slot(grads, *b, self.nodes[b.0].value.shape())
                    .data
                    .iter_mut()
                    .zip(&gy.data)
                {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                {
                    let bv = &self.nodes[b.0].value.data;
                    let ga = Self::grad_slot(grads, *a, self.nodes[a.0].value.shape());
                    for ((d, s), v) in ga.data.iter_mut().zip(&gy.data).zip(bv) {
                        *d += s * v;
                    }
                }
                let av = &self.nodes[a.0].value.data;
                let gb = Self::grad_slot(grads, *b, self.nodes[b.0].value.shape());
                for ((d, s), v) in gb.data.iter_mut().zip(&gy.data).zip(av) {
                    *d += s * v;
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                let yv = &node.value;
                {
                    let ga = Self::grad_slot(grads, *a, self.nodes[a.0].value.shape());
                    for ((d, s), v) in ga.data.iter_mut().zip(&gy.data).zip(&bv.data) {
                        *d += s / v;
                    }
                }
                let gb = Self::grad_slot(grads, *b, bv.shape());
                for (((d, s), y), v) in gb
                    .data
                    .iter_mut()
                    .zip(&gy.data)
                    .zip(&yv.data)
                    .zip(&bv.data)
                {
                    *d -= s * y / v;
                }
            }
            Op::AddConst(a, _) => {
                let ga = Self::grad_slot(grads, *a, self.nodes[a.0].value.shape());
                for (d, s) in ga.data.iter_mut().zip(&gy.data) {
                    *d += s;
                }
            }
            Op::ScaleConst(a, c) => {
                let ga = Self::grad_slot(grads, *a, self.nodes[a.0].value.shape());
                for (d, s) in ga.data.iter_mut().zip(&gy.data) {
                    *d += s * c;
                }
            }
            Op::Linear(x, w) => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (r, out, inn) = (xv.rows, wv.rows, wv.cols);
                {
                    // dX += dY W
                    let gx = Self::grad_slot(grads, *x, xv.shape());
                    for i in 0..r {
                        let gyr = &gy.data[i * out..(i + 1) * out];
                        let gxr = &mut gx.data[i * inn..(i + 1) * inn];
                        for (o, &coef) in gyr.iter().enumerate() {
                            if coef == 0.0 {
                                continue;
                            }
                            let wr = &wv.data[o * inn..(o + 1) * inn];
                            for (d, wval) in gxr.iter_mut().zip(wr.iter()) {
                                *d += coef * wval;
                            }
                        }
                    }
                }
                // dW += dY^T X
                let gw = Self::grad_slot(grads, *w, wv.shape());
                for i in 0..r {
                    let gyr = &gy.data[i * out..(i + 1) * out];
                    let xr = &xv.data[i * inn..(i + 1) * inn];
                    for (o, &coef) in gyr.iter().enumerate() {
                        if coef == 0.0 {
                            continue;
                        }
                        let gwr = &mut gw.data[o * inn..(o + 1) * inn];
                        for (d, xval) in gwr.iter_mut().zip(xr.iter()) {
                            *d += coef * xval;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, kk, n) = (av.rows, av.cols, bv.cols);
                {
                    // dA += dY B^T
                    let ga = Self::grad_slot(grads, *a, av.shape());
                    for i in 0..m {
                        let gyr = &gy.data[i * n..(i + 1) * n];
                        let gar = &mut ga.data[i * kk..(i + 1) * kk];
                        for p in 0..kk {
                            let br = &bv.data[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (g, bb) in gyr.iter().zip(br.iter()) {
                                acc += g * bb;
                            }
                            gar[p] += acc;
                        }
                    }
                }
                // dB += A^T dY
                let gb = Self::grad_slot(grads, *b, bv.shape());
                for i in 0..m {
                    let gyr = &gy.data[i * n..(i + 1) * n];
                    for p in 0..kk {
                        let coef = av.data[i * kk + p];
                        if coef == 0.0 {
                            continue;
                        }
                        let gbr = &mut gb.data[p * n..(p + 1) * n];
                        for (d, g) in gbr.iter_mut().zip(gyr.iter()) {
                            *d += coef * g;
                        }
                    }
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                {
                    let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                    for (d, s) in gx.data.iter_mut().zip(&gy.data) {
                        *d += s;
                    }
                }
                let gb = Self::grad_slot(grads, *bias, self.nodes[bias.0].value.shape());
                let cols = gy.cols;
                for i in 0..gy.rows {
                    for j in 0..cols {
                        gb.data[j] += gy.data[i * cols + j];
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = &node.value;
                let gx = Self::grad_slot(grads, *x, yv.shape());
                for ((d, s), y) in gx.data.iter_mut().zip(&gy.data).zip(&yv.data) {
                    *d += s * (1.0 - y * y);
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                let gx = Self::grad_slot(grads, *x, xv.shape());
                for ((d, s), v) in gx.data.iter_mut().zip(&gy.data).zip(&xv.data) {
                    if *v > 0.0 {
                        *d += s;
                    }
                }
            }
            Op::Square(x) => {
                let xv = &self.nodes[x.0].value;
                let gx = Self::grad_slot(grads, *x, xv.shape());
                for ((d, s), v) in gx.data.iter_mut().zip(&gy.data).zip(&xv.data) {
                    *d += s * 2.0 * v;
                }
            }
            Op::Sqrt(x) => {
                let yv = &node.value;
                let gx = Self::grad_slot(grads, *x, yv.shape());
                for ((d, s), y) in gx.data.iter_mut().zip(&gy.data).zip(&yv.data) {
                    *d += s * 0.5 / y;
                }
            }
            Op::Recip(x) => {
                let yv = &node.value;
                let gx = Self::grad_slot(grads, *x, yv.shape());
                for ((d, s), y) in gx.data.iter_mut().zip(&gy.data).zip(&yv.data) {
                    *d -= s * y * y;
                }
            }
            Op::Log2OnePlus(x) => {
                let xv = &self.nodes[x.0].value;
                let ln2 = std::f64::consts::LN_2;
                let gx = Self::grad_slot(grads, *x, xv.shape());
                for ((d, s), v) in gx.data.iter_mut().zip(&gy.data).zip(&xv.data) {
                    *d += s / ((1.0 + v) * ln2);
                }
            }
            Op::SumAll(x) => {
                let g = gy.data[0];
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for d in gx.data.iter_mut() {
                    *d += g;
                }
            }
            Op::SumPool(x, groups) => {
                let cols = gy.cols;
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for (g, rows) in groups.iter().enumerate() {
                    let gyr = &gy.data[g * cols..(g + 1) * cols];
                    for &r in rows {
                        let gxr = &mut gx.data[r * cols..(r + 1) * cols];
                        for (d, s) in gxr.iter_mut().zip(gyr.iter()) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.nodes[a.0].value.cols;
                let bc = self.nodes[b.0].value.cols;
                let cols = ac + bc;
                {
                    let ga = Self::grad_slot(grads, *a, self.nodes[a.0].value.shape());
                    for i in 0..gy.rows {
                        for j in 0..ac {
                            ga.data[i * ac + j] += gy.data[i * cols + j];
                        }
                    }
                }
                let gb = Self::grad_slot(grads, *b, self.nodes[b.0].value.shape());
                for i in 0..gy.rows {
                    for j in 0..bc {
                        gb.data[i * bc + j] += gy.data[i * cols + ac + j];
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for (d, s) in gx.data.iter_mut().zip(&gy.data) {
                    *d += s;
                }
            }
            Op::SliceCols(x, start, end) => {
                let xv = &self.nodes[x.0].value;
                let w = end - start;
                let gx = Self::grad_slot(grads, *x, xv.shape());
                let cols = gx.cols;
                for i in 0..gy.rows {
                    for j in 0..w {
                        gx.data[i * cols + start + j] += gy.data[i * w + j];
                    }
                }
            }
            Op::EdgeRowSum(x, k) => {
                let gx0 = edge_row_sum_apply(gy, *k);
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for (d, s) in gx.data.iter_mut().zip(&gx0.data) {
                    *d += s;
                }
            }
            Op::EdgeColSum(x, k) => {
                let gx0 = edge_col_sum_apply(gy, *k);
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for (d, s) in gx.data.iter_mut().zip(&gx0.data) {
                    *d += s;
                }
            }
            Op::EdgeTranspose(x, k) => {
                let gx0 = edge_transpose_apply(gy, *k);
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for (d, s) in gx.data.iter_mut().zip(&gx0.data) {
                    *d += s;
                }
            }
            Op::EdgeDiagBroadcastRow(x, k) => {
                // scatter: dX_(k,k) += sum_j dY_(k,j)
                let k = *k;
                let cols = gy.cols;
                let blocks = gy.rows / (k * k);
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for b in 0..blocks {
                    for kk in 0..k {
                        let diag = (b * k * k + kk * k + kk) * cols;
                        for j in 0..k {
                            let src = (b * k * k + kk * k + j) * cols;
                            for c in 0..cols {
                                gx.data[diag + c] += gy.data[src + c];
                            }
                        }
                    }
                }
            }
            Op::EdgeDiagBroadcastCol(x, k) => {
                // scatter: dX_(j,j) += sum_k dY_(k,j)
                let k = *k;
                let cols = gy.cols;
                let blocks = gy.rows / (k * k);
                let gx = Self::grad_slot(grads, *x, self.nodes[x.0].value.shape());
                for b in 0..blocks {
                    for j in 0..k {
                        let diag = (b * k * k + j * k + j) * cols;
                        for kk in 0..k {
                            let src = (b * k * k + kk * k + j) * cols;
                            for c in 0..cols {
                                gx.data[diag + c] += gy.data[src + c];
                            }
                        }
                    }
                }
            }
            Op::MulColBroadcast(x, col) => {
                let xv = &self.nodes[x.0].value;
                let cv = &self.nodes[col.0].value;
                let cols = xv.cols;
                {
                    let gx = Self::grad_slot(grads, *x, xv.shape());
                    for i in 0..xv.rows {
                        let coef = cv.data[i];
                        for (d, g) in gx.data[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&gy.data[i * cols..(i + 1) * cols])
                        {
                            *d += g * coef;
                        }
                    }
                }
                let gc = Self::grad_slot(grads, *col, cv.shape());
                for i in 0..xv.rows {
                    let mut acc = 0.0;
                    for (xval, g) in xv.data[i * cols..(i + 1) * cols]
                        .iter()
                        .zip(&gy.data[i * cols..(i + 1) * cols])
                    {
                        acc += xval * g;
                    }
                    gc.data[i] += acc;
                }
            }
            Op::MulBlockScalar { x, s, block_rows } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                let cols = xv.cols;
                {
                    let gx = Self::grad_slot(grads, *x, xv.shape());
                    for (b, &coef) in sv.data.iter().enumerate() {
                        let range = b * block_rows * cols..(b + 1) * block_rows * cols;
                        for (d, g) in gx.data[range.clone()].iter_mut().zip(&gy.data[range]) {
                            *d += g * coef;
                        }
                    }
                }
                let gs = Self::grad_slot(grads, *s, sv.shape());
                for b in 0..sv.rows {
                    let range = b * block_rows * cols..(b + 1) * block_rows * cols;
                    let mut acc = 0.0;
                    for (xval, g) in xv.data[range.clone()].iter().zip(&gy.data[range]) {
                        acc += xval * g;
                    }
                    gs.data[b] += acc;
                }
            }
        }
    }
}

fn edge_row_sum_apply(x: &Tensor, k: usize) -> Tensor {
    let cols = x.cols;
    let blocks = x.rows / (k * k);
    assert_eq!(blocks * k * k, x.rows, "rows not a multiple of k^2");
    let mut y = Tensor::zeros(x.rows, cols);
    let mut acc = vec![0.0; cols];
    for b in 0..blocks {
        for row_k in 0..k {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..k {
                let src = (b * k * k + row_k * k + i) * cols;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += x.data[src + c];
                }
            }
            for j in 0..k {
                let dst = (b * k * k + row_k * k + j) * cols;
                y.data[dst..dst + cols].copy_from_slice(&acc);
            }
        }
    }
    y
}

fn edge_col_sum_apply(x: &Tensor, k: usize) -> Tensor {
    let cols = x.cols;
    let blocks = x.rows / (k * k);
    assert_eq!(blocks * k * k, x.rows, "rows not a multiple of k^2");
    let mut y = Tensor::zeros(x.rows, cols);
    let mut acc = vec![0.0; cols];
    for b in 0..blocks {
        for col_j in 0..k {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..k {
                let src = (b * k * k + i * k + col_j) * cols;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += x.data[src + c];
                }
            }
            for i in 0..k {
                let dst = (b * k * k + i * k + col_j) * cols;
                y.data[dst..dst + cols].copy_from_slice(&acc);
            }
        }
    }
    y
}

fn edge_transpose_apply(x: &Tensor, k: usize) -> Tensor {
    let cols = x.cols;
    let blocks = x.rows / (k * k);
    assert_eq!(blocks * k * k, x.rows, "rows not a multiple of k^2");
    let mut y = Tensor::zeros(x.rows, cols);
    for b in 0..blocks {
        for i in 0..k {
            for j in 0..k {
                let src = (b * k * k + j * k + i) * cols;
                let dst = (b * k * k + i * k + j) * cols;
                y.data[dst..dst + cols].copy_from_slice(&x.data[src..src + cols]);
            }
        }
    }
    y
}

fn edge_diag_row_apply(x: &Tensor, k: usize) -> Tensor {
    let cols = x.cols;
    let blocks = x.rows / (k * k);
    assert_eq!(blocks * k * k, x.rows, "rows not a multiple of k^2");
    let mut y = Tensor::zeros(x.rows, cols);
    for b in 0..blocks {
        for kk in 0..k {
            let src = (b * k * k + kk * k + kk) * cols;
            for j in 0..k {
                let dst = (b * k * k + kk * k + j) * cols;
                y.data[dst..dst + cols].copy_from_slice(&x.data[src..src + cols]);
            }
        }
    }
    y
}

fn edge_diag_col_apply(x: &Tensor, k: usize) -> Tensor {
    let cols = x.cols;
    let blocks = x.rows / (k * k);
    assert_eq!(blocks * k * k, x.rows, "rows not a multiple of k^2");
    let mut y = Tensor::zeros(x.rows, cols);
    for b in 0..blocks {
        for j in 0..k {
            let src = (b * k * k + j * k + j) * cols;
            for kk in 0..k {
                let dst = (b * k * k + kk * k + j) * cols;
                y.data[dst..dst + cols].copy_from_slice(&x.data[src..src + cols]);
            }
        }
    }
    y
}

/// Weight and optional bias of one dense map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseParams {
    /// [out, in]
    pub weight: Tensor,
    /// [1, out]; empty tensor when the map is weight-only.
    pub bias: Tensor,
}

impl DenseParams {
    /// Scale-preserving init: uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
    pub fn init(out: usize, inn: usize, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::init_scaled(out, inn, with_bias, rng, 1.0)
    }

    /// Init with the effective fan-in widened by `fan_div`: maps that feed
    /// a sum-pooled update contribute `fan_div` times more variance than a
    /// lone dense map, so their bound shrinks accordingly to keep the
    /// summed pre-activation at unit scale.
    pub fn init_scaled(
        out: usize,
        inn: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
        fan_div: f64,
    ) -> Self {
        let bound = (1.0 / (inn as f64 * fan_div)).sqrt();
        let mut weight = Tensor::zeros(out, inn);
        for v in weight.data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        let bias = if with_bias {
            let mut b = Tensor::zeros(1, out);
            for v in b.data.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            b
        } else {
            Tensor::zeros(0, 0)
        };
        DenseParams { weight, bias }
    }

    pub fn has_bias(&self) -> bool {
        !self.bias.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Which update rule the trainer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    Adam,
    Sgd,
}

/// Optimizer state over a flat list of parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub rule: UpdateRule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(rule: UpdateRule, learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            rule,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    /// One update over aligned parameter/gradient lists.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step_count += 1;
        match self.rule {
            UpdateRule::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                        *pv -= self.learning_rate * gv;
                    }
                }
            }
            UpdateRule::Adam => {
                let t = self.step_count as f64;
                let bc1 = 1.0 - self.beta1.powf(t);
                let bc2 = 1.0 - self.beta2.powf(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
                {
                    assert_eq!(p.shape(), g.shape(), "adam shape mismatch");
                    for i in 0..p.data.len() {
                        let gv = g.data[i];
                        m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gv;
                        v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gv * gv;
                        let mhat = m.data[i] / bc1;
                        let vhat = v.data[i] / bc2;
                        p.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
            }
        }
    }
}

/// Central finite-difference gradient of `f` with respect to one tensor;
/// the independent oracle for every gradient check in the crate.
pub fn finite_difference<F>(param: &mut Tensor, h: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(param.rows, param.cols);
    for i in 0..param.data.len() {
        let orig = param.data[i];
        param.data[i] = orig + h;
        let fp = f(param);
        param.data[i] = orig - h;
        let fm = f(param);
        param.data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between an analytic and a finite-difference
/// gradient. Entries below the finite-difference noise floor (central
/// differences at h ~ 1e-5 on O(1) objectives resolve no better than
/// ~1e-10 absolute) compare against an absolute floor instead, so exactly
/// zero gradients are not measured against rounding noise.
pub fn gradient_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = analytic.max_abs().max(numeric.max_abs());
    let floor = 1e-6 * scale.max(1.0);
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(floor);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}
