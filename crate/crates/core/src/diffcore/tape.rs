use rayon::prelude::*;

use super::{DiffError, Matrix};

/// Row marker for [`Tape::blend`] entries that contribute nothing.
pub const SKIP_ROW: u32 = u32::MAX;

/// Work (multiply-adds) below which affine maps stay on one thread.
const PARALLEL_WORK: usize = 1 << 16;
/// Fixed row blocking for parallel reductions. Partial sums are combined in
/// block order, so results do not depend on the thread count.
const ROW_BLOCK: usize = 64;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which branch a straight-through node emits in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ForwardMode {
    /// Emit the hard branch (training and inference).
    #[default]
    Hard,
    /// Emit the soft branch; used to finite-difference the surrogate path.
    Soft,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    MatMul(NodeId, NodeId),
    Gather {
        src: NodeId,
        rows: Vec<u32>,
    },
    Blend {
        src: NodeId,
        fan: usize,
        rows: Vec<u32>,
        weights: Vec<f64>,
    },
    ConcatCols(NodeId, NodeId),
    Columns {
        src: NodeId,
        start: usize,
    },
    StraightThrough {
        hard: NodeId,
        soft: NodeId,
    },
    Composite {
        density: NodeId,
        rgb: NodeId,
        offsets: Vec<usize>,
        deltas: Vec<f64>,
        background: [f64; 3],
    },
    Sum(NodeId),
    WeightedSum {
        x: NodeId,
        weights: Matrix,
    },
    Mse {
        pred: NodeId,
        target: Matrix,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Gather { src: a, .. }
            | Op::Blend { src: a, .. }
            | Op::Columns { src: a, .. }
            | Op::WeightedSum { x: a, .. }
            | Op::Mse { pred: a, .. } => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ConcatCols(a, b) => {
                vec![*a, *b]
            }
            Op::StraightThrough { hard, soft } => vec![*hard, *soft],
            Op::Composite { density, rgb, .. } => vec![*density, *rgb],
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
    trainable: bool,
}

/// Append-only record of primitive operations with their forward values.
///
/// Nodes can only reference nodes recorded before them, so the recording
/// order is a valid topological order. [`Tape::backward`] walks it in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: ForwardMode,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a trainable leaf, or `None` when the loss does not
    /// depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: ForwardMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Matrix, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    /// `x · w (+ b)` with `x: n×p`, `w: p×q` and an optional `1×q` bias.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.rows(), "affine: inner dimensions differ");
        let mut out = matmul(xv, wv);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(
                bv.shape(),
                (1, wv.cols()),
                "affine: bias must be 1x{}",
                wv.cols()
            );
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        self.push(Op::Affine { x, w, b }, out)
    }

    /// Plain product `a · b`. Used for soft codebook mixing `softmax(C)·D`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul: inner dimensions differ");
        let out = matmul(av, bv);
        self.push(Op::MatMul(a, b), out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shapes differ");
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shapes differ");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        self.push(Op::Mul(a, b), out)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(x), out)
    }

    /// Row gather: output row `i` is `src[rows[i]]`.
    pub fn gather(&mut self, src: NodeId, rows: Vec<u32>) -> NodeId {
        let sv = self.value(src);
        let mut out = Matrix::zeros(rows.len(), sv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(sv.row(r as usize));
        }
        self.push(Op::Gather { src, rows }, out)
    }

    /// Weighted row blend: output row `i` is
    /// `Σ_c weights[i·fan + c] · src[rows[i·fan + c]]`, skipping [`SKIP_ROW`].
    /// This is the d-linear interpolation primitive.
    pub fn blend(&mut self, src: NodeId, fan: usize, rows: Vec<u32>, weights: Vec<f64>) -> NodeId {
        assert!(fan > 0, "blend: fan must be positive");
        assert_eq!(
            rows.len(),
            weights.len(),
            "blend: rows and weights differ in length"
        );
        assert_eq!(rows.len() % fan, 0, "blend: entries not a multiple of fan");
        let sv = self.value(src);
        let n = rows.len() / fan;
        let mut out = Matrix::zeros(n, sv.cols());
        for i in 0..n {
            let entries = &rows[i * fan..(i + 1) * fan];
            let ws = &weights[i * fan..(i + 1) * fan];
            blend_row(out.row_mut(i), sv, entries, ws);
        }
        self.push(
            Op::Blend {
                src,
                fan,
                rows,
                weights,
            },
            out,
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat: row counts differ");
        let cols = av.cols() + bv.cols();
        let mut out = Matrix::zeros(av.rows(), cols);
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        self.push(Op::ConcatCols(a, b), out)
    }

    /// Column slice `src[:, start..start+len]`.
    pub fn columns(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let sv = self.value(src);
        assert!(start + len <= sv.cols(), "columns: slice out of range");
        let mut out = Matrix::zeros(sv.rows(), len);
        for r in 0..sv.rows() {
            out.row_mut(r)
                .copy_from_slice(&sv.row(r)[start..start + len]);
        }
        self.push(Op::Columns { src, start }, out)
    }

    /// Straight-through substitution: emits `hard` forward (or `soft` in
    /// [`ForwardMode::Soft`]) and routes the whole upstream gradient to `soft`.
    pub fn straight_through(&mut self, hard: NodeId, soft: NodeId) -> NodeId {
        assert_eq!(
            self.value(hard).shape(),
            self.value(soft).shape(),
            "straight-through: branch shapes differ"
        );
        let out = match self.mode {
            ForwardMode::Hard => self.value(hard).clone(),
            ForwardMode::Soft => self.value(soft).clone(),
        };
        self.push(Op::StraightThrough { hard, soft }, out)
    }

    /// Emission-absorption compositing. `density` is `N×1`, `rgb` is `N×3`,
    /// ray `r` owns samples `offsets[r]..offsets[r+1]` with step lengths
    /// `deltas`. Output row `r` is `[R, G, B, opacity]` over `background`.
    pub fn composite(
        &mut self,
        density: NodeId,
        rgb: NodeId,
        offsets: Vec<usize>,
        deltas: Vec<f64>,
        background: [f64; 3],
    ) -> NodeId {
        let (dv, cv) = (self.value(density), self.value(rgb));
        assert_eq!(dv.cols(), 1, "composite: density must be Nx1");
        assert_eq!(cv.cols(), 3, "composite: rgb must be Nx3");
        assert_eq!(dv.rows(), cv.rows(), "composite: sample counts differ");
        assert_eq!(deltas.len(), dv.rows(), "composite: one delta per sample");
        assert!(!offsets.is_empty() && *offsets.last().unwrap() == dv.rows());
        let rays = offsets.len() - 1;
        let mut out = Matrix::zeros(rays, 4);
        for r in 0..rays {
            let span = offsets[r]..offsets[r + 1];
            let res = composite_samples(
                &dv.data()[span.clone()],
                &cv.data()[span.start * 3..span.end * 3],
                &deltas[span],
                background,
            );
            out.row_mut(r)[..3].copy_from_slice(&res.rgb);
            out.row_mut(r)[3] = res.opacity;
        }
        self.push(
            Op::Composite {
                density,
                rgb,
                offsets,
                deltas,
                background,
            },
            out,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Matrix::scalar(s))
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Matrix) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "weighted_sum: shapes differ");
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Op::WeightedSum { x, weights }, Matrix::scalar(s))
    }

    /// Mean squared error against a constant target, averaged over all
    /// elements.
    pub fn mse(&mut self, pred: NodeId, target: Matrix) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse: shapes differ");
        let n = pv.len().max(1) as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(Op::Mse { pred, target }, Matrix::scalar(s / n))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(DiffError::UnknownNode(loss.0));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(DiffError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(DiffError::CyclicTape {
                        node: idx,
                        input: input.0,
                    });
                }
            }
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| if node.trainable { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    accumulate(grads, *x, matmul_bt(g, wv));
                }
                if self.wants(*w) {
                    accumulate(grads, *w, matmul_at(xv, g));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, matmul_bt(g, bv));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, matmul_at(av, g));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Sigmoid(x) => {
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gg)| gg * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Exp(x) => {
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gg)| gg * e)
                    .collect();
                accumulate(grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = bv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(v, gg)| v * gg)
                        .collect();
                    accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if self.wants(*b) {
                    let d = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(v, gg)| v * gg)
                        .collect();
                    accumulate(grads, *b, Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { src, rows } => {
                let sv = self.value(*src);
                let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in ds.row_mut(r as usize).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *src, ds);
            }
            Op::Blend {
                src,
                fan,
                rows,
                weights,
            } => {
                let sv = self.value(*src);
                let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                for i in 0..g.rows() {
                    let gr = g.row(i);
                    for c in 0..*fan {
                        let r = rows[i * fan + c];
                        if r == SKIP_ROW {
                            continue;
                        }
                        let w = weights[i * fan + c];
                        for (o, v) in ds.row_mut(r as usize).iter_mut().zip(gr) {
                            *o += w * v;
                        }
                    }
                }
                accumulate(grads, *src, ds);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                if self.wants(*a) {
                    let mut da = Matrix::zeros(g.rows(), ac);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Columns { src, start } => {
                let sv = self.value(*src);
                let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                for r in 0..g.rows() {
                    ds.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *src, ds);
            }
            Op::StraightThrough { soft, .. } => {
                if self.wants(*soft) {
                    accumulate(grads, *soft, g.clone());
                }
            }
            Op::Composite {
                density,
                rgb,
                offsets,
                deltas,
                background,
            } => {
                let (dv, cv) = (self.value(*density), self.value(*rgb));
                let mut dd = Matrix::zeros(dv.rows(), 1);
                let mut dc = Matrix::zeros(cv.rows(), 3);
                for r in 0..offsets.len() - 1 {
                    let span = offsets[r]..offsets[r + 1];
                    composite_backward(
                        &dv.data()[span.clone()],
                        &cv.data()[span.start * 3..span.end * 3],
                        &deltas[span.clone()],
                        *background,
                        g.row(r),
                        &mut dd.data_mut()[span.clone()],
                        &mut dc.data_mut()[span.start * 3..span.end * 3],
                    );
                }
                if self.wants(*density) {
                    accumulate(grads, *density, dd);
                }
                if self.wants(*rgb) {
                    accumulate(grads, *rgb, dc);
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let s = g.data()[0];
                accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), s));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                accumulate(grads, *x, weights.map(|w| w * s));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let scale = 2.0 * g.data()[0] / pv.len().max(1) as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                accumulate(grads, *pred, Matrix::from_vec(pv.rows(), pv.cols(), data));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `logits` written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Accumulates one blended row. Shared by the tape and the direct
/// interpolation path so both produce identical bits.
#[inline]
pub(crate) fn blend_row(out: &mut [f64], src: &Matrix, rows: &[u32], weights: &[f64]) {
    for (&r, &w) in rows.iter().zip(weights) {
        if r == SKIP_ROW {
            continue;
        }
        for (o, v) in out.iter_mut().zip(src.row(r as usize)) {
            *o += w * v;
        }
    }
}

/// Result of compositing one ray's samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeResult {
    pub rgb: [f64; 3],
    pub opacity: f64,
    /// Transmittance left after the last sample, `Π(1 − α_i)`.
    pub transmittance: f64,
}

/// Front-to-back emission-absorption compositing of ordered samples:
/// `α_i = 1 − exp(−σ_i δ_i)`, `w_i = α_i Π_{j<i}(1 − α_j)`.
pub fn composite_samples(
    density: &[f64],
    rgb: &[f64],
    deltas: &[f64],
    background: [f64; 3],
) -> CompositeResult {
    let mut transmittance = 1.0;
    let mut acc = [0.0; 3];
    let mut opacity = 0.0;
    for (i, (&sigma, &delta)) in density.iter().zip(deltas).enumerate() {
        let alpha = 1.0 - (-sigma * delta).exp();
        let w = transmittance * alpha;
        for c in 0..3 {
            acc[c] += w * rgb[i * 3 + c];
        }
        opacity += w;
        transmittance *= 1.0 - alpha;
    }
    for c in 0..3 {
        acc[c] += transmittance * background[c];
    }
    CompositeResult {
        rgb: acc,
        opacity,
        transmittance,
    }
}

fn composite_backward(
    density: &[f64],
    rgb: &[f64],
    deltas: &[f64],
    background: [f64; 3],
    upstream: &[f64],
    d_density: &mut [f64],
    d_rgb: &mut [f64],
) {
    let n = density.len();
    // after[i] is the transmittance just past sample i.
    let mut weights = Vec::with_capacity(n);
    let mut after = Vec::with_capacity(n);
    let mut t = 1.0;
    for (&sigma, &delta) in density.iter().zip(deltas) {
        let alpha = 1.0 - (-sigma * delta).exp();
        weights.push(t * alpha);
        t *= 1.0 - alpha;
        after.push(t);
    }
    let t_final = t;
    let g_rgb = [upstream[0], upstream[1], upstream[2]];
    let g_opacity = upstream[3];
    let bg_term: f64 = (0..3).map(|c| g_rgb[c] * t_final * background[c]).sum();

    let mut suffix = 0.0; // Σ_{i>k} w_i (g·c_i)
    for k in (0..n).rev() {
        let gc: f64 = (0..3).map(|c| g_rgb[c] * rgb[k * 3 + c]).sum();
        let ds = after[k] * gc - suffix - bg_term + g_opacity * t_final;
        d_density[k] = ds * deltas[k];
        for c in 0..3 {
            d_rgb[k * 3 + c] = g_rgb[c] * weights[k];
        }
        suffix += weights[k] * gc;
    }
}

/// `a · b`.
fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, p, q) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, q);
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    };
    if q == 0 {
        return out;
    }
    if n * p * q >= PARALLEL_WORK {
        out.data_mut()
            .par_chunks_mut(q)
            .enumerate()
            .for_each(kernel);
    } else {
        out.data_mut().chunks_mut(q).enumerate().for_each(kernel);
    }
    out
}

/// `g · bᵀ`.
fn matmul_bt(g: &Matrix, b: &Matrix) -> Matrix {
    let (n, p) = (g.rows(), b.rows());
    let mut out = Matrix::zeros(n, p);
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        let gr = g.row(i);
        for (k, o) in out_row.iter_mut().enumerate() {
            *o = gr.iter().zip(b.row(k)).map(|(x, y)| x * y).sum();
        }
    };
    if p == 0 {
        return out;
    }
    if n * p * g.cols() >= PARALLEL_WORK {
        out.data_mut()
            .par_chunks_mut(p)
            .enumerate()
            .for_each(kernel);
    } else {
        out.data_mut().chunks_mut(p).enumerate().for_each(kernel);
    }
    out
}

/// `aᵀ · g`, reduced over fixed row blocks in order.
fn matmul_at(a: &Matrix, g: &Matrix) -> Matrix {
    let (n, p, q) = (a.rows(), a.cols(), g.cols());
    let block = |start: usize| {
        let mut part = Matrix::zeros(p, q);
        for i in start..(start + ROW_BLOCK).min(n) {
            let gr = g.row(i);
            for (k, &av) in a.row(i).iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, gv) in part.row_mut(k).iter_mut().zip(gr) {
                    *o += av * gv;
                }
            }
        }
        part
    };
    let starts: Vec<usize> = (0..n).step_by(ROW_BLOCK).collect();
    let parts: Vec<Matrix> = if n * p * q >= PARALLEL_WORK {
        starts.par_iter().map(|&s| block(s)).collect()
    } else {
        starts.iter().map(|&s| block(s)).collect()
    };
    let mut out = Matrix::zeros(p, q);
    for part in &parts {
        out.add_assign(part);
    }
    out
}
