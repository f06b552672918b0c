//! Reverse-mode differentiation over an operation tape.
//!
//! The tape records every primitive applied during a forward pass.
//! Replaying it backward yields a gradient for every named parameter
//! touched in the forward pass; untouched parameters get zero gradient
//! from the caller's side (they simply never appear in the result map).

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::matrix::{cosine, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name, in deterministic (sorted) order.
pub type Gradients<S> = BTreeMap<String, Matrix<S>>;

enum Op<S> {
    Leaf { param: Option<String> },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    ConcatCols(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    DivRows(NodeId, NodeId),
    AddScalar(NodeId, S),
    Scale(NodeId, S),
    RowNormalize(NodeId),
    CosineRows(NodeId, NodeId),
    Mean(NodeId),
    RowWeightedSum(NodeId, Rc<Vec<S>>),
    SegmentSum(NodeId, Rc<Vec<usize>>),
    Gather(NodeId, Rc<Vec<usize>>),
    Bce(NodeId, Rc<Matrix<S>>),
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<S> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.value(id).shape(), (1, 1));
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Frozen input; receives no gradient.
    pub fn constant(&mut self, value: Matrix<S>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Named learnable parameter; its gradient appears in [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Matrix<S>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Broadcast-add a `1 x C` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, ac) = self.value(a).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != ac {
            return Err(Error::dimension("add_bias", format!("cols {ac}"), format!("{br}x{bc}")));
        }
        let am = self.value(a);
        let bm = self.value(bias);
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(bm.row(0)) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| S::one() / (S::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let am = self.value(a);
        let bm = self.value(b);
        if am.rows() != bm.rows() {
            return Err(Error::dimension("concat_cols", am.rows(), bm.rows()));
        }
        let rows = am.rows();
        let cols = am.cols() + bm.cols();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = v.row_mut(r);
            row[..am.cols()].copy_from_slice(am.row(r));
            row[am.cols()..].copy_from_slice(bm.row(r));
        }
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "mul_elem", |x, y| x * y)?;
        Ok(self.push(v, Op::MulElem(a, b)))
    }

    /// Scale row `i` of `a` (`N x C`) by `s[i]` (`N x 1`).
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let am = self.value(a);
        let sm = self.value(s);
        if sm.cols() != 1 || sm.rows() != am.rows() {
            return Err(Error::dimension(
                "scale_rows",
                format!("{}x{}", am.rows(), am.cols()),
                format!("{}x{}", sm.rows(), sm.cols()),
            ));
        }
        let mut v = am.clone();
        for r in 0..v.rows() {
            let f = sm.get(r, 0);
            for x in v.row_mut(r) {
                *x *= f;
            }
        }
        Ok(self.push(v, Op::ScaleRows(a, s)))
    }

    /// Divide row `i` of `a` by `s[i]` (`N x 1`).
    pub fn div_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let am = self.value(a);
        let sm = self.value(s);
        if sm.cols() != 1 || sm.rows() != am.rows() {
            return Err(Error::dimension(
                "div_rows",
                format!("{}x{}", am.rows(), am.cols()),
                format!("{}x{}", sm.rows(), sm.cols()),
            ));
        }
        let mut v = am.clone();
        for r in 0..v.rows() {
            let f = sm.get(r, 0);
            for x in v.row_mut(r) {
                *x = *x / f;
            }
        }
        Ok(self.push(v, Op::DivRows(a, s)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// L2-normalize each row, with the norm clamped below at `norm_eps`.
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let eps = S::norm_eps();
        let mut v = am.clone();
        for r in 0..v.rows() {
            let n = am.row_norm(r).max(eps);
            for x in v.row_mut(r) {
                *x = *x / n;
            }
        }
        self.push(v, Op::RowNormalize(a))
    }

    /// Per-row cosine between equally shaped `a` and `b`; `N x 1` output.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let am = self.value(a);
        let bm = self.value(b);
        if am.shape() != bm.shape() {
            return Err(Error::dimension(
                "cosine_rows",
                format!("{}x{}", am.rows(), am.cols()),
                format!("{}x{}", bm.rows(), bm.cols()),
            ));
        }
        let mut v = Matrix::zeros(am.rows(), 1);
        for r in 0..am.rows() {
            v.set(r, 0, cosine(am.row(r), bm.row(r)));
        }
        Ok(self.push(v, Op::CosineRows(a, b)))
    }

    /// Mean over all entries; `1 x 1` output.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let n = S::from_usize(am.rows() * am.cols()).unwrap();
        let s: S = am.data().iter().copied().sum();
        let v = Matrix::from_vec(1, 1, vec![s / n]).unwrap();
        self.push(v, Op::Mean(a))
    }

    /// Weighted sum of rows with constant weights; `1 x C` output.
    pub fn row_weighted_sum(&mut self, a: NodeId, w: Rc<Vec<S>>) -> Result<NodeId> {
        let am = self.value(a);
        if w.len() != am.rows() {
            return Err(Error::dimension("row_weighted_sum", am.rows(), w.len()));
        }
        let mut v = Matrix::zeros(1, am.cols());
        for (j, &wj) in w.iter().enumerate() {
            if wj == S::zero() {
                continue;
            }
            for (o, &x) in v.row_mut(0).iter_mut().zip(am.row(j)) {
                *o += wj * x;
            }
        }
        Ok(self.push(v, Op::RowWeightedSum(a, w)))
    }

    /// Sum rows of `a` into segments given by `seg` (values in `[0, n_seg)`).
    pub fn segment_sum(&mut self, a: NodeId, seg: Rc<Vec<usize>>, n_seg: usize) -> Result<NodeId> {
        let am = self.value(a);
        if seg.len() != am.rows() {
            return Err(Error::dimension("segment_sum", am.rows(), seg.len()));
        }
        let mut v = Matrix::zeros(n_seg, am.cols());
        for (j, &s) in seg.iter().enumerate() {
            for (o, &x) in v.row_mut(s).iter_mut().zip(am.row(j)) {
                *o += x;
            }
        }
        Ok(self.push(v, Op::SegmentSum(a, seg)))
    }

    /// Row gather: output row `j` equals `a` row `idx[j]`.
    pub fn gather(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId> {
        let am = self.value(a);
        let mut v = Matrix::zeros(idx.len(), am.cols());
        for (j, &i) in idx.iter().enumerate() {
            if i >= am.rows() {
                return Err(Error::dimension("gather", am.rows(), i));
            }
            v.row_mut(j).copy_from_slice(am.row(i));
        }
        Ok(self.push(v, Op::Gather(a, idx)))
    }

    /// Elementwise binary cross-entropy against a constant target,
    /// probabilities clamped to `[bce_eps, 1 - bce_eps]`.
    pub fn bce(&mut self, pred: NodeId, target: Rc<Matrix<S>>) -> Result<NodeId> {
        let pm = self.value(pred);
        if pm.shape() != target.shape() {
            return Err(Error::dimension(
                "bce",
                format!("{}x{}", pm.rows(), pm.cols()),
                format!("{}x{}", target.rows(), target.cols()),
            ));
        }
        let eps = S::bce_eps();
        let one = S::one();
        let v = pm.zip(&target, "bce", |p, t| {
            let p = p.max(eps).min(one - eps);
            -(t * p.ln() + (one - t) * (one - p).ln())
        })?;
        Ok(self.push(v, Op::Bce(pred, target)))
    }

    /// Reverse pass from a `1 x 1` loss node. Returns gradients for every
    /// parameter leaf reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on empty tape".into()));
        }
        let lm = self.value(loss);
        if lm.shape() != (1, 1) {
            return Err(Error::State(format!(
                "backward expects a 1x1 loss node, got {}x{}",
                lm.rows(),
                lm.cols()
            )));
        }

        let mut grads: Vec<Option<Matrix<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![S::one()]).unwrap());

        let mut out: Gradients<S> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        out.entry(name.clone())
                            .and_modify(|m| m.add_assign(&g))
                            .or_insert(g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-S::one()));
                }
                Op::AddBias(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Relu(a) => {
                    let ga = self
                        .value(*a)
                        .zip(&g, "relu-grad", |x, gy| if x > S::zero() { gy } else { S::zero() })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = node.value.zip(&g, "sigmoid-grad", |s, gy| gy * s * (S::one() - s))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let mut ga = Matrix::zeros(g.rows(), ac);
                    let mut gb = Matrix::zeros(g.rows(), g.cols() - ac);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulElem(a, b) => {
                    let ga = g.zip(self.value(*b), "mul-grad", |gy, y| gy * y)?;
                    let gb = g.zip(self.value(*a), "mul-grad", |gy, x| gy * x)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScaleRows(a, s) => {
                    let am = self.value(*a);
                    let sm = self.value(*s);
                    let mut ga = g.clone();
                    let mut gs = Matrix::zeros(sm.rows(), 1);
                    for r in 0..g.rows() {
                        let f = sm.get(r, 0);
                        let mut dot = S::zero();
                        for (x, (&gy, &av)) in ga
                            .row_mut(r)
                            .iter_mut()
                            .zip(g.row(r).iter().zip(am.row(r)))
                        {
                            *x = gy * f;
                            dot += gy * av;
                        }
                        gs.set(r, 0, dot);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, gs);
                }
                Op::DivRows(a, s) => {
                    let sm = self.value(*s);
                    let ym = &node.value;
                    let mut ga = g.clone();
                    let mut gs = Matrix::zeros(sm.rows(), 1);
                    for r in 0..g.rows() {
                        let f = sm.get(r, 0);
                        let mut dot = S::zero();
                        for (x, (&gy, &yv)) in ga
                            .row_mut(r)
                            .iter_mut()
                            .zip(g.row(r).iter().zip(ym.row(r)))
                        {
                            *x = gy / f;
                            dot += gy * yv;
                        }
                        gs.set(r, 0, -dot / f);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, gs);
                }
                Op::AddScalar(a, _) => accumulate(&mut grads, *a, g),
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::RowNormalize(a) => {
                    let am = self.value(*a);
                    let ym = &node.value;
                    let eps = S::norm_eps();
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let n = am.row_norm(r).max(eps);
                        let dot: S = g
                            .row(r)
                            .iter()
                            .zip(ym.row(r))
                            .map(|(&gy, &y)| gy * y)
                            .sum();
                        for (x, (&gy, &y)) in ga
                            .row_mut(r)
                            .iter_mut()
                            .zip(g.row(r).iter().zip(ym.row(r)))
                        {
                            *x = (gy - y * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CosineRows(a, b) => {
                    let am = self.value(*a);
                    let bm = self.value(*b);
                    let cm = &node.value;
                    let eps = S::norm_eps();
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    let mut gb = Matrix::zeros(bm.rows(), bm.cols());
                    for r in 0..am.rows() {
                        let na = am.row_norm(r);
                        let nb = bm.row_norm(r);
                        if na < eps || nb < eps {
                            continue; // cos defined as 0, gradient 0
                        }
                        let gy = g.get(r, 0);
                        let c = cm.get(r, 0);
                        for k in 0..am.cols() {
                            let av = am.get(r, k);
                            let bv = bm.get(r, k);
                            ga.set(r, k, gy * (bv / (na * nb) - c * av / (na * na)));
                            gb.set(r, k, gy * (av / (na * nb) - c * bv / (nb * nb)));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mean(a) => {
                    let am = self.value(*a);
                    let n = S::from_usize(am.rows() * am.cols()).unwrap();
                    let gy = g.data()[0] / n;
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    ga.fill(gy);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowWeightedSum(a, w) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for (j, &wj) in w.iter().enumerate() {
                        if wj == S::zero() {
                            continue;
                        }
                        for (x, &gy) in ga.row_mut(j).iter_mut().zip(g.row(0)) {
                            *x = wj * gy;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSum(a, seg) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for (j, &s) in seg.iter().enumerate() {
                        ga.row_mut(j).copy_from_slice(g.row(s));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for (j, &i) in idx.iter().enumerate() {
                        for (x, &gy) in ga.row_mut(i).iter_mut().zip(g.row(j)) {
                            *x += gy;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Bce(pred, target) => {
                    let pm = self.value(*pred);
                    let eps = S::bce_eps();
                    let one = S::one();
                    let mut gp = Matrix::zeros(pm.rows(), pm.cols());
                    for r in 0..pm.rows() {
                        for c in 0..pm.cols() {
                            let p = pm.get(r, c);
                            // Zero slope outside the clamp interval.
                            if p <= eps || p >= one - eps {
                                continue;
                            }
                            let t = target.get(r, c);
                            gp.set(r, c, g.get(r, c) * ((one - t) / (one - p) - t / p));
                        }
                    }
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }

        Ok(out)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Matrix<S>>], id: NodeId, g: Matrix<S>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
