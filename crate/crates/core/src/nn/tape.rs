//! Reverse-mode gradient tape.
//!
//! Forward operations append nodes holding their output and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! writes parameter gradients into the [`ParamStore`]. The operation set is
//! closed: it covers exactly the layers used by the summary backbone and the
//! velocity network.

use std::cmp::Ordering;
use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis, Ix1, Ix2};

use super::ops::{column_sums, dense_forward, dropout, gelu, gelu_grad, layer_norm, layer_norm_backward};
use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Training mode draws dropout masks from the stream; evaluation mode makes
/// dropout the identity.
pub enum Mode<'a> {
    Train(&'a mut Stream),
    Eval,
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Dense {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    LayerNorm {
        x: NodeId,
        gain: ParamId,
        offset: ParamId,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Gelu {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Array2<T>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    SegmentMean {
        x: NodeId,
        segments: Vec<Range<usize>>,
    },
    SquaredError {
        pred: NodeId,
        target: Array2<T>,
    },
    HalfSumSquares {
        x: NodeId,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Array2<T> {
        std::mem::take(&mut self.nodes[id.0].value)
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, x: Array2<T>) -> NodeId {
        self.push(x, Op::Input, false)
    }

    /// A parameter used directly as a value (vectors become `1 × n`).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        let v = store.value(id);
        let value = match v.ndim() {
            1 => v.view().into_dimensionality::<Ix1>().unwrap().insert_axis(Axis(0)).to_owned(),
            2 => v.view().into_dimensionality::<Ix2>().unwrap().to_owned(),
            _ => return Err(Error::shape("only vector and matrix parameters are supported")),
        };
        Ok(self.push(value, Op::Param(id), true))
    }

    pub fn dense(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    ) -> Result<NodeId> {
        let bias = b.map(|b| store.vector(b)).transpose()?;
        let y = dense_forward(self.value(x).view(), store.matrix(w)?, bias)?;
        Ok(self.push(y, Op::Dense { x, w, b }, true))
    }

    pub fn layer_norm(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        gain: ParamId,
        offset: ParamId,
    ) -> Result<NodeId> {
        let (y, xhat, inv_std) =
            layer_norm(self.value(x).view(), store.vector(gain)?, store.vector(offset)?)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            true,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(gelu);
        let ng = self.needs(x);
        self.push(y, Op::Gelu { x }, ng)
    }

    /// Inverted dropout; in evaluation mode returns `x` unchanged.
    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: &mut Mode<'_>) -> Result<NodeId> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => {
                let (y, mask) = dropout(self.value(x).view(), rate, *rng, true)?;
                match mask {
                    None => Ok(x),
                    Some(mask) => {
                        let ng = self.needs(x);
                        Ok(self.push(y, Op::Dropout { x, mask }, ng))
                    }
                }
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let y = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).nrows())
            .ok_or_else(|| Error::shape("concat of zero parts"))?;
        if parts.iter().any(|p| self.value(*p).nrows() != rows) {
            return Err(Error::shape("concat parts differ in row count"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Mean of each row segment: output row `i` averages rows
    /// `segments[i]` of `x`. Column sums are taken over sorted values so the
    /// result does not depend on row order within a segment.
    pub fn segment_mean(&mut self, x: NodeId, segments: Vec<Range<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = xv.ncols();
        let mut y = Array2::zeros((segments.len(), cols));
        let mut buf = Vec::new();
        for (i, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::EmptySequence("masked mean over zero valid frames"));
            }
            if seg.end > xv.nrows() {
                return Err(Error::shape("segment extends past the input rows"));
            }
            let n = T::of(seg.len() as f64);
            for c in 0..cols {
                buf.clear();
                buf.extend(xv.slice(s![seg.clone(), c]).iter().copied());
                buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
                y[[i, c]] = buf.iter().copied().sum::<T>() / n;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(y, Op::SegmentMean { x, segments }, ng))
    }

    /// `(1/B) Σ_rows ‖pred_row − target_row‖²`, a `1 × 1` node.
    pub fn squared_error(&mut self, pred: NodeId, target: Array2<T>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let b = T::of(p.nrows() as f64);
        let loss = (p - &target).mapv(|d| d * d).sum() / b;
        let ng = self.needs(pred);
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::SquaredError { pred, target }, ng))
    }

    /// `½ Σ x²`, a `1 × 1` node.
    pub fn half_sum_squares(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|a| a * a).sum() * T::of(0.5);
        let ng = self.needs(x);
        self.push(Array2::from_elem((1, 1), v), Op::HalfSumSquares { x }, ng)
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id)[[0, 0]]
    }

    /// Back-propagates from the scalar node `loss`. Parameter gradients are
    /// reset first, so each call yields the gradient of this loss alone.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded"));
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::shape("backward requires a scalar loss"));
        }
        store.zero_grads();
        let mut adj: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let grad = store.grad_mut(*id);
                    let flat = g.into_shape_with_order(grad.len()).expect("same size");
                    for (dst, src) in grad.iter_mut().zip(flat.iter()) {
                        *dst += *src;
                    }
                }
                Op::Dense { x, w, b } => {
                    let xv = self.value(*x);
                    {
                        let mut gw = store.grad_mut(*w).view_mut().into_dimensionality::<Ix2>().unwrap();
                        gw += &xv.t().dot(&g);
                    }
                    if let Some(b) = b {
                        let mut gb = store.grad_mut(*b).view_mut().into_dimensionality::<Ix1>().unwrap();
                        gb += &column_sums(g.view());
                    }
                    if self.needs(*x) {
                        let dx = g.dot(&store.matrix(*w)?.t());
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    inv_std,
                } => {
                    {
                        let mut gg = store.grad_mut(*gain).view_mut().into_dimensionality::<Ix1>().unwrap();
                        gg += &column_sums((&g * xhat).view());
                    }
                    {
                        let mut go = store.grad_mut(*offset).view_mut().into_dimensionality::<Ix1>().unwrap();
                        go += &column_sums(g.view());
                    }
                    if self.needs(*x) {
                        let dx = layer_norm_backward(g.view(), xhat.view(), inv_std.view(), store.vector(*gain)?);
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Gelu { x } => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &g;
                    accumulate(&mut adj, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut adj, *x, &g * mask);
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Concat { parts } => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.needs(*p) {
                            accumulate(&mut adj, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::SegmentMean { x, segments } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    for (i, seg) in segments.iter().enumerate() {
                        let scale = T::one() / T::of(seg.len() as f64);
                        let row = g.row(i).mapv(|v| v * scale);
                        for r in seg.clone() {
                            dx.row_mut(r).assign(&row);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SquaredError { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g[[0, 0]] * T::of(2.0) / T::of(p.nrows() as f64);
                    accumulate(&mut adj, *pred, (p - target).mapv(|d| d * scale));
                }
                Op::HalfSumSquares { x } => {
                    let scale = g[[0, 0]];
                    accumulate(&mut adj, *x, self.value(*x).mapv(|v| v * scale));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Array2<T>>], id: NodeId, g: Array2<T>) {
    match &mut adj[id.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}
