//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value; nodes refer to
//! their inputs by index, so the tape is topologically ordered by construction.
//! `backward` walks it once in reverse.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleByElem(Var, Var, usize),
    Elu(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    GatherSum(Vec<(Var, Option<Rc<Vec<usize>>>)>, Option<Var>),
    SliceRows(Var, usize),
    RowDot(Var, Var),
    GatherRowDot(Var, Rc<Vec<usize>>, Var),
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    SegmentWeightedSum(Var, Var, Rc<Vec<usize>>),
    Softmax(Var, f64),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    CrossEntropy(Var, Rc<Vec<usize>>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of primitive applications. Single writer.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves reached by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Numerically stable softmax of `scale * xs`.
pub(crate) fn softmax_slice(xs: &[f64], scale: f64, out: &mut [f64]) {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(scale * v));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(xs) {
        *o = (scale * v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A differentiable input (parameter or cut-layer activation).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (n, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * q];
        matmul_into(ta.data(), tb.data(), &mut out, n, p, q);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::matrix(n, q, out)?, Op::MatMul(a, b), t))
    }

    /// `x[n x q] + b[q]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.numel() != tx.shape()[1] {
            return Err(dim_err("add_row", tx, tb));
        }
        let q = tb.numel();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(q.max(1)) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let shape = tx.shape().to_vec();
        let t = self.tracked(&[x, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), t))
    }

    /// Sums a non-empty list of same-shaped values.
    pub fn add_all(&mut self, vs: &[Var]) -> Result<Var> {
        let (&first, rest) = vs
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), t))
    }

    /// `x[n x d] ⊙ w[d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.numel() != tx.shape()[1] {
            return Err(dim_err("mul_row", tx, tw));
        }
        let d = tw.numel();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (o, &wv) in row.iter_mut().zip(tw.data()) {
                *o *= wv;
            }
        }
        let shape = tx.shape().to_vec();
        let t = self.tracked(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulRow(x, w), t))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|v| v * c);
        let t = self.tracked(&[x]);
        self.push(v, Op::Scale(x, c), t)
    }

    /// `x * s[k]` where `s` is a tracked vector.
    pub fn scale_by_elem(&mut self, x: Var, s: Var, k: usize) -> Result<Var> {
        let ts = self.value(s);
        if k >= ts.numel() {
            return Err(dim_err("scale_by_elem", self.value(x), ts));
        }
        let c = ts.data()[k];
        let v = self.value(x).map(|v| v * c);
        let t = self.tracked(&[x, s]);
        Ok(self.push(v, Op::ScaleByElem(x, s, k), t))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(elu);
        let t = self.tracked(&[x]);
        self.push(v, Op::Elu(x), t)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let t = self.tracked(&[x]);
        self.push(v, Op::Tanh(x), t)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let t = self.tracked(&[x]);
        self.push(v, Op::LeakyRelu(x, slope), t)
    }

    /// Element-wise product with a constant of the same length (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Rc<Vec<f64>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != mask.len() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = tx.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let shape = tx.shape().to_vec();
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(x, mask), t))
    }

    /// Row-wise concatenation of 2-D values with equal row counts.
    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        let first = *vs
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of empty list".into()))?;
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(vs.len());
        for &v in vs {
            let tv = self.value(v);
            if tv.rank() != 2 || tv.rows() != n {
                return Err(dim_err("concat_cols", self.value(first), tv));
            }
            widths.push(tv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &v in vs {
                out.extend_from_slice(self.value(v).row(i));
            }
        }
        let t = self.tracked(vs);
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(vs.to_vec()), t))
    }

    /// Stacks values along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let first = *vs
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of empty list".into()))?;
        let tail = self.value(first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in vs {
            let tv = self.value(v);
            if tv.shape()[1..] != tail[..] {
                return Err(dim_err("concat_rows", self.value(first), tv));
            }
            rows += tv.rows();
            out.extend_from_slice(tv.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = self.tracked(vs);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows(vs.to_vec()), t))
    }

    /// Selects rows (repeats allowed) of a 2-D value.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = tx.select_rows(&idx);
        let t = self.tracked(&[x]);
        Ok(self.push(out, Op::GatherRows(x, idx), t))
    }

    /// `Σ_k gather(x_k, idx_k) + bias`, one pass and one output; a `None`
    /// index takes `x_k` as is.
    pub fn gather_sum(&mut self, terms: &[(Var, Option<Rc<Vec<usize>>>)], bias: Option<Var>) -> Result<Var> {
        let Some((first, first_idx)) = terms.first() else {
            return Err(Error::Contract("gather_sum needs at least one term".into()));
        };
        let n = match first_idx {
            Some(idx) => idx.len(),
            None => self.value(*first).rows(),
        };
        let d = self.value(*first).cols();
        let mut out = vec![0.0; n * d];
        for (x, idx) in terms {
            let tx = self.value(*x);
            let rows = idx.as_ref().map_or(tx.rows(), |i| i.len());
            if tx.rank() != 2 || tx.cols() != d || rows != n {
                return Err(dim_err("gather_sum", self.value(*first), tx));
            }
            match idx {
                Some(idx) => {
                    if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
                        return Err(Error::Dimension {
                            op: "gather_sum",
                            lhs: tx.shape().to_vec(),
                            rhs: vec![bad],
                        });
                    }
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut out[r * d..(r + 1) * d], tx.row(src));
                    }
                }
                None => add_into(&mut out, tx.data()),
            }
        }
        let mut vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.numel() != d {
                return Err(dim_err("gather_sum", self.value(*first), tb));
            }
            for row in out.chunks_mut(d.max(1)) {
                add_into(row, tb.data());
            }
            vars.push(b);
        }
        let t = self.tracked(&vars);
        Ok(self.push(Tensor::matrix(n, d, out)?, Op::GatherSum(terms.to_vec(), bias), t))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start > end || end > tx.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = tx.cols();
        let out = Tensor::matrix(end - start, c, tx.data()[start * c..end * c].to_vec())?;
        let t = self.tracked(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), t))
    }

    /// Row-wise inner products of two `n x d` values, giving `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || ta.shape() != tb.shape() {
            return Err(dim_err("row_dot", ta, tb));
        }
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::vector(out), Op::RowDot(a, b), t))
    }

    /// `out[e] = <a[idx[e]], b[e]>`, a row dot against gathered rows of `a`.
    pub fn gather_row_dot(&mut self, a: Var, idx: Rc<Vec<usize>>, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() || idx.len() != tb.rows() {
            return Err(dim_err("gather_row_dot", ta, tb));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::Dimension {
                op: "gather_row_dot",
                lhs: ta.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(e, &i)| ta.row(i).iter().zip(tb.row(e)).map(|(x, y)| x * y).sum())
            .collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::vector(out), Op::GatherRowDot(a, idx, b), t))
    }

    /// Softmax of a flat `[E]` value within groups given by `seg[e]`.
    pub fn segment_softmax(&mut self, x: Var, seg: Rc<Vec<usize>>, groups: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != seg.len() || seg.iter().any(|&s| s >= groups) {
            return Err(Error::Dimension {
                op: "segment_softmax",
                lhs: tx.shape().to_vec(),
                rhs: vec![seg.len(), groups],
            });
        }
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (&v, &s) in tx.data().iter().zip(seg.iter()) {
            max[s] = max[s].max(v);
        }
        let mut out: Vec<f64> = tx
            .data()
            .iter()
            .zip(seg.iter())
            .map(|(&v, &s)| (v - max[s]).exp())
            .collect();
        let mut total = vec![0.0; groups];
        for (&o, &s) in out.iter().zip(seg.iter()) {
            total[s] += o;
        }
        for (o, &s) in out.iter_mut().zip(seg.iter()) {
            *o /= total[s];
        }
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor::vector(out), Op::SegmentSoftmax(x, seg), t))
    }

    /// `out[seg[e]] += w[e] * values[e]`, giving `[groups x d]`.
    pub fn segment_weighted_sum(
        &mut self,
        w: Var,
        values: Var,
        seg: Rc<Vec<usize>>,
        groups: usize,
    ) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(values));
        if tv.rank() != 2
            || tw.numel() != tv.rows()
            || seg.len() != tv.rows()
            || seg.iter().any(|&s| s >= groups)
        {
            return Err(dim_err("segment_weighted_sum", tw, tv));
        }
        let d = tv.cols();
        let mut out = vec![0.0; groups * d];
        for (e, &s) in seg.iter().enumerate() {
            let we = tw.data()[e];
            let orow = &mut out[s * d..(s + 1) * d];
            for (o, &v) in orow.iter_mut().zip(tv.row(e)) {
                *o += we * v;
            }
        }
        let t = self.tracked(&[w, values]);
        Ok(self.push(
            Tensor::matrix(groups, d, out)?,
            Op::SegmentWeightedSum(w, values, seg),
            t,
        ))
    }

    /// Softmax of a vector with temperature `lambda`.
    pub fn softmax(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::Domain("softmax of empty input".into()));
        }
        let mut out = vec![0.0; tx.numel()];
        softmax_slice(tx.data(), lambda, &mut out);
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Softmax(x, lambda), t))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.data().iter().sum::<f64>() / tx.numel().max(1) as f64;
        let t = self.tracked(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let t = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), t)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::Reshape(x), t))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (tl.rows(), tl.cols());
        if n == 0 {
            return Err(Error::Domain("cross_entropy over zero rows".into()));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Domain(format!(
                "label {l} at row {row} outside [0, {c})"
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = tl.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let t = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy(logits, labels, probs),
            t,
        ))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with_seed(loss, &Tensor::scalar(1.0))
    }

    /// Backpropagates an upstream gradient arriving at `out` from across a cut.
    pub fn backward_with_seed(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.numel() != self.value(out).numel() {
            return Err(dim_err("backward seed", self.value(out), seed));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            // Only leaves keep their gradient; intermediates are spent.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes[..=out.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        grads.resize(self.nodes.len(), None);
        shapes.extend(self.nodes[out.0 + 1..].iter().map(|n| n.value.shape().to_vec()));
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].tracked;
        // Accumulates `f(k)` into the k-th gradient slot of `v`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl Fn(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // ga[i,k] += Σ_j g[i,j] b[k,j]
                    acc(grads, *a, n * p, |ga| {
                        for i in 0..n {
                            let grow = &g[i * q..(i + 1) * q];
                            for k in 0..p {
                                let brow = &tb.data()[k * q..(k + 1) * q];
                                ga[i * p + k] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*b) {
                    // gb[k,j] += Σ_i a[i,k] g[i,j]
                    acc(grads, *b, p * q, |gb| {
                        for i in 0..n {
                            let grow = &g[i * q..(i + 1) * q];
                            for k in 0..p {
                                let av = ta.data()[i * p + k];
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[k * q..(k + 1) * q].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    acc(grads, *x, g.len(), |gx| add_into(gx, g));
                }
                if wants(*b) {
                    let q = val(*b).numel();
                    acc(grads, *b, q, |gb| {
                        for row in g.chunks(q.max(1)) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        acc(grads, *v, g.len(), |gv| add_into(gv, g));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(grads, *a, g.len(), |ga| {
                        for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, g.len(), |gb| {
                        for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                            *o += gv * av;
                        }
                    });
                }
            }
            Op::MulRow(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let d = tw.numel();
                if wants(*x) {
                    acc(grads, *x, g.len(), |gx| {
                        for (grow, orow) in g.chunks(d.max(1)).zip(gx.chunks_mut(d.max(1))) {
                            for ((o, gv), wv) in orow.iter_mut().zip(grow).zip(tw.data()) {
                                *o += gv * wv;
                            }
                        }
                    });
                }
                if wants(*w) {
                    acc(grads, *w, d, |gw| {
                        for (grow, xrow) in g.chunks(d.max(1)).zip(tx.data().chunks(d.max(1))) {
                            for ((o, gv), xv) in gw.iter_mut().zip(grow).zip(xrow) {
                                *o += gv * xv;
                            }
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    acc(grads, *x, g.len(), |gx| {
                        for (o, gv) in gx.iter_mut().zip(g) {
                            *o += c * gv;
                        }
                    });
                }
            }
            Op::ScaleByElem(x, s, k) => {
                let (tx, ts) = (val(*x), val(*s));
                let c = ts.data()[*k];
                if wants(*x) {
                    acc(grads, *x, g.len(), |gx| {
                        for (o, gv) in gx.iter_mut().zip(g) {
                            *o += c * gv;
                        }
                    });
                }
                if wants(*s) {
                    let dot: f64 = g.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    acc(grads, *s, ts.numel(), |gs| gs[*k] += dot);
                }
            }
            Op::Elu(x) => {
                let out = node.value.data();
                acc(grads, *x, g.len(), |gx| {
                    for ((o, gv), (&y, &xv)) in
                        gx.iter_mut().zip(g).zip(out.iter().zip(val(*x).data()))
                    {
                        *o += if xv > 0.0 { *gv } else { gv * (y + 1.0) };
                    }
                });
            }
            Op::Tanh(x) => {
                let out = node.value.data();
                acc(grads, *x, g.len(), |gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                acc(grads, *x, g.len(), |gx| {
                    for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                        *o += if xv > 0.0 { *gv } else { slope * gv };
                    }
                });
            }
            Op::MulConst(x, mask) => {
                acc(grads, *x, g.len(), |gx| {
                    for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask.iter()) {
                        *o += gv * m;
                    }
                });
            }
            Op::ConcatCols(vs) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for v in vs {
                    let w = val(*v).cols();
                    if wants(*v) {
                        acc(grads, *v, n * w, |gv| {
                            for i in 0..n {
                                add_into(
                                    &mut gv[i * w..(i + 1) * w],
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(vs) => {
                let mut offset = 0;
                for v in vs {
                    let len = val(*v).numel();
                    if wants(*v) {
                        acc(grads, *v, len, |gv| add_into(gv, &g[offset..offset + len]));
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let tx = val(*x);
                let d = tx.cols();
                acc(grads, *x, tx.numel(), |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::GatherSum(terms, bias) => {
                let d = node.value.cols();
                for (x, idx) in terms {
                    if !wants(*x) {
                        continue;
                    }
                    let tx = val(*x);
                    acc(grads, *x, tx.numel(), |gx| match idx {
                        Some(idx) => {
                            for (r, &src) in idx.iter().enumerate() {
                                add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                            }
                        }
                        None => add_into(gx, g),
                    });
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        acc(grads, *b, d, |gb| {
                            for row in g.chunks(d.max(1)) {
                                add_into(gb, row);
                            }
                        });
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let tx = val(*x);
                let d = tx.cols();
                acc(grads, *x, tx.numel(), |gx| {
                    add_into(&mut gx[start * d..start * d + g.len()], g);
                });
            }
            Op::GatherRowDot(a, idx, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                if wants(*a) {
                    acc(grads, *a, ta.numel(), |ga| {
                        for ((gv, &i), e) in g.iter().zip(idx.iter()).zip(0..) {
                            for (o, bv) in ga[i * d..(i + 1) * d].iter_mut().zip(tb.row(e)) {
                                *o += gv * bv;
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, tb.numel(), |gb| {
                        for ((gv, &i), e) in g.iter().zip(idx.iter()).zip(0usize..) {
                            for (o, av) in gb[e * d..(e + 1) * d].iter_mut().zip(ta.row(i)) {
                                *o += gv * av;
                            }
                        }
                    });
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                if wants(*a) {
                    acc(grads, *a, ta.numel(), |ga| {
                        for (i, gv) in g.iter().enumerate() {
                            for (o, bv) in ga[i * d..(i + 1) * d].iter_mut().zip(tb.row(i)) {
                                *o += gv * bv;
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, tb.numel(), |gb| {
                        for (i, gv) in g.iter().enumerate() {
                            for (o, av) in gb[i * d..(i + 1) * d].iter_mut().zip(ta.row(i)) {
                                *o += gv * av;
                            }
                        }
                    });
                }
            }
            Op::SegmentSoftmax(x, seg) => {
                let y = node.value.data();
                let groups = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; groups];
                for ((&s, gv), yv) in seg.iter().zip(g).zip(y) {
                    inner[s] += gv * yv;
                }
                acc(grads, *x, y.len(), |gx| {
                    for (e, &s) in seg.iter().enumerate() {
                        gx[e] += y[e] * (g[e] - inner[s]);
                    }
                });
            }
            Op::SegmentWeightedSum(w, values, seg) => {
                let (tw, tv) = (val(*w), val(*values));
                let d = tv.cols();
                if wants(*w) {
                    acc(grads, *w, tw.numel(), |gw| {
                        for (e, &s) in seg.iter().enumerate() {
                            gw[e] += g[s * d..(s + 1) * d]
                                .iter()
                                .zip(tv.row(e))
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    });
                }
                if wants(*values) {
                    acc(grads, *values, tv.numel(), |gv| {
                        for (e, &s) in seg.iter().enumerate() {
                            let we = tw.data()[e];
                            for (o, gs) in gv[e * d..(e + 1) * d].iter_mut().zip(&g[s * d..(s + 1) * d]) {
                                *o += we * gs;
                            }
                        }
                    });
                }
            }
            Op::Softmax(x, lambda) => {
                let y = node.value.data();
                let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(grads, *x, y.len(), |gx| {
                    for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += lambda * yv * (gv - inner);
                    }
                });
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let share = g[0] / n.max(1) as f64;
                acc(grads, *x, n, |gx| gx.iter_mut().for_each(|o| *o += share));
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                acc(grads, *x, n, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.len(), |gx| add_into(gx, g));
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let tl = val(*logits);
                let (n, c) = (tl.rows(), tl.cols());
                let scale = g[0] / n as f64;
                acc(grads, *logits, n * c, |gl| {
                    for i in 0..n {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.scale(c, 2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_or_zeros(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x * x + x) => dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn segment_softmax_sums_per_group() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.0, 2.0, 0.0, 5.0]));
        let y = tape
            .segment_softmax(x, Rc::new(vec![0, 1, 0, 1, 2]), 3)
            .unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
        assert_eq!(v[4], 1.0);
    }
}
