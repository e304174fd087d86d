//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices, with the graph-specific ops (gather/scatter by edge endpoint,
//! per-destination softmax, segment pooling) message passing needs.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it
//! in reverse and returns a gradient per node. [`Session`] binds a tape to a
//! [`ParamSet`] so each parameter enters the tape once and gradients come
//! back keyed by [`ParamId`]. Tapes are cheap and single-use: build, step,
//! drop.
//!
//! Two ops exist purely for semantics rather than math: [`Tape::detach`]
//! copies a value while blocking gradient flow (used to keep selected loss
//! terms away from selected parameters), and [`Tape::segment_pool`] reduces
//! with correctly rounded summation so pooled values are bitwise independent
//! of row order.

pub mod layers;
pub mod optim;

use std::rc::Rc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::graph::PoolMode;
use crate::numeric::ExactSum;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// True if any parameter contains a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.values
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Slope 0.2 on the negative side (the attention-scoring convention).
    LeakyRelu,
    Elu,
    Tanh,
    Sigmoid,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given input x and output y = f(x).
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Parameter leaf; gradient lookup goes through the session's leaf cache.
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    /// (n x m) + (1 x m), row-broadcast.
    AddRow(Var, Var),
    /// (n x m) * (n x 1), column-broadcast.
    MulCol(Var, Var),
    Scale(Var, f64),
    Activation(Var, Activation),
    /// Elementwise sqrt; subgradient 0 at 0.
    Sqrt(Var),
    /// Sum of all entries -> 1 x 1.
    SumAll(Var),
    /// Row sums -> n x 1.
    RowSumCol(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    GatherCols(Var, Rc<Vec<usize>>),
    /// Rows of the input added into output row dst[e]; output has fixed rows.
    ScatterAddRows(Var, Rc<Vec<usize>>),
    /// Fused gather-scale-scatter: output row dst[e] accumulates
    /// w[e] * x[src[e]] over edges in order.
    ScatterWeightedRows {
        x: Var,
        w: Var,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
    },
    /// Per-segment pooling of rows (exact summation).
    SegmentPool {
        x: Var,
        segments: Rc<Vec<usize>>,
        counts: Rc<Vec<usize>>,
        mode: PoolMode,
    },
    /// Softmax over entries sharing a destination (scores are E x 1).
    EdgeSoftmax(Var, Rc<Vec<usize>>),
    RowSoftmax(Var),
    /// Mean negative log-likelihood of integer targets under row softmax.
    CrossEntropy(Var, Rc<Vec<usize>>),
    /// Mean binary cross-entropy of sigmoid(x) against targets in [0, 1].
    BceWithLogits(Var, Rc<Array2<f64>>),
    /// Copied value; blocks the reverse pass by design.
    Detach,
}

struct TapeNode {
    value: Array2<f64>,
    op: Op,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(TapeNode { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient of its own but participates in
    /// the chain rule.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn param_leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Param)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = shape_of(self.value(a));
        let (br, bc) = shape_of(self.value(b));
        if ac != br {
            return Err(Error::ShapeMismatch(format!(
                "matmul: ({ar} x {ac}) . ({br} x {bc})"
            )));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let sa = shape_of(self.value(a));
        let sb = shape_of(self.value(b));
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul_elem")?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::MulElem(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = shape_of(self.value(a));
        let (rr, rc) = shape_of(self.value(row));
        if rr != 1 || rc != ac {
            return Err(Error::ShapeMismatch(format!(
                "add_row: ({rr} x {rc}) against {ac} columns"
            )));
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ar, _) = shape_of(self.value(a));
        let (cr, cc) = shape_of(self.value(col));
        if cc != 1 || cr != ar {
            return Err(Error::ShapeMismatch(format!(
                "mul_col: ({cr} x {cc}) against {ar} rows"
            )));
        }
        let cv = self.value(col).column(0).to_owned();
        let mut value = self.value(a).clone();
        for (mut row, &c) in value.rows_mut().into_iter().zip(cv.iter()) {
            row.mapv_inplace(|x| x * c);
        }
        Ok(self.push(value, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).mapv(|x| act.apply(x));
        self.push(value, Op::Activation(a, act))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument("sqrt of negative entry".into()));
        }
        let value = self.value(a).mapv(f64::sqrt);
        Ok(self.push(value, Op::Sqrt(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let sums = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(sums, Op::RowSumCol(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        let n = self.value(a).nrows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows: row {bad} outside 0..{n}"
            )));
        }
        let value = self.value(a).select(Axis(0), &rows);
        Ok(self.push(value, Op::GatherRows(a, rows)))
    }

    pub fn gather_cols(&mut self, a: Var, cols: Rc<Vec<usize>>) -> Result<Var> {
        let m = self.value(a).ncols();
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(Error::ShapeMismatch(format!(
                "gather_cols: column {bad} outside 0..{m}"
            )));
        }
        let value = self.value(a).select(Axis(1), &cols);
        Ok(self.push(value, Op::GatherCols(a, cols)))
    }

    /// out[dst[e], :] += x[e, :], with `num_rows` output rows.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        dst: Rc<Vec<usize>>,
        num_rows: usize,
    ) -> Result<Var> {
        let (e, m) = shape_of(self.value(x));
        if dst.len() != e {
            return Err(Error::ShapeMismatch(format!(
                "scatter_add_rows: {} destinations for {e} rows",
                dst.len()
            )));
        }
        if let Some(&bad) = dst.iter().find(|&&d| d >= num_rows) {
            return Err(Error::ShapeMismatch(format!(
                "scatter_add_rows: destination {bad} outside 0..{num_rows}"
            )));
        }
        let mut value = Array2::zeros((num_rows, m));
        let xv = self.value(x);
        for (row, &d) in dst.iter().enumerate() {
            value.row_mut(d).zip_mut_with(&xv.row(row), |o, &s| *o += s);
        }
        Ok(self.push(value, Op::ScatterAddRows(x, dst)))
    }

    /// Accumulate `w[e] * x[src[e]]` into output row `dst[e]`, edge by edge:
    /// the fusion of gather_rows, mul_col, and scatter_add_rows, with the
    /// same products and the same accumulation order (hence identical bits),
    /// but no edge-sized intermediates.
    pub fn scatter_weighted_rows(
        &mut self,
        x: Var,
        w: Var,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        num_rows: usize,
    ) -> Result<Var> {
        let (n, m) = shape_of(self.value(x));
        let (wr, wc) = shape_of(self.value(w));
        if wc != 1 || wr != src.len() || src.len() != dst.len() {
            return Err(Error::ShapeMismatch(format!(
                "scatter_weighted_rows: {} weights ({wr} x {wc}) for {} -> {} edges",
                wr,
                src.len(),
                dst.len()
            )));
        }
        if let Some(&bad) = src.iter().find(|&&s| s >= n) {
            return Err(Error::ShapeMismatch(format!(
                "scatter_weighted_rows: source {bad} outside 0..{n}"
            )));
        }
        if let Some(&bad) = dst.iter().find(|&&d| d >= num_rows) {
            return Err(Error::ShapeMismatch(format!(
                "scatter_weighted_rows: destination {bad} outside 0..{num_rows}"
            )));
        }
        let mut value = Array2::zeros((num_rows, m));
        let xv = self.value(x);
        let wv = self.value(w);
        for (k, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
            let c = wv[(k, 0)];
            value
                .row_mut(d)
                .zip_mut_with(&xv.row(s), |o, &v| *o += c * v);
        }
        Ok(self.push(value, Op::ScatterWeightedRows { x, w, src, dst }))
    }

    /// Pool rows by segment id into `num_segments` rows. Sums per segment are
    /// correctly rounded, hence invariant to row order within a segment.
    /// Empty segments pool to zero rows.
    pub fn segment_pool(
        &mut self,
        x: Var,
        segments: Rc<Vec<usize>>,
        num_segments: usize,
        mode: PoolMode,
    ) -> Result<Var> {
        let (n, m) = shape_of(self.value(x));
        if segments.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "segment_pool: {} segment ids for {n} rows",
                segments.len()
            )));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(Error::ShapeMismatch(format!(
                "segment_pool: segment {bad} outside 0..{num_segments}"
            )));
        }
        let mut counts = vec![0usize; num_segments];
        for &s in segments.iter() {
            counts[s] += 1;
        }
        let mut acc: Vec<ExactSum> = vec![ExactSum::new(); num_segments * m];
        let xv = self.value(x);
        for (row, &s) in segments.iter().enumerate() {
            for j in 0..m {
                acc[s * m + j].add(xv[(row, j)]);
            }
        }
        let mut value = Array2::zeros((num_segments, m));
        for s in 0..num_segments {
            for j in 0..m {
                let total = acc[s * m + j].value();
                value[(s, j)] = match mode {
                    PoolMode::Add => total,
                    PoolMode::Mean => {
                        if counts[s] == 0 {
                            0.0
                        } else {
                            total / counts[s] as f64
                        }
                    }
                };
            }
        }
        Ok(self.push(
            value,
            Op::SegmentPool {
                x,
                segments,
                counts: Rc::new(counts),
                mode,
            },
        ))
    }

    /// Softmax over score entries sharing a destination. Scores are E x 1.
    pub fn edge_softmax(&mut self, scores: Var, dst: Rc<Vec<usize>>) -> Result<Var> {
        let (e, m) = shape_of(self.value(scores));
        if m != 1 {
            return Err(Error::ShapeMismatch(format!(
                "edge_softmax: scores must be E x 1, got {e} x {m}"
            )));
        }
        if dst.len() != e {
            return Err(Error::ShapeMismatch(format!(
                "edge_softmax: {} destinations for {e} scores",
                dst.len()
            )));
        }
        let groups = group_indices(&dst);
        let sv = self.value(scores);
        let mut value = Array2::zeros((e, 1));
        for rows in groups.iter() {
            let mx = rows
                .iter()
                .map(|&r| sv[(r, 0)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &r in rows {
                let ex = (sv[(r, 0)] - mx).exp();
                value[(r, 0)] = ex;
                z += ex;
            }
            for &r in rows {
                value[(r, 0)] /= z;
            }
        }
        Ok(self.push(value, Op::EdgeSoftmax(scores, dst)))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.to_owned();
        for mut row in value.rows_mut() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(value, Op::RowSoftmax(a))
    }

    /// Mean negative log-likelihood of `targets` under a row softmax of
    /// `logits` (n x C). Stable log-sum-exp; returns a 1 x 1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let (n, c) = shape_of(self.value(logits));
        if targets.len() != n || n == 0 {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: target {bad} outside 0..{c}"
            )));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Array2::from_elem((1, 1), total / n as f64);
        Ok(self.push(value, Op::CrossEntropy(logits, targets)))
    }

    /// Mean over entries of BCE(sigmoid(x), t) with targets in [0, 1].
    /// Computed as softplus(x) - t * x for stability; returns a 1 x 1 node.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Array2<f64>>) -> Result<Var> {
        let s = shape_of(self.value(logits));
        if shape_of(&targets) != s {
            return Err(Error::ShapeMismatch(format!(
                "bce_with_logits: logits {s:?} vs targets {:?}",
                shape_of(&targets)
            )));
        }
        if targets.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidArgument(
                "bce_with_logits: target outside [0, 1]".into(),
            ));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (x, t) in lv.iter().zip(targets.iter()) {
            total += softplus(*x) - t * x;
        }
        let count = (s.0 * s.1) as f64;
        let value = Array2::from_elem((1, 1), total / count);
        Ok(self.push(value, Op::BceWithLogits(logits, targets)))
    }

    /// Copy a value while blocking gradient flow through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    /// Reverse pass from a 1 x 1 loss node; returns one gradient slot per
    /// tape node (None where the loss does not depend on the node).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Array2<f64>>>> {
        if shape_of(self.value(loss)) != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward from non-scalar node of shape {:?}",
                shape_of(self.value(loss))
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            // Inputs always precede consumers on the tape, so slot i is final
            // once reached; clone (not take) so the caller still sees it.
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::Param | Op::Detach => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::MulElem(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let da = &g * cv;
                    let dc = (&g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *col, dc);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::Activation(a, act) => {
                    let x = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut da = g;
                    ndarray::Zip::from(&mut da)
                        .and(x)
                        .and(y)
                        .for_each(|gv, &xv, &yv| *gv *= act.derivative(xv, yv));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = g;
                    da.zip_mut_with(y, |gv, &yv| {
                        *gv = if yv == 0.0 { 0.0 } else { *gv * 0.5 / yv };
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let s = g[(0, 0)];
                    let da = Array2::from_elem(shape_of(self.value(*a)), s);
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSumCol(a) => {
                    let (n, m) = shape_of(self.value(*a));
                    let mut da = Array2::zeros((n, m));
                    for r in 0..n {
                        let gv = g[(r, 0)];
                        da.row_mut(r).fill(gv);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, rows) => {
                    let mut da = Array2::zeros(shape_of(self.value(*a)));
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        let gr = g.row(out_row);
                        da.row_mut(src_row).zip_mut_with(&gr, |o, &v| *o += v);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherCols(a, cols) => {
                    let mut da = Array2::zeros(shape_of(self.value(*a)));
                    for (out_col, &src_col) in cols.iter().enumerate() {
                        let gc = g.column(out_col);
                        da.column_mut(src_col).zip_mut_with(&gc, |o, &v| *o += v);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ScatterAddRows(x, dst) => {
                    let (e, m) = shape_of(self.value(*x));
                    let mut dx = Array2::zeros((e, m));
                    for (row, &d) in dst.iter().enumerate() {
                        dx.row_mut(row).assign(&g.row(d));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ScatterWeightedRows { x, w, src, dst } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = Array2::zeros(shape_of(xv));
                    let mut dw = Array2::zeros(shape_of(wv));
                    for (k, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                        let c = wv[(k, 0)];
                        let gd = g.row(d);
                        dx.row_mut(s).zip_mut_with(&gd, |o, &gv| *o += c * gv);
                        dw[(k, 0)] = gd.dot(&xv.row(s));
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::SegmentPool {
                    x,
                    segments,
                    counts,
                    mode,
                } => {
                    let (n, m) = shape_of(self.value(*x));
                    let mut dx = Array2::zeros((n, m));
                    for (row, &s) in segments.iter().enumerate() {
                        let factor = match mode {
                            PoolMode::Add => 1.0,
                            PoolMode::Mean => 1.0 / counts[s] as f64,
                        };
                        let gs = g.row(s);
                        dx.row_mut(row).zip_mut_with(&gs, |o, &v| *o = v * factor);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::EdgeSoftmax(scores, dst) => {
                    let y = &self.nodes[i].value;
                    let groups = group_indices(dst);
                    let mut dx = Array2::zeros(shape_of(y));
                    for rows in groups.iter() {
                        let dot: f64 = rows.iter().map(|&r| g[(r, 0)] * y[(r, 0)]).sum();
                        for &r in rows {
                            dx[(r, 0)] = y[(r, 0)] * (g[(r, 0)] - dot);
                        }
                    }
                    accumulate(&mut grads, *scores, dx);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[i].value;
                    let (n, m) = shape_of(y);
                    let mut dx = Array2::zeros((n, m));
                    for r in 0..n {
                        let dot: f64 = (0..m).map(|c| g[(r, c)] * y[(r, c)]).sum();
                        for c in 0..m {
                            dx[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::CrossEntropy(logits, targets) => {
                    let lv = self.value(*logits);
                    let (n, c) = shape_of(lv);
                    let scale = g[(0, 0)] / n as f64;
                    let mut dx = Array2::zeros((n, c));
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                        for cix in 0..c {
                            let p = (row[cix] - mx).exp() / z;
                            dx[(r, cix)] = scale * (p - if cix == t { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::BceWithLogits(logits, targets) => {
                    let lv = self.value(*logits);
                    let (n, m) = shape_of(lv);
                    let scale = g[(0, 0)] / (n * m) as f64;
                    let mut dx = Array2::zeros((n, m));
                    for ((o, &x), &t) in dx.iter_mut().zip(lv.iter()).zip(targets.iter()) {
                        *o = scale * (sigmoid(x) - t);
                    }
                    accumulate(&mut grads, *logits, dx);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, delta: Array2<f64>) {
    match &mut grads[var.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Rows grouped by id, in ascending id order with rows ascending inside each
/// group (the same order a map from id to row list would yield).
struct IdGroups {
    starts: Vec<usize>,
    rows: Vec<usize>,
}

impl IdGroups {
    fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.starts
            .windows(2)
            .map(|w| &self.rows[w[0]..w[1]])
            .filter(|g| !g.is_empty())
    }
}

fn group_indices(ids: &[usize]) -> IdGroups {
    let bound = ids.iter().copied().max().map_or(0, |m| m + 1);
    let mut starts = vec![0usize; bound + 1];
    for &id in ids {
        starts[id + 1] += 1;
    }
    for k in 0..bound {
        starts[k + 1] += starts[k];
    }
    let mut rows = vec![0usize; ids.len()];
    let mut cursor = starts.clone();
    for (row, &id) in ids.iter().enumerate() {
        rows[cursor[id]] = row;
        cursor[id] += 1;
    }
    IdGroups { starts, rows }
}

/// Gradients keyed by parameter.
#[derive(Debug)]
pub struct GradStore {
    by_param: Vec<Option<Array2<f64>>>,
}

impl GradStore {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn any_non_finite(&self) -> bool {
        self.by_param
            .iter()
            .flatten()
            .any(|g| g.iter().any(|x| !x.is_finite()))
    }
}

/// A tape bound to a parameter set: parameters enter the tape once each, and
/// [`Session::backward`] returns gradients keyed by [`ParamId`].
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    leaves: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            leaves: vec![None; params.len()],
        }
    }

    /// Tape node for a parameter (cached per session).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.index()] {
            return v;
        }
        let v = self.tape.param_leaf(self.params.get(id).clone());
        self.leaves[id.index()] = Some(v);
        v
    }

    pub fn backward(&self, loss: Var) -> Result<GradStore> {
        let node_grads = self.tape.backward(loss)?;
        let mut by_param: Vec<Option<Array2<f64>>> = vec![None; self.params.len()];
        for (leaf, slot) in self.leaves.iter().zip(by_param.iter_mut()) {
            if let Some(v) = leaf {
                *slot = node_grads[v.0].clone();
            }
        }
        Ok(GradStore { by_param })
    }
}
