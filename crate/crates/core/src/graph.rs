//! Reverse-mode automatic differentiation over an eagerly-evaluated
//! computation record.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops
//! evaluate immediately and append a node; [`Graph::backward`] walks the
//! record in reverse, accumulating vector-Jacobian products. Values are
//! addressed by copyable [`Value`] handles. All values are 2-D
//! (`rows x cols`); scalars are `1 x 1`.
//!
//! Parameters are bound from a borrowed [`ParamSet`]; after backward their
//! gradients are flushed into a [`GradStore`] so the graph never needs a
//! mutable borrow of the model.

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamSet};
use crate::tensor::{
    matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, rng_stream, transpose_kernel, Scalar,
    Tensor,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::rc::Rc;

/// Handle to a value in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Attention visibility pattern for masked softmax rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Row `i` may attend to columns `j <= i` (forward direction).
    CausalBelow,
    /// Row `i` may attend to columns `j >= i` (backward direction).
    CausalAbove,
}

impl MaskKind {
    #[inline]
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::CausalBelow => j <= i,
            MaskKind::CausalAbove => j >= i,
        }
    }
}

enum Slot<'a, T> {
    Owned(Tensor<T>),
    Param(ParamId),
    Ext(&'a Tensor<T>),
}

enum Op {
    Matmul { a: Value, b: Value, trans_b: bool },
    Add { a: Value, b: Value },
    Sub { a: Value, b: Value },
    Mul { a: Value, b: Value },
    Div { a: Value, b: Value },
    AddRowBroadcast { m: Value, row: Value },
    MulColBroadcast { m: Value, col: Value },
    MulRowBroadcast { m: Value, row: Value },
    Scale { x: Value, c: f64 },
    Sum { x: Value },
    MeanRows { x: Value },
    Tanh { x: Value },
    Sigmoid { x: Value },
    Relu { x: Value },
    L2Norm { x: Value },
    L1Norm { x: Value },
    ConcatCols { xs: Vec<Value> },
    ConcatRows { xs: Vec<Value> },
    Slice { x: Value, r0: usize, c0: usize },
    Transpose { x: Value },
    GatherRows { x: Value, ids: Rc<Vec<usize>> },
    SoftmaxRows { x: Value },
    SoftmaxCols { x: Value },
    MaskedSoftmaxRows { x: Value, mask: MaskKind },
    LogSumExpRows { x: Value },
    CrossEntropySum { logits: Value, targets: Rc<Vec<usize>> },
    Dropout { x: Value, mask: Rc<Vec<bool>>, keep: f64 },
    LayerNormRows { x: Value, gain: Value, bias: Value, eps: f64 },
    PairwiseDistSum { x: Value, y: Value },
    PairedDistSum { x: Value, y: Value },
    CrfGoldScore { emissions: Value, transitions: Value, tags: Rc<Vec<usize>> },
}

struct Node {
    op: Op,
    out: usize,
}

pub struct Graph<'a, T: Scalar> {
    params: &'a ParamSet<T>,
    slots: Vec<Slot<'a, T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Value>,
    train_mode: bool,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn eval(params: &'a ParamSet<T>) -> Graph<'a, T> {
        Self::with_mode(params, false, 0)
    }

    /// Training-mode graph. `seed` drives dropout masks for this record.
    pub fn train(params: &'a ParamSet<T>, seed: u64) -> Graph<'a, T> {
        Self::with_mode(params, true, seed)
    }

    fn with_mode(params: &'a ParamSet<T>, train_mode: bool, seed: u64) -> Graph<'a, T> {
        Graph {
            params,
            slots: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            nodes: Vec::new(),
            bound: HashMap::new(),
            train_mode,
            rng: rng_stream(seed, 0x6472_6f70),
        }
    }

    pub fn is_train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, slot: Slot<'a, T>, needs_grad: bool) -> Value {
        self.slots.push(slot);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Value(self.slots.len() - 1)
    }

    /// Bind a trainable parameter. Binding the same id twice returns the
    /// same value, so e.g. a tied embedding matrix is one graph leaf.
    pub fn param(&mut self, id: ParamId) -> Value {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(Slot::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// A constant the graph takes ownership of. No gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Value {
        self.push(Slot::Owned(t), false)
    }

    /// A constant borrowed from outside the graph.
    pub fn ext(&mut self, t: &'a Tensor<T>) -> Value {
        self.push(Slot::Ext(t), false)
    }

    /// A gradient-requiring leaf that is not a model parameter. Its
    /// gradient is read back with [`Graph::grad`] after backward.
    pub fn leaf(&mut self, t: Tensor<T>) -> Value {
        self.push(Slot::Owned(t), true)
    }

    pub fn value(&self, v: Value) -> &Tensor<T> {
        match &self.slots[v.0] {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.params.value(*id),
            Slot::Ext(t) => t,
        }
    }

    pub fn grad(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn record(&mut self, op: Op, out: Tensor<T>, needs: bool) -> Value {
        let v = self.push(Slot::Owned(out), needs);
        self.nodes.push(Node { op, out: v.0 });
        v
    }

    fn needs(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.needs_grad[v.0])
    }

    fn dims(&self, v: Value) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`; used for attention scores and the tied softmax.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Value, b: Value, trans_b: bool) -> Result<Value> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}{}",
                self.value(a).shape(),
                self.value(b).shape(),
                if trans_b { " (rhs transposed)" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        if trans_b {
            matmul_nt_kernel(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        } else {
            matmul_kernel(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        }
        let needs = self.needs(&[a, b]);
        Ok(self.record(Op::Matmul { a, b, trans_b }, out, needs))
    }

    fn binary_same_shape(&self, a: Value, b: Value, what: &str) -> Result<(usize, usize)> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::Shape(format!(
                "{what} operands differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok((ar, ac))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "add")?;
        let mut out = Tensor::zeros(&[r, c]);
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(self.value(a).data()).zip(self.value(b).data()) {
            *o = x + y;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.record(Op::Add { a, b }, out, needs))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let mut out = Tensor::zeros(&[r, c]);
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(self.value(a).data()).zip(self.value(b).data()) {
            *o = x - y;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.record(Op::Sub { a, b }, out, needs))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let mut out = Tensor::zeros(&[r, c]);
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(self.value(a).data()).zip(self.value(b).data()) {
            *o = x * y;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.record(Op::Mul { a, b }, out, needs))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(a, b, "div")?;
        let mut out = Tensor::zeros(&[r, c]);
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(self.value(a).data()).zip(self.value(b).data()) {
            *o = x / y;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.record(Op::Div { a, b }, out, needs))
    }

    /// `m + row` with `row` broadcast over every row of `m`.
    pub fn add_row_broadcast(&mut self, m: Value, row: Value) -> Result<Value> {
        let (r, c) = self.dims(m);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!(
                "row broadcast wants 1x{c}, got {:?} against {:?}",
                self.value(row).shape(),
                self.value(m).shape()
            )));
        }
        let mut out = Tensor::zeros(&[r, c]);
        {
            let mv = self.value(m).data();
            let rv = self.value(row).data();
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[i * c + j] = mv[i * c + j] + rv[j];
                }
            }
        }
        let needs = self.needs(&[m, row]);
        Ok(self.record(Op::AddRowBroadcast { m, row }, out, needs))
    }

    /// `m * col` with `col: r x 1` scaling each row of `m`.
    pub fn mul_col_broadcast(&mut self, m: Value, col: Value) -> Result<Value> {
        let (r, c) = self.dims(m);
        let (cr, cc) = self.dims(col);
        if cr != r || cc != 1 {
            return Err(Error::Shape(format!(
                "col broadcast wants {r}x1, got {:?} against {:?}",
                self.value(col).shape(),
                self.value(m).shape()
            )));
        }
        let mut out = Tensor::zeros(&[r, c]);
        {
            let mv = self.value(m).data();
            let cv = self.value(col).data();
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[i * c + j] = mv[i * c + j] * cv[i];
                }
            }
        }
        let needs = self.needs(&[m, col]);
        Ok(self.record(Op::MulColBroadcast { m, col }, out, needs))
    }

    /// `m * row` with `row: 1 x c` scaling each column of `m`.
    pub fn mul_row_broadcast(&mut self, m: Value, row: Value) -> Result<Value> {
        let (r, c) = self.dims(m);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!(
                "row broadcast wants 1x{c}, got {:?} against {:?}",
                self.value(row).shape(),
                self.value(m).shape()
            )));
        }
        let mut out = Tensor::zeros(&[r, c]);
        {
            let mv = self.value(m).data();
            let rv = self.value(row).data();
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[i * c + j] = mv[i * c + j] * rv[j];
                }
            }
        }
        let needs = self.needs(&[m, row]);
        Ok(self.record(Op::MulRowBroadcast { m, row }, out, needs))
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        let s = T::from_f64(c);
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        let needs = self.needs(&[x]);
        self.record(Op::Scale { x, c }, out, needs)
    }

    pub fn neg(&mut self, x: Value) -> Value {
        self.scale(x, -1.0)
    }

    pub fn sum(&mut self, x: Value) -> Value {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.record(Op::Sum { x }, out, needs)
    }

    /// Column means over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: Value) -> Value {
        let (r, c) = self.dims(x);
        let mut out = Tensor::zeros(&[1, c]);
        {
            let xv = self.value(x).data();
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[j] = out.data_mut()[j] + xv[i * c + j];
                }
            }
            let inv = T::from_f64(1.0 / r as f64);
            out.scale_assign(inv);
        }
        let needs = self.needs(&[x]);
        self.record(Op::MeanRows { x }, out, needs)
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let needs = self.needs(&[x]);
        self.record(Op::Tanh { x }, out, needs)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let one = T::one();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = one / (one + (-*v).exp()));
        let needs = self.needs(&[x]);
        self.record(Op::Sigmoid { x }, out, needs)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
        let needs = self.needs(&[x]);
        self.record(Op::Relu { x }, out, needs)
    }

    /// Euclidean norm of all entries, as a scalar. The backward rule uses
    /// the zero subgradient at the origin so gradients stay finite.
    pub fn l2_norm(&mut self, x: Value) -> Value {
        let out = Tensor::scalar(self.value(x).squared_norm().sqrt());
        let needs = self.needs(&[x]);
        self.record(Op::L2Norm { x }, out, needs)
    }

    /// Sum of absolute values, as a scalar. Zero subgradient at zero.
    pub fn l1_norm(&mut self, x: Value) -> Value {
        let out = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        let needs = self.needs(&[x]);
        self.record(Op::L1Norm { x }, out, needs)
    }

    pub fn concat_cols(&mut self, xs: &[Value]) -> Result<Value> {
        assert!(!xs.is_empty());
        let r = self.dims(xs[0]).0;
        let mut total_c = 0;
        for &v in xs {
            let (vr, vc) = self.dims(v);
            if vr != r {
                return Err(Error::Shape(format!(
                    "concat_cols row counts differ: {r} vs {vr}"
                )));
            }
            total_c += vc;
        }
        let mut out = Tensor::zeros(&[r, total_c]);
        let mut off = 0;
        for &v in xs {
            let (_, vc) = self.dims(v);
            let src = self.value(v).data();
            for i in 0..r {
                for j in 0..vc {
                    out.data_mut()[i * total_c + off + j] = src[i * vc + j];
                }
            }
            off += vc;
        }
        let needs = self.needs(xs);
        Ok(self.record(Op::ConcatCols { xs: xs.to_vec() }, out, needs))
    }

    pub fn concat_rows(&mut self, xs: &[Value]) -> Result<Value> {
        assert!(!xs.is_empty());
        let c = self.dims(xs[0]).1;
        let mut total_r = 0;
        for &v in xs {
            let (vr, vc) = self.dims(v);
            if vc != c {
                return Err(Error::Shape(format!(
                    "concat_rows column counts differ: {c} vs {vc}"
                )));
            }
            total_r += vr;
        }
        let mut out = Tensor::zeros(&[total_r, c]);
        let mut off = 0;
        for &v in xs {
            let (vr, _) = self.dims(v);
            let src = self.value(v).data();
            out.data_mut()[off * c..(off + vr) * c].copy_from_slice(src);
            off += vr;
        }
        let needs = self.needs(xs);
        Ok(self.record(Op::ConcatRows { xs: xs.to_vec() }, out, needs))
    }

    /// Rectangular block `x[r0..r0+nr, c0..c0+nc]`.
    pub fn slice(&mut self, x: Value, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Value> {
        let (r, c) = self.dims(x);
        if r0 + nr > r || c0 + nc > c {
            return Err(Error::Shape(format!(
                "slice [{r0}+{nr}, {c0}+{nc}] out of bounds for {:?}",
                self.value(x).shape()
            )));
        }
        let mut out = Tensor::zeros(&[nr, nc]);
        {
            let xv = self.value(x).data();
            for i in 0..nr {
                for j in 0..nc {
                    out.data_mut()[i * nc + j] = xv[(r0 + i) * c + c0 + j];
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.record(Op::Slice { x, r0, c0 }, out, needs))
    }

    pub fn transpose(&mut self, x: Value) -> Value {
        let (r, c) = self.dims(x);
        let mut out = Tensor::zeros(&[c, r]);
        transpose_kernel(self.value(x).data(), out.data_mut(), r, c);
        let needs = self.needs(&[x]);
        self.record(Op::Transpose { x }, out, needs)
    }

    /// Row gather: `out[i] = x[ids[i]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Value, ids: Vec<usize>) -> Result<Value> {
        let (r, c) = self.dims(x);
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with empty index list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut out = Tensor::zeros(&[ids.len(), c]);
        {
            let xv = self.value(x).data();
            for (i, &id) in ids.iter().enumerate() {
                out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&xv[id * c..(id + 1) * c]);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.record(Op::GatherRows { x, ids: Rc::new(ids) }, out, needs))
    }

    /// Softmax along rows (axis 1) or columns (axis 0), with max
    /// subtraction. Non-finite input is a numeric error.
    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        if axis > 1 {
            return Err(Error::Contract(format!("softmax axis {axis} invalid for 2-D value")));
        }
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        if axis == 1 {
            Ok(self.softmax_rows(x))
        } else {
            Ok(self.softmax_cols(x))
        }
    }

    pub fn softmax_rows(&mut self, x: Value) -> Value {
        let (r, c) = self.dims(x);
        let mut out = Tensor::zeros(&[r, c]);
        {
            let xv = self.value(x).data();
            for i in 0..r {
                softmax_slice(&xv[i * c..(i + 1) * c], &mut out.data_mut()[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(&[x]);
        self.record(Op::SoftmaxRows { x }, out, needs)
    }

    pub fn softmax_cols(&mut self, x: Value) -> Value {
        let (r, c) = self.dims(x);
        let mut out = Tensor::zeros(&[r, c]);
        {
            let xv = self.value(x).data();
            let mut col = vec![T::zero(); r];
            let mut sm = vec![T::zero(); r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = xv[i * c + j];
                }
                softmax_slice(&col, &mut sm);
                for i in 0..r {
                    out.data_mut()[i * c + j] = sm[i];
                }
            }
        }
        let needs = self.needs(&[x]);
        self.record(Op::SoftmaxCols { x }, out, needs)
    }

    /// Row softmax restricted to the positions the mask allows. Disallowed
    /// outputs are exactly zero and never contribute, which keeps hidden
    /// states bit-identical under perturbation of invisible positions.
    pub fn masked_softmax_rows(&mut self, x: Value, mask: MaskKind) -> Value {
        let (r, c) = self.dims(x);
        let mut out = Tensor::zeros(&[r, c]);
        {
            let xv = self.value(x).data();
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mut m = T::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if mask.allows(i, j) && v > m {
                        m = v;
                    }
                }
                let mut z = T::zero();
                for (j, &v) in row.iter().enumerate() {
                    if mask.allows(i, j) {
                        let e = (v - m).exp();
                        out.data_mut()[i * c + j] = e;
                        z = z + e;
                    }
                }
                for j in 0..c {
                    if mask.allows(i, j) {
                        out.data_mut()[i * c + j] = out.data_mut()[i * c + j] / z;
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        self.record(Op::MaskedSoftmaxRows { x, mask }, out, needs)
    }

    /// Row-wise log-sum-exp: `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, x: Value) -> Value {
        let (r, c) = self.dims(x);
        let mut out = Tensor::zeros(&[r, 1]);
        {
            let xv = self.value(x).data();
            for i in 0..r {
                out.data_mut()[i] = logsumexp_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(&[x]);
        self.record(Op::LogSumExpRows { x }, out, needs)
    }

    /// Summed softmax cross-entropy: `sum_t -log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy_sum(&mut self, logits: Value, targets: Vec<usize>) -> Result<Value> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "cross_entropy_sum got {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy_sum target {bad} out of range for {c} classes"
            )));
        }
        let mut loss = T::zero();
        {
            let xv = self.value(logits).data();
            for (i, &t) in targets.iter().enumerate() {
                let row = &xv[i * c..(i + 1) * c];
                loss = loss + logsumexp_slice(row) - row[t];
            }
        }
        let needs = self.needs(&[logits]);
        Ok(self.record(
            Op::CrossEntropySum { logits, targets: Rc::new(targets) },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Inverted dropout: in train mode each entry is kept with probability
    /// `1 - p` and scaled by `1/(1-p)`; in eval mode this is the identity.
    pub fn dropout(&mut self, x: Value, p: f64) -> Value {
        if !self.train_mode || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<bool> = (0..n).map(|_| self.rng.gen_range(0.0..1.0) < keep).collect();
        let scale = T::from_f64(1.0 / keep);
        let mut out = self.value(x).clone();
        for (v, &k) in out.data_mut().iter_mut().zip(mask.iter()) {
            *v = if k { *v * scale } else { T::zero() };
        }
        let needs = self.needs(&[x]);
        self.record(Op::Dropout { x, mask: Rc::new(mask), keep }, out, needs)
    }

    /// Per-row layer normalization with learned gain and bias (`1 x c`).
    pub fn layer_norm_rows(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        let (r, c) = self.dims(x);
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let (vr, vc) = self.dims(v);
            if vr != 1 || vc != c {
                return Err(Error::Shape(format!(
                    "layer_norm {what} wants 1x{c}, got {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let mut out = Tensor::zeros(&[r, c]);
        {
            let xv = self.value(x).data();
            let gv = self.value(gain).data();
            let bv = self.value(bias).data();
            let epsv = T::from_f64(eps);
            let invc = T::from_f64(1.0 / c as f64);
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mu = row.iter().copied().sum::<T>() * invc;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * invc;
                let rstd = T::one() / (var + epsv).sqrt();
                for j in 0..c {
                    out.data_mut()[i * c + j] = gv[j] * (row[j] - mu) * rstd + bv[j];
                }
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.record(Op::LayerNormRows { x, gain, bias, eps }, out, needs))
    }

    /// Sum of Euclidean distances over all row pairs of `x` and `y`.
    /// Coincident pairs contribute zero distance and zero gradient.
    pub fn pairwise_dist_sum(&mut self, x: Value, y: Value) -> Result<Value> {
        let (xr, xc) = self.dims(x);
        let (yr, yc) = self.dims(y);
        if xc != yc {
            return Err(Error::Shape(format!(
                "pairwise_dist_sum widths differ: {xc} vs {yc}"
            )));
        }
        let mut acc = T::zero();
        {
            let xv = self.value(x).data();
            let yv = self.value(y).data();
            for i in 0..xr {
                let xi = &xv[i * xc..(i + 1) * xc];
                for j in 0..yr {
                    let yj = &yv[j * yc..(j + 1) * yc];
                    acc = acc + crate::tensor::euclidean(xi, yj);
                }
            }
        }
        let needs = self.needs(&[x, y]);
        Ok(self.record(Op::PairwiseDistSum { x, y }, Tensor::scalar(acc), needs))
    }

    /// Sum of Euclidean distances over matched rows: `sum_i ||x_i - y_i||`.
    pub fn paired_dist_sum(&mut self, x: Value, y: Value) -> Result<Value> {
        let (r, c) = self.binary_same_shape(x, y, "paired_dist_sum")?;
        let mut acc = T::zero();
        {
            let xv = self.value(x).data();
            let yv = self.value(y).data();
            for i in 0..r {
                acc = acc + crate::tensor::euclidean(&xv[i * c..(i + 1) * c], &yv[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(&[x, y]);
        Ok(self.record(Op::PairedDistSum { x, y }, Tensor::scalar(acc), needs))
    }

    /// Path score of a gold tag sequence under a linear-chain CRF with
    /// synthetic START (= T) and STOP (= T+1) states appended to the
    /// `(T+2) x (T+2)` transition matrix.
    pub fn crf_gold_score(
        &mut self,
        emissions: Value,
        transitions: Value,
        tags: Vec<usize>,
    ) -> Result<Value> {
        let (n, t) = self.dims(emissions);
        let (tr, tc) = self.dims(transitions);
        if tr != t + 2 || tc != t + 2 {
            return Err(Error::Shape(format!(
                "transitions want {}x{}, got {:?}",
                t + 2,
                t + 2,
                self.value(transitions).shape()
            )));
        }
        if tags.len() != n {
            return Err(Error::Contract(format!(
                "gold tags length {} does not match {n} emission rows",
                tags.len()
            )));
        }
        if let Some(&bad) = tags.iter().find(|&&y| y >= t) {
            return Err(Error::Contract(format!("gold tag index {bad} out of range for {t} tags")));
        }
        let start = t;
        let stop = t + 1;
        let mut score = T::zero();
        {
            let ev = self.value(emissions).data();
            let tv = self.value(transitions).data();
            let w = t + 2;
            score = score + tv[start * w + tags[0]];
            for (i, &y) in tags.iter().enumerate() {
                score = score + ev[i * t + y];
                if i + 1 < n {
                    score = score + tv[y * w + tags[i + 1]];
                }
            }
            score = score + tv[tags[n - 1] * w + stop];
        }
        let needs = self.needs(&[emissions, transitions]);
        Ok(self.record(
            Op::CrfGoldScore { emissions, transitions, tags: Rc::new(tags) },
            Tensor::scalar(score),
            needs,
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every gradient-requiring value
    /// reachable from the loss receives its accumulated adjoint; callers
    /// zero or flush gradients between passes.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.accumulate(loss, Tensor::scalar(T::one()));
        for idx in (0..self.nodes.len()).rev() {
            if self.grads[self.nodes[idx].out].is_none() {
                continue;
            }
            self.backward_node(idx);
        }
        Ok(())
    }

    /// Flush gradients of bound parameters into a grad store. Parameters
    /// bound but unreached by the loss flush zeros (they are still counted
    /// as touched).
    pub fn flush_param_grads(&mut self, store: &mut GradStore<T>) {
        let bound: Vec<(ParamId, Value)> = self.bound.iter().map(|(&k, &v)| (k, v)).collect();
        for (id, v) in bound {
            match self.grads[v.0].take() {
                Some(g) => store.accumulate(id, &g),
                None => store.accumulate(id, &Tensor::zeros(self.params.value(id).shape())),
            }
        }
    }

    fn accumulate(&mut self, v: Value, delta: Tensor<T>) {
        if !self.needs_grad[v.0] {
            return;
        }
        // Adjoints always match the value's layout; normalize the recorded
        // shape so 1-D leaves receive 1-D gradients.
        let delta = delta.with_shape(self.value(v).shape());
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn out_grad(&self, idx: usize) -> Tensor<T> {
        self.grads[self.nodes[idx].out].clone().expect("grad present")
    }

    fn backward_node(&mut self, idx: usize) {
        let g = self.out_grad(idx);
        // Ops are cheap to destructure; values are read through self.value.
        enum Pending<T> {
            One(Value, Tensor<T>),
            Two(Value, Tensor<T>, Value, Tensor<T>),
            Three(Value, Tensor<T>, Value, Tensor<T>, Value, Tensor<T>),
            Many(Vec<(Value, Tensor<T>)>),
        }
        let pending: Pending<T> = match &self.nodes[idx].op {
            Op::Matmul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = if *trans_b { self.dims(*b).0 } else { self.dims(*b).1 };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gv = g.data();
                if !*trans_b {
                    // da = g * b^T ; db = a^T * g
                    let mut da = Tensor::zeros(&[m, k]);
                    matmul_nt_kernel(gv, bv, da.data_mut(), m, n, k);
                    let mut db = Tensor::zeros(&[k, n]);
                    matmul_tn_kernel(av, gv, db.data_mut(), k, m, n);
                    Pending::Two(*a, da, *b, db)
                } else {
                    // out = a * b^T : da = g * b ; db = g^T * a
                    let mut da = Tensor::zeros(&[m, k]);
                    matmul_kernel(gv, bv, da.data_mut(), m, n, k);
                    let mut db = Tensor::zeros(&[n, k]);
                    matmul_tn_kernel(gv, av, db.data_mut(), n, m, k);
                    Pending::Two(*a, da, *b, db)
                }
            }
            Op::Add { a, b } => Pending::Two(*a, g.clone(), *b, g),
            Op::Sub { a, b } => {
                let mut nb = g.clone();
                nb.scale_assign(-T::one());
                Pending::Two(*a, g, *b, nb)
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(bv.iter()) {
                    *d = *d * y;
                }
                let mut db = g.clone();
                for (d, &x) in db.data_mut().iter_mut().zip(av.iter()) {
                    *d = *d * x;
                }
                Pending::Two(*a, da, *b, db)
            }
            Op::Div { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(bv.iter()) {
                    *d = *d / y;
                }
                let mut db = g.clone();
                for ((d, &x), &y) in db.data_mut().iter_mut().zip(av.iter()).zip(bv.iter()) {
                    *d = -*d * x / (y * y);
                }
                Pending::Two(*a, da, *b, db)
            }
            Op::AddRowBroadcast { m, row } => {
                let (r, c) = self.dims(*m);
                let mut drow = Tensor::zeros(&[1, c]);
                for i in 0..r {
                    for j in 0..c {
                        drow.data_mut()[j] = drow.data_mut()[j] + g.data()[i * c + j];
                    }
                }
                Pending::Two(*m, g, *row, drow)
            }
            Op::MulColBroadcast { m, col } => {
                let (r, c) = self.dims(*m);
                let mv = self.value(*m).data();
                let cv = self.value(*col).data();
                let mut dm = g.clone();
                let mut dcol = Tensor::zeros(&[r, 1]);
                for i in 0..r {
                    let mut acc = T::zero();
                    for j in 0..c {
                        acc = acc + g.data()[i * c + j] * mv[i * c + j];
                        dm.data_mut()[i * c + j] = dm.data_mut()[i * c + j] * cv[i];
                    }
                    dcol.data_mut()[i] = acc;
                }
                Pending::Two(*m, dm, *col, dcol)
            }
            Op::MulRowBroadcast { m, row } => {
                let (r, c) = self.dims(*m);
                let mv = self.value(*m).data();
                let rv = self.value(*row).data();
                let mut dm = g.clone();
                let mut drow = Tensor::zeros(&[1, c]);
                for i in 0..r {
                    for j in 0..c {
                        drow.data_mut()[j] = drow.data_mut()[j] + g.data()[i * c + j] * mv[i * c + j];
                        dm.data_mut()[i * c + j] = dm.data_mut()[i * c + j] * rv[j];
                    }
                }
                Pending::Two(*m, dm, *row, drow)
            }
            Op::Scale { x, c } => {
                let mut dx = g;
                dx.scale_assign(T::from_f64(*c));
                Pending::One(*x, dx)
            }
            Op::Sum { x } => {
                let s = g.item();
                Pending::One(*x, Tensor::full(self.value(*x).shape(), s))
            }
            Op::MeanRows { x } => {
                let (r, c) = self.dims(*x);
                let inv = T::from_f64(1.0 / r as f64);
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = g.data()[j] * inv;
                    }
                }
                Pending::One(*x, dx)
            }
            Op::Tanh { x } => {
                let out = self.node_out(idx);
                let mut dx = g;
                for (d, &y) in dx.data_mut().iter_mut().zip(out.iter()) {
                    *d = *d * (T::one() - y * y);
                }
                Pending::One(*x, dx)
            }
            Op::Sigmoid { x } => {
                let out = self.node_out(idx);
                let mut dx = g;
                for (d, &y) in dx.data_mut().iter_mut().zip(out.iter()) {
                    *d = *d * y * (T::one() - y);
                }
                Pending::One(*x, dx)
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let mut dx = g;
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.iter()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                Pending::One(*x, dx)
            }
            Op::L2Norm { x } => {
                let y = self.node_out(idx)[0];
                let s = g.item();
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(self.value(*x).shape());
                if y > T::zero() {
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.iter()) {
                        *d = s * v / y;
                    }
                }
                Pending::One(*x, dx)
            }
            Op::L1Norm { x } => {
                let s = g.item();
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.iter()) {
                    *d = if v > T::zero() {
                        s
                    } else if v < T::zero() {
                        -s
                    } else {
                        T::zero()
                    };
                }
                Pending::One(*x, dx)
            }
            Op::ConcatCols { xs } => {
                let total_c = g.cols();
                let r = g.rows();
                let mut parts = Vec::with_capacity(xs.len());
                let mut off = 0;
                for &v in xs {
                    let (_, vc) = self.dims(v);
                    let mut dv = Tensor::zeros(&[r, vc]);
                    for i in 0..r {
                        for j in 0..vc {
                            dv.data_mut()[i * vc + j] = g.data()[i * total_c + off + j];
                        }
                    }
                    parts.push((v, dv));
                    off += vc;
                }
                Pending::Many(parts)
            }
            Op::ConcatRows { xs } => {
                let c = g.cols();
                let mut parts = Vec::with_capacity(xs.len());
                let mut off = 0;
                for &v in xs {
                    let (vr, _) = self.dims(v);
                    let mut dv = Tensor::zeros(&[vr, c]);
                    dv.data_mut().copy_from_slice(&g.data()[off * c..(off + vr) * c]);
                    parts.push((v, dv));
                    off += vr;
                }
                Pending::Many(parts)
            }
            Op::Slice { x, r0, c0 } => {
                let (r, c) = self.dims(*x);
                let (nr, nc) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..nr {
                    for j in 0..nc {
                        dx.data_mut()[(r0 + i) * c + c0 + j] = g.data()[i * nc + j];
                    }
                }
                Pending::One(*x, dx)
            }
            Op::Transpose { x } => {
                let (gr, gc) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(&[gc, gr]);
                transpose_kernel(g.data(), dx.data_mut(), gr, gc);
                Pending::One(*x, dx)
            }
            Op::GatherRows { x, ids } => {
                let (r, c) = self.dims(*x);
                let mut dx = Tensor::zeros(&[r, c]);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dx.data_mut()[id * c + j] = dx.data_mut()[id * c + j] + g.data()[i * c + j];
                    }
                }
                Pending::One(*x, dx)
            }
            Op::SoftmaxRows { x } => {
                let out = self.node_out(idx);
                let (r, c) = self.dims(*x);
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let p = &out[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: T = p.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = p[j] * (gr[j] - dot);
                    }
                }
                Pending::One(*x, dx)
            }
            Op::SoftmaxCols { x } => {
                let out = self.node_out(idx);
                let (r, c) = self.dims(*x);
                let mut dx = Tensor::zeros(&[r, c]);
                for j in 0..c {
                    let mut dot = T::zero();
                    for i in 0..r {
                        dot = dot + out[i * c + j] * g.data()[i * c + j];
                    }
                    for i in 0..r {
                        dx.data_mut()[i * c + j] = out[i * c + j] * (g.data()[i * c + j] - dot);
                    }
                }
                Pending::One(*x, dx)
            }
            Op::MaskedSoftmaxRows { x, mask } => {
                let out = self.node_out(idx);
                let (r, c) = self.dims(*x);
                let mask = *mask;
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let mut dot = T::zero();
                    for j in 0..c {
                        if mask.allows(i, j) {
                            dot = dot + out[i * c + j] * g.data()[i * c + j];
                        }
                    }
                    for j in 0..c {
                        if mask.allows(i, j) {
                            dx.data_mut()[i * c + j] = out[i * c + j] * (g.data()[i * c + j] - dot);
                        }
                    }
                }
                Pending::One(*x, dx)
            }
            Op::LogSumExpRows { x } => {
                let out = self.node_out(idx);
                let (r, c) = self.dims(*x);
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let gi = g.data()[i];
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = gi * (xv[i * c + j] - out[i]).exp();
                    }
                }
                Pending::One(*x, dx)
            }
            Op::CrossEntropySum { logits, targets } => {
                let (r, c) = self.dims(*logits);
                let s = g.item();
                let xv = self.value(*logits).data();
                let mut dx = Tensor::zeros(&[r, c]);
                let mut sm = vec![T::zero(); c];
                for (i, &t) in targets.iter().enumerate() {
                    softmax_slice(&xv[i * c..(i + 1) * c], &mut sm);
                    for j in 0..c {
                        let ind = if j == t { T::one() } else { T::zero() };
                        dx.data_mut()[i * c + j] = s * (sm[j] - ind);
                    }
                }
                Pending::One(*logits, dx)
            }
            Op::Dropout { x, mask, keep } => {
                let scale = T::from_f64(1.0 / *keep);
                let mut dx = g;
                for (d, &k) in dx.data_mut().iter_mut().zip(mask.iter()) {
                    *d = if k { *d * scale } else { T::zero() };
                }
                Pending::One(*x, dx)
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (r, c) = self.dims(*x);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let epsv = T::from_f64(*eps);
                let invc = T::from_f64(1.0 / c as f64);
                let mut dx = Tensor::zeros(&[r, c]);
                let mut dgain = Tensor::zeros(&[1, c]);
                let mut dbias = Tensor::zeros(&[1, c]);
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let mu = row.iter().copied().sum::<T>() * invc;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * invc;
                    let rstd = T::one() / (var + epsv).sqrt();
                    // dxhat_j = g_j * gain_j ; mean-centered projections
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..c {
                        let xh = (row[j] - mu) * rstd;
                        let dxh = gr[j] * gv[j];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh;
                        dgain.data_mut()[j] = dgain.data_mut()[j] + gr[j] * xh;
                        dbias.data_mut()[j] = dbias.data_mut()[j] + gr[j];
                    }
                    for j in 0..c {
                        let xh = (row[j] - mu) * rstd;
                        let dxh = gr[j] * gv[j];
                        dx.data_mut()[i * c + j] =
                            rstd * (dxh - invc * sum_dxh - invc * xh * sum_dxh_xh);
                    }
                }
                Pending::Three(*x, dx, *gain, dgain, *bias, dbias)
            }
            Op::PairwiseDistSum { x, y } => {
                let s = g.item();
                let (xr, c) = self.dims(*x);
                let (yr, _) = self.dims(*y);
                let xv = self.value(*x).data();
                let yv = self.value(*y).data();
                let mut dx = Tensor::zeros(&[xr, c]);
                let mut dy = Tensor::zeros(&[yr, c]);
                for i in 0..xr {
                    let xi = &xv[i * c..(i + 1) * c];
                    for j in 0..yr {
                        let yj = &yv[j * c..(j + 1) * c];
                        let d = crate::tensor::euclidean(xi, yj);
                        if d > T::zero() {
                            let inv = s / d;
                            for k in 0..c {
                                let diff = (xi[k] - yj[k]) * inv;
                                dx.data_mut()[i * c + k] = dx.data_mut()[i * c + k] + diff;
                                dy.data_mut()[j * c + k] = dy.data_mut()[j * c + k] - diff;
                            }
                        }
                    }
                }
                Pending::Two(*x, dx, *y, dy)
            }
            Op::PairedDistSum { x, y } => {
                let s = g.item();
                let (r, c) = self.dims(*x);
                let xv = self.value(*x).data();
                let yv = self.value(*y).data();
                let mut dx = Tensor::zeros(&[r, c]);
                let mut dy = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let xi = &xv[i * c..(i + 1) * c];
                    let yi = &yv[i * c..(i + 1) * c];
                    let d = crate::tensor::euclidean(xi, yi);
                    if d > T::zero() {
                        let inv = s / d;
                        for k in 0..c {
                            let diff = (xi[k] - yi[k]) * inv;
                            dx.data_mut()[i * c + k] = diff;
                            dy.data_mut()[i * c + k] = -diff;
                        }
                    }
                }
                Pending::Two(*x, dx, *y, dy)
            }
            Op::CrfGoldScore { emissions, transitions, tags, .. } => {
                let s = g.item();
                let (n, t) = self.dims(*emissions);
                let w = t + 2;
                let mut de = Tensor::zeros(&[n, t]);
                let mut dt = Tensor::zeros(&[w, w]);
                let start = t;
                let stop = t + 1;
                dt.data_mut()[start * w + tags[0]] = dt.data_mut()[start * w + tags[0]] + s;
                for (i, &y) in tags.iter().enumerate() {
                    de.data_mut()[i * t + y] = de.data_mut()[i * t + y] + s;
                    if i + 1 < n {
                        dt.data_mut()[y * w + tags[i + 1]] = dt.data_mut()[y * w + tags[i + 1]] + s;
                    }
                }
                dt.data_mut()[tags[n - 1] * w + stop] = dt.data_mut()[tags[n - 1] * w + stop] + s;
                Pending::Two(*emissions, de, *transitions, dt)
            }
        };
        match pending {
            Pending::One(v, d) => self.accumulate(v, d),
            Pending::Two(v1, d1, v2, d2) => {
                self.accumulate(v1, d1);
                self.accumulate(v2, d2);
            }
            Pending::Three(v1, d1, v2, d2, v3, d3) => {
                self.accumulate(v1, d1);
                self.accumulate(v2, d2);
                self.accumulate(v3, d3);
            }
            Pending::Many(parts) => {
                for (v, d) in parts {
                    self.accumulate(v, d);
                }
            }
        }
    }

    /// Data of the output tensor of node `idx`, cloned out to sidestep the
    /// borrow of `self` during backward.
    fn node_out(&self, idx: usize) -> Vec<T> {
        self.value(Value(self.nodes[idx].out)).data().to_vec()
    }
}

fn softmax_slice<T: Scalar>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - m).exp();
        *o = e;
        z = z + e;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}

fn logsumexp_slice<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if !m.is_finite() {
        return m;
    }
    let z: T = x.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln()
}
