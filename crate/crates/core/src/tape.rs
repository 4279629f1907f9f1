//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. Because a node can only reference nodes that already exist,
//! the tape is topologically ordered by construction and `backward` is a
//! single reverse sweep.
//!
//! A tape is single-writer. Parallel forward passes each own their own tape
//! and share parameters by value; gradients are reduced afterwards.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

type OpResult = Result<Var, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, Real),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Outer(usize, usize),
    AddOuter(usize, usize, usize),
    Softmax(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Transpose(usize),
    Repeat { src: usize, counts: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Variance(usize),
    Standardize { src: usize, inv_std: Real },
    CrossEntropy { logits: usize, target: usize, probs: Vec<Real> },
    WeightedSum(Vec<(usize, Real)>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<Real>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            backward_done: false,
        }
    }

    /// Enables or disables the per-operation finiteness check. It is on by
    /// default in debug builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `len`. Vars pointing past the new end
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Allows another `backward` call on the same tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_unchecked(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_unchecked(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    pub fn scalar(&self, v: Var) -> Real {
        self.node(v).value[0]
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    fn node(&self, v: Var) -> &Node {
        assert!(self.contains(v), "var does not belong to this tape");
        &self.nodes[v.index]
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize, TensorError> {
        if self.contains(v) {
            Ok(v.index)
        } else {
            Err(TensorError::Lookup(format!("{op}: operand is not on this tape")))
        }
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var { index, tape: self.id }
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<Real>, op: Op, inputs: &[usize]) -> OpResult {
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(shape, value, op, requires_grad))
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<(), TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::dimension(
                op,
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(Real, Real) -> Real, op: fn(usize, usize) -> Op) -> OpResult {
        let (ia, ib) = (self.check(a, name)?, self.check(b, name)?);
        self.same_shape(ia, ib, name)?;
        let value = self.nodes[ia].value.iter().zip(&self.nodes[ib].value).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[ia].shape.clone();
        self.push(name, shape, value, op(ia, ib), &[ia, ib])
    }

    fn map(&mut self, a: Var, name: &'static str, f: impl Fn(Real) -> Real, op: fn(usize) -> Op) -> OpResult {
        let ia = self.check(a, name)?;
        let value = self.nodes[ia].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        self.push(name, shape, value, op(ia), &[ia])
    }

    fn vector_len(&self, i: usize, op: &'static str) -> Result<usize, TensorError> {
        match self.nodes[i].shape.as_slice() {
            [n] => Ok(*n),
            s => Err(TensorError::dimension(op, format!("expected a vector, got shape {s:?}"))),
        }
    }

    fn matrix_dims(&self, i: usize, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.nodes[i].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::dimension(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> OpResult {
        let ia = self.check(a, "scale")?;
        let value = self.nodes[ia].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[ia].shape.clone();
        self.push("scale", shape, value, Op::Scale(ia, c), &[ia])
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (ia, ib) = (self.check(a, "matmul")?, self.check(b, "matmul")?);
        let (m, k) = self.matrix_dims(ia, "matmul")?;
        let (k2, n) = self.matrix_dims(ib, "matmul")?;
        if k != k2 {
            return Err(TensorError::dimension("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = av[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for (o, &b_pj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += a_ip * b_pj;
                }
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Matrix-vector product `a[m×k] · x[k]`, returning a vector.
    pub fn matvec(&mut self, a: Var, x: Var) -> OpResult {
        let (ia, ix) = (self.check(a, "matvec")?, self.check(x, "matvec")?);
        let (m, k) = self.matrix_dims(ia, "matvec")?;
        let k2 = self.vector_len(ix, "matvec")?;
        if k != k2 {
            return Err(TensorError::dimension("matvec", format!("matrix has {k} columns, vector has {k2} entries")));
        }
        let av = &self.nodes[ia].value;
        let xv = &self.nodes[ix].value;
        let out = av.chunks_exact(k).map(|row| dot(row, xv)).collect();
        self.push("matvec", vec![m], out, Op::MatVec(ia, ix), &[ia, ix])
    }

    pub fn outer(&mut self, u: Var, v: Var) -> OpResult {
        let (iu, iv) = (self.check(u, "outer")?, self.check(v, "outer")?);
        let m = self.vector_len(iu, "outer")?;
        let n = self.vector_len(iv, "outer")?;
        let uv = &self.nodes[iu].value;
        let vv = &self.nodes[iv].value;
        let mut out = Vec::with_capacity(m * n);
        for &ui in uv {
            out.extend(vv.iter().map(|&vj| ui * vj));
        }
        self.push("outer", vec![m, n], out, Op::Outer(iu, iv), &[iu, iv])
    }

    /// `w + u ⊗ v` as one node.
    pub fn add_outer(&mut self, w: Var, u: Var, v: Var) -> OpResult {
        let (iw, iu, iv) = (self.check(w, "add_outer")?, self.check(u, "add_outer")?, self.check(v, "add_outer")?);
        let (m, n) = self.matrix_dims(iw, "add_outer")?;
        let (mu, nv) = (self.vector_len(iu, "add_outer")?, self.vector_len(iv, "add_outer")?);
        if (m, n) != (mu, nv) {
            return Err(TensorError::dimension("add_outer", format!("matrix {m}×{n} vs outer {mu}×{nv}")));
        }
        let mut out = self.nodes[iw].value.clone();
        let uv = &self.nodes[iu].value;
        let vv = &self.nodes[iv].value;
        for (row, &ui) in out.chunks_exact_mut(n).zip(uv) {
            if ui == 0.0 {
                continue;
            }
            for (o, &vj) in row.iter_mut().zip(vv) {
                *o += ui * vj;
            }
        }
        self.push("add_outer", vec![m, n], out, Op::AddOuter(iw, iu, iv), &[iw, iu, iv])
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> OpResult {
        let ia = self.check(a, "softmax")?;
        let n = self.vector_len(ia, "softmax")?;
        let out = softmax_values(&self.nodes[ia].value);
        self.push("softmax", vec![n], out, Op::Softmax(ia), &[ia])
    }

    pub fn sigmoid(&mut self, a: Var) -> OpResult {
        self.map(a, "sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> OpResult {
        self.map(a, "relu", |x| x.max(0.0), Op::Relu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> OpResult {
        self.map(a, "gelu", |x| gelu_parts(x).0, Op::Gelu)
    }

    /// Concatenation along axis 0: vectors end to end, or matrices by rows.
    pub fn concat(&mut self, parts: &[Var]) -> OpResult {
        if parts.is_empty() {
            return Err(TensorError::dimension("concat", "no operands"));
        }
        let idx = parts.iter().map(|&p| self.check(p, "concat")).collect::<Result<Vec<_>, _>>()?;
        let tail = self.nodes[idx[0]].shape[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &i in &idx {
            let s = &self.nodes[i].shape;
            if s[1..] != tail[..] {
                return Err(TensorError::dimension("concat", format!("trailing shape {:?} vs {:?}", &s[1..], tail)));
            }
            rows += s[0];
            value.extend_from_slice(&self.nodes[i].value);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat", shape, value, Op::Concat(idx.clone()), &idx)
    }

    /// `len` entries (vectors) or rows (matrices) starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> OpResult {
        let ia = self.check(a, "slice")?;
        let shape = &self.nodes[ia].shape;
        if len == 0 || start + len > shape[0] {
            return Err(TensorError::Index { op: "slice", index: start + len, bound: shape[0] + 1 });
        }
        let stride: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let value = self.nodes[ia].value[start * stride..(start + len) * stride].to_vec();
        self.push("slice", out_shape, value, Op::Slice { src: ia, start }, &[ia])
    }

    pub fn transpose(&mut self, a: Var) -> OpResult {
        let ia = self.check(a, "transpose")?;
        let (m, n) = self.matrix_dims(ia, "transpose")?;
        let av = &self.nodes[ia].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(ia), &[ia])
    }

    /// Repeats entry `i` of a vector `counts[i]` times.
    pub fn repeat(&mut self, a: Var, counts: &[usize]) -> OpResult {
        let ia = self.check(a, "repeat")?;
        let n = self.vector_len(ia, "repeat")?;
        if counts.len() != n {
            return Err(TensorError::dimension("repeat", format!("{} counts for {} entries", counts.len(), n)));
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(TensorError::dimension("repeat", "empty result"));
        }
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(total);
        for (&x, &c) in av.iter().zip(counts) {
            out.extend(std::iter::repeat_n(x, c));
        }
        self.push("repeat", vec![total], out, Op::Repeat { src: ia, counts: counts.to_vec() }, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> OpResult {
        let ia = self.check(a, "sum")?;
        let s = self.nodes[ia].value.iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> OpResult {
        let ia = self.check(a, "mean")?;
        let v = &self.nodes[ia].value;
        let m = v.iter().sum::<Real>() / v.len() as Real;
        self.push("mean", vec![1], vec![m], Op::Mean(ia), &[ia])
    }

    /// Population variance over all entries.
    pub fn variance(&mut self, a: Var) -> OpResult {
        let ia = self.check(a, "variance")?;
        let (_, var) = mean_var(&self.nodes[ia].value);
        self.push("variance", vec![1], vec![var], Op::Variance(ia), &[ia])
    }

    /// Zero-mean, unit-variance rescaling over all entries of a vector:
    /// `(x − mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, a: Var, eps: Real) -> OpResult {
        let ia = self.check(a, "standardize")?;
        let n = self.vector_len(ia, "standardize")?;
        let v = &self.nodes[ia].value;
        let (mean, var) = mean_var(v);
        let inv_std = 1.0 / (var + eps).sqrt();
        let out = v.iter().map(|&x| (x - mean) * inv_std).collect();
        self.push("standardize", vec![n], out, Op::Standardize { src: ia, inv_std }, &[ia])
    }

    /// `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> OpResult {
        let il = self.check(logits, "cross_entropy")?;
        let n = self.vector_len(il, "cross_entropy")?;
        if target >= n {
            return Err(TensorError::Index { op: "cross_entropy", index: target, bound: n });
        }
        let v = &self.nodes[il].value;
        let max = v.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<Real>().ln();
        let loss = lse - v[target];
        let probs = v.iter().map(|&x| (x - lse).exp()).collect();
        self.push("cross_entropy", vec![1], vec![loss], Op::CrossEntropy { logits: il, target, probs }, &[il])
    }

    /// `Σ wᵢ·termsᵢ` over equally shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, Real)]) -> OpResult {
        if terms.is_empty() {
            return Err(TensorError::dimension("weighted_sum", "no operands"));
        }
        let idx = terms
            .iter()
            .map(|&(v, w)| self.check(v, "weighted_sum").map(|i| (i, w)))
            .collect::<Result<Vec<_>, _>>()?;
        let first = idx[0].0;
        for &(i, _) in &idx[1..] {
            self.same_shape(first, i, "weighted_sum")?;
        }
        let mut out = vec![0.0; self.nodes[first].value.len()];
        for &(i, w) in &idx {
            for (o, &x) in out.iter_mut().zip(&self.nodes[i].value) {
                *o += w * x;
            }
        }
        let shape = self.nodes[first].shape.clone();
        let inputs: Vec<usize> = idx.iter().map(|&(i, _)| i).collect();
        self.push("weighted_sum", shape, out, Op::WeightedSum(idx), &inputs)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are retained for leaf
    /// nodes only.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        let il = self.check(loss, "backward")?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].shape
            )));
        }
        if self.backward_done {
            return Err(TensorError::Contract("backward already ran on this tape; call reset_backward first".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<Real>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let mut leaf_grads = grads;
        for (i, n) in self.nodes.iter().enumerate().take(il + 1) {
            if !matches!(n.op, Op::Leaf) {
                leaf_grads[i] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads: leaf_grads, shapes: self.nodes.iter().map(|n| n.shape.clone()).collect() })
    }

    fn propagate(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [Real])| {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bv).for_each(|((o, &gi), &bi)| *o += gi * bi));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(av).for_each(|((o, &gi), &ai)| *o += gi * ai));
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| axpy(ga, *c, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                // dA = G·Bᵀ
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ·G
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            axpy(&mut gb[p * n..(p + 1) * n], av[r * k + p], grow);
                        }
                    }
                });
            }
            Op::MatVec(a, x) => {
                let k = nodes[*a].shape[1];
                let (av, xv) = (&nodes[*a].value, &nodes[*x].value);
                acc(*a, &mut |ga| {
                    for (row, &gi) in ga.chunks_exact_mut(k).zip(g) {
                        axpy(row, gi, xv);
                    }
                });
                acc(*x, &mut |gx| {
                    for (row, &gi) in av.chunks_exact(k).zip(g) {
                        axpy(gx, gi, row);
                    }
                });
            }
            Op::Outer(u, v) => outer_backward(nodes, *u, *v, g, &mut acc),
            Op::AddOuter(w, u, v) => {
                acc(*w, &mut |gw| axpy(gw, 1.0, g));
                outer_backward(nodes, *u, *v, g, &mut acc);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let gy = dot(g, y);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(y).for_each(|((o, &gi), &yi)| *o += yi * (gi - gy)));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(y).for_each(|((o, &gi), &yi)| *o += gi * yi * (1.0 - yi)));
            }
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((o, &gi), &xi)| {
                        if xi > 0.0 {
                            *o += gi
                        }
                    })
                });
            }
            Op::Gelu(a) => {
                let x = &nodes[*a].value;
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(x).for_each(|((o, &gi), &xi)| *o += gi * gelu_parts(xi).1));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    acc(p, &mut |gp| axpy(gp, 1.0, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice { src, start } => {
                let stride: usize = nodes[*src].shape[1..].iter().product();
                let off = start * stride;
                acc(*src, &mut |gs| axpy(&mut gs[off..off + g.len()], 1.0, g));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Repeat { src, counts } => {
                acc(*src, &mut |gs| {
                    let mut off = 0;
                    for (o, &c) in gs.iter_mut().zip(counts) {
                        *o += g[off..off + c].iter().sum::<Real>();
                        off += c;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as Real;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Variance(a) => {
                let x = &nodes[*a].value;
                let n = x.len() as Real;
                let (mean, _) = mean_var(x);
                acc(*a, &mut |ga| ga.iter_mut().zip(x).for_each(|(o, &xi)| *o += g[0] * 2.0 * (xi - mean) / n));
            }
            Op::Standardize { src, inv_std } => {
                let y = &node.value;
                let n = y.len() as Real;
                let g_mean = g.iter().sum::<Real>() / n;
                let gy_mean = dot(g, y) / n;
                acc(*src, &mut |ga| {
                    ga.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((o, &gi), &yi)| *o += inv_std * (gi - g_mean - yi * gy_mean))
                });
            }
            Op::CrossEntropy { logits, target, probs } => {
                acc(*logits, &mut |gl| {
                    for (j, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let t = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - t);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    acc(t, &mut |gt| axpy(gt, w, g));
                }
            }
        }
    }
}

fn outer_backward(nodes: &[Node], u: usize, v: usize, g: &[Real], acc: &mut dyn FnMut(usize, &mut dyn FnMut(&mut [Real]))) {
    let (uv, vv) = (&nodes[u].value, &nodes[v].value);
    let n = vv.len();
    acc(u, &mut |gu| {
        for (o, grow) in gu.iter_mut().zip(g.chunks_exact(n)) {
            *o += dot(grow, vv);
        }
    });
    acc(v, &mut |gv| {
        for (&ui, grow) in uv.iter().zip(g.chunks_exact(n)) {
            axpy(gv, ui, grow);
        }
    });
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<Real>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a leaf. Leaves the loss does not depend on
    /// get a zero gradient.
    pub fn get(&self, v: Var) -> Result<Tensor, TensorError> {
        if v.tape != self.tape || v.index >= self.shapes.len() {
            return Err(TensorError::Lookup("var is not on the differentiated tape".into()));
        }
        let shape = self.shapes[v.index].clone();
        let data = match self.grads.get(v.index).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Ok(Tensor::new(shape, data)?)
    }
}

#[inline]
pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [Real], a: Real, x: &[Real]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn mean_var(v: &[Real]) -> (Real, Real) {
    let n = v.len() as Real;
    let mean = v.iter().sum::<Real>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<Real>() / n;
    (mean, var)
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_values(v: &[Real]) -> Vec<Real> {
    let max = v.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = v.iter().map(|&x| (x - max).exp()).collect();
    let s: Real = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044715;

/// GELU value and derivative at `x`.
fn gelu_parts(x: Real) -> (Real, Real) {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (value, deriv)
}
