//! Reverse-mode differentiation over a small set of matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and
//! accumulates the gradient of a scalar node with respect to every node that
//! depends on a parameter leaf. Gradients of parameter leaves can then be
//! scattered into a [`GradBuffer`] keyed by [`ParamId`].
//!
//! All values are row-major matrices; a capsule pose matrix is stored with
//! one capsule per row.

use std::ops::Deref;
use std::sync::Arc;

use crate::error::{HapError, Result};
use crate::numeric::ops::{dot, norm, softmax_in_place, squash_scale};
use crate::numeric::tensor::{check_finite, matmul_into, Shape, Tensor};
use crate::params::{GradBuffer, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    SquashRows(Var),
    SoftmaxRows(Var),
    Cosine(Var, Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SliceRows {
        src: Var,
        start: usize,
    },
    SumRows(Var),
    Sum(Var),
    OuterSum(Var, Var),
    CapsulePredict {
        weights: Vec<Var>,
        input: Var,
        n_out: usize,
    },
    RouteCombine {
        couplings: Var,
        predictions: Var,
    },
    Agreement {
        predictions: Var,
        outputs: Var,
    },
}

#[derive(Debug, Clone)]
enum Value {
    Owned(Vec<f64>),
    Param(Arc<Tensor>),
}

impl Deref for Value {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Param(t) => t.data(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
    value: Value,
    needs_grad: bool,
}

/// Recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<Option<Var>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through any parameter.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape, n.value.to_vec()).expect("tape values are finite")
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.shape != Shape::scalar() {
            return Err(HapError::Contract(format!(
                "expected a scalar node, found shape {}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    fn push(
        &mut self,
        op: Op,
        shape: Shape,
        value: Vec<f64>,
        op_name: &'static str,
    ) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.numel());
        check_finite(op_name, &value)?;
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            op => inputs_of(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value: Value::Owned(value),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            shape: t.shape(),
            value: Value::Owned(t.data().to_vec()),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input_vector(&mut self, data: &[f64]) -> Result<Var> {
        self.push(Op::Input, Shape::vector(data.len()), data.to_vec(), "input")
    }

    pub fn constant(&mut self, shape: Shape, value: f64) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            shape,
            value: Value::Owned(vec![value; shape.numel()]),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter in `store`. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_leaves.len() < store.len() {
            self.param_leaves.resize(store.len(), None);
        }
        if let Some(v) = self.param_leaves[id.index()] {
            return v;
        }
        let p = store.shared(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: p.shape(),
            value: Value::Param(p),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves[id.index()] = Some(v);
        v
    }

    /// Parameters that appear on this tape.
    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Param(id) => Some(id),
            _ => None,
        })
    }

    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        name: &'static str,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = if ta {
            (sa.cols, sa.rows)
        } else {
            (sa.rows, sa.cols)
        };
        let (k2, n) = if tb {
            (sb.cols, sb.rows)
        } else {
            (sb.rows, sb.cols)
        };
        if k != k2 {
            return Err(HapError::shape(name, format!("inner dim {k}"), k2));
        }
        let shape = Shape::new(m, n);
        let mut out = vec![0.0; shape.numel()];
        matmul_into(self.value(a), sa, ta, self.value(b), sb, tb, &mut out);
        self.push(Op::MatMul { a, b, ta, tb }, shape, out, name)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false, "matmul")
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false, "matmul_tn")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true, "matmul_nt")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(HapError::shape(op, sa, sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), shape, out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), shape, out, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), shape, out, "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), self.shape(a), out, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), self.shape(a), out, "tanh")
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| crate::numeric::ops::elu(x))
            .collect();
        self.push(Op::Elu(a), self.shape(a), out, "elu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| crate::numeric::ops::leaky_relu(x, slope))
            .collect();
        self.push(Op::LeakyRelu(a, slope), self.shape(a), out, "leaky_relu")
    }

    /// Squash every row (capsule) independently.
    pub fn squash_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(shape.cols) {
            let s = squash_scale(norm(row));
            row.iter_mut().for_each(|x| *x *= s);
        }
        self.push(Op::SquashRows(a), shape, out, "squash_rows")
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.cols == 0 {
            return Err(HapError::Domain("softmax over empty rows".into()));
        }
        let mut out = self.value(a).to_vec();
        out.chunks_mut(shape.cols).for_each(softmax_in_place);
        self.push(Op::SoftmaxRows(a), shape, out, "softmax_rows")
    }

    /// Cosine similarity of two equally sized nodes (flattened); 0 if either
    /// is the zero vector.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.shape(a).numel(), self.shape(b).numel());
        if na != nb {
            return Err(HapError::shape("cosine", na, nb));
        }
        let c = crate::numeric::ops::cosine_similarity(self.value(a), self.value(b))?;
        self.push(Op::Cosine(a, b), Shape::scalar(), vec![c], "cosine")
    }

    /// Concatenate the flattened values of `parts` into a node of `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: Shape) -> Result<Var> {
        let total: usize = parts.iter().map(|p| self.shape(*p).numel()).sum();
        if total != shape.numel() {
            return Err(HapError::shape("concat", shape.numel(), total));
        }
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        self.push(Op::Concat(parts.to_vec()), shape, out, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let n = self.shape(a).numel();
        if n != shape.numel() {
            return Err(HapError::shape("reshape", shape, self.shape(a)));
        }
        let out = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape, out, "reshape")
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.rows {
            return Err(HapError::shape(
                "slice_rows",
                format!("<= {} rows", s.rows),
                start + len,
            ));
        }
        let out = self.value(a)[start * s.cols..(start + len) * s.cols].to_vec();
        self.push(
            Op::SliceRows { src: a, start },
            Shape::new(len, s.cols),
            out,
            "slice_rows",
        )
    }

    /// Column-wise sum: `r x c` to `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let mut out = vec![0.0; s.cols];
        for row in self.value(a).chunks(s.cols) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        self.push(Op::SumRows(a), Shape::new(1, s.cols), out, "sum_rows")
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().sum();
        self.push(Op::Sum(a), Shape::scalar(), vec![total], "sum")
    }

    /// `E[k][l] = p[k] + q[l]` for vectors `p`, `q`.
    pub fn outer_sum(&mut self, p: Var, q: Var) -> Result<Var> {
        let (np, nq) = (self.shape(p).numel(), self.shape(q).numel());
        let (pv, qv) = (self.value(p), self.value(q));
        let mut out = Vec::with_capacity(np * nq);
        for &a in pv {
            out.extend(qv.iter().map(|&b| a + b));
        }
        self.push(Op::OuterSum(p, q), Shape::new(np, nq), out, "outer_sum")
    }

    /// Prediction vectors of a capsule layer: row `i * n_out + j` of the
    /// result is `weights[i * n_out + j] · input[i]`.
    ///
    /// Each weight is `h_out x h_in`; `input` is `n_in x h_in`.
    pub fn capsule_predict(&mut self, weights: &[Var], input: Var, n_out: usize) -> Result<Var> {
        let s_in = self.shape(input);
        if n_out == 0 || weights.len() != s_in.rows * n_out {
            return Err(HapError::shape(
                "capsule_predict",
                format!("{} transform matrices", s_in.rows * n_out),
                weights.len(),
            ));
        }
        let h_out = self.shape(weights[0]).rows;
        for w in weights {
            let sw = self.shape(*w);
            if sw != Shape::new(h_out, s_in.cols) {
                return Err(HapError::shape(
                    "capsule_predict",
                    Shape::new(h_out, s_in.cols),
                    sw,
                ));
            }
        }
        let u = self.value(input);
        let mut out = vec![0.0; weights.len() * h_out];
        for (idx, w) in weights.iter().enumerate() {
            let i = idx / n_out;
            let ui = &u[i * s_in.cols..(i + 1) * s_in.cols];
            let wv = self.value(*w);
            for r in 0..h_out {
                out[idx * h_out + r] = dot(&wv[r * s_in.cols..(r + 1) * s_in.cols], ui);
            }
        }
        self.push(
            Op::CapsulePredict {
                weights: weights.to_vec(),
                input,
                n_out,
            },
            Shape::new(weights.len(), h_out),
            out,
            "capsule_predict",
        )
    }

    /// `out[j] = Σ_i couplings[i][j] · predictions[i * n_out + j]`.
    pub fn route_combine(&mut self, couplings: Var, predictions: Var) -> Result<Var> {
        let sc = self.shape(couplings);
        let sp = self.shape(predictions);
        if sp.rows != sc.numel() {
            return Err(HapError::shape("route_combine", sc.numel(), sp.rows));
        }
        let (n_in, n_out, h) = (sc.rows, sc.cols, sp.cols);
        let (c, p) = (self.value(couplings), self.value(predictions));
        let mut out = vec![0.0; n_out * h];
        for i in 0..n_in {
            for j in 0..n_out {
                let cij = c[i * n_out + j];
                let row = &p[(i * n_out + j) * h..(i * n_out + j + 1) * h];
                out[j * h..(j + 1) * h]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(o, x)| *o += cij * x);
            }
        }
        self.push(
            Op::RouteCombine {
                couplings,
                predictions,
            },
            Shape::new(n_out, h),
            out,
            "route_combine",
        )
    }

    /// `a[i][j] = predictions[i * n_out + j] · outputs[j]`.
    pub fn agreement(&mut self, predictions: Var, outputs: Var) -> Result<Var> {
        let sp = self.shape(predictions);
        let so = self.shape(outputs);
        if so.cols != sp.cols || so.rows == 0 || !sp.rows.is_multiple_of(so.rows) {
            return Err(HapError::shape("agreement", sp, so));
        }
        let (n_out, h) = (so.rows, so.cols);
        let n_in = sp.rows / n_out;
        let (p, o) = (self.value(predictions), self.value(outputs));
        let out = (0..n_in * n_out)
            .map(|idx| {
                let j = idx % n_out;
                dot(&p[idx * h..(idx + 1) * h], &o[j * h..(j + 1) * h])
            })
            .collect();
        self.push(
            Op::Agreement {
                predictions,
                outputs,
            },
            Shape::new(n_in, n_out),
            out,
            "agreement",
        )
    }

    /// Gradient of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != Shape::scalar() {
            return Err(HapError::Contract(format!(
                "backward requires a scalar output, found shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Add the gradients of all parameter leaves into `buffer`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, buffer: &mut GradBuffer) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    buffer.add(id, g);
                }
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &*self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let sg = node.shape;
                if wants(*a) {
                    // dA = g·Bᵀ (or its transpose when A was transposed)
                    let mut da = vec![0.0; sa.numel()];
                    if *ta {
                        // A stored k x m, dAᵀ = B^(t)·gᵀ  ->  dA = op(B)·gᵀ
                        matmul_into(val(*b), sb, *tb, g, sg, true, &mut da);
                    } else {
                        matmul_into(g, sg, false, val(*b), sb, !*tb, &mut da);
                    }
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; sb.numel()];
                    if *tb {
                        matmul_into(g, sg, true, val(*a), sa, *ta, &mut db);
                    } else {
                        matmul_into(val(*a), sa, !*ta, g, sg, false, &mut db);
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, &zip(g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, &zip(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, k) => {
                let d: Vec<f64> = g.iter().map(|x| x * k).collect();
                accumulate(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d = zip(g, &node.value, |gi, y| gi * (1.0 - y * y));
                accumulate(grads, *a, &d);
            }
            Op::Elu(a) => {
                let d = zip(g, val(*a), |gi, x| if x >= 0.0 { gi } else { gi * x.exp() });
                accumulate(grads, *a, &d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = zip(g, val(*a), |gi, x| if x >= 0.0 { gi } else { gi * slope });
                accumulate(grads, *a, &d);
            }
            Op::SquashRows(a) => {
                let cols = node.shape.cols;
                let mut d = vec![0.0; g.len()];
                for ((dr, vr), gr) in d
                    .chunks_mut(cols)
                    .zip(val(*a).chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let n = norm(vr);
                    if n == 0.0 {
                        continue;
                    }
                    let n2 = n * n;
                    let s = squash_scale(n);
                    // d(scale)/dn / n
                    let ds = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2)) / n;
                    let vg = dot(vr, gr);
                    for ((o, &vi), &gi) in dr.iter_mut().zip(vr).zip(gr) {
                        *o = s * gi + ds * vg * vi;
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::SoftmaxRows(a) => {
                let cols = node.shape.cols;
                let mut d = vec![0.0; g.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(cols)
                    .zip(node.value.chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let gy = dot(gr, yr);
                    for ((o, &y), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (gi - gy);
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (norm(av), norm(bv));
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = node.value[0];
                let g0 = g[0];
                if wants(*a) {
                    let d = zip(bv, av, |bi, ai| g0 * (bi / (na * nb) - c * ai / (na * na)));
                    accumulate(grads, *a, &d);
                }
                if wants(*b) {
                    let d = zip(av, bv, |ai, bi| g0 * (ai / (na * nb) - c * bi / (nb * nb)));
                    accumulate(grads, *b, &d);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p).numel();
                    if wants(*p) {
                        accumulate(grads, *p, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::SliceRows { src, start } => {
                let ss = self.shape(*src);
                let off = start * ss.cols;
                let slot = grad_slot(grads, *src, ss.numel());
                slot[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, x)| *o += x);
            }
            Op::SumRows(a) => {
                let sa = self.shape(*a);
                let slot = grad_slot(grads, *a, sa.numel());
                for row in slot.chunks_mut(sa.cols) {
                    row.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Sum(a) => {
                let n = self.shape(*a).numel();
                let slot = grad_slot(grads, *a, n);
                slot.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::OuterSum(p, q) => {
                let (np, nq) = (node.shape.rows, node.shape.cols);
                if wants(*p) {
                    let d: Vec<f64> = g.chunks(nq).map(|r| r.iter().sum()).collect();
                    accumulate(grads, *p, &d);
                }
                if wants(*q) {
                    let mut d = vec![0.0; nq];
                    for r in g.chunks(nq).take(np) {
                        d.iter_mut().zip(r).for_each(|(o, x)| *o += x);
                    }
                    accumulate(grads, *q, &d);
                }
            }
            Op::CapsulePredict {
                weights,
                input,
                n_out,
            } => {
                let s_in = self.shape(*input);
                let h_in = s_in.cols;
                let h_out = node.shape.cols;
                let u = val(*input);
                let mut du = vec![0.0; s_in.numel()];
                for (idx, w) in weights.iter().enumerate() {
                    let i = idx / n_out;
                    let ui = &u[i * h_in..(i + 1) * h_in];
                    let gr = &g[idx * h_out..(idx + 1) * h_out];
                    let wv = val(*w);
                    if wants(*w) {
                        let mut dw = vec![0.0; h_out * h_in];
                        for (r, &gi) in gr.iter().enumerate() {
                            dw[r * h_in..(r + 1) * h_in]
                                .iter_mut()
                                .zip(ui)
                                .for_each(|(o, x)| *o = gi * x);
                        }
                        accumulate(grads, *w, &dw);
                    }
                    let dui = &mut du[i * h_in..(i + 1) * h_in];
                    for (r, &gi) in gr.iter().enumerate() {
                        dui.iter_mut()
                            .zip(&wv[r * h_in..(r + 1) * h_in])
                            .for_each(|(o, x)| *o += gi * x);
                    }
                }
                if wants(*input) {
                    accumulate(grads, *input, &du);
                }
            }
            Op::RouteCombine {
                couplings,
                predictions,
            } => {
                let sc = self.shape(*couplings);
                let (n_in, n_out) = (sc.rows, sc.cols);
                let h = node.shape.cols;
                let (c, p) = (val(*couplings), val(*predictions));
                if wants(*couplings) {
                    let d: Vec<f64> = (0..n_in * n_out)
                        .map(|idx| {
                            let j = idx % n_out;
                            dot(&g[j * h..(j + 1) * h], &p[idx * h..(idx + 1) * h])
                        })
                        .collect();
                    accumulate(grads, *couplings, &d);
                }
                if wants(*predictions) {
                    let mut d = vec![0.0; n_in * n_out * h];
                    for idx in 0..n_in * n_out {
                        let j = idx % n_out;
                        let cij = c[idx];
                        d[idx * h..(idx + 1) * h]
                            .iter_mut()
                            .zip(&g[j * h..(j + 1) * h])
                            .for_each(|(o, x)| *o = cij * x);
                    }
                    accumulate(grads, *predictions, &d);
                }
            }
            Op::Agreement {
                predictions,
                outputs,
            } => {
                let so = self.shape(*outputs);
                let (n_out, h) = (so.rows, so.cols);
                let (p, o) = (val(*predictions), val(*outputs));
                if wants(*predictions) {
                    let mut d = vec![0.0; p.len()];
                    for (idx, &gi) in g.iter().enumerate() {
                        let j = idx % n_out;
                        d[idx * h..(idx + 1) * h]
                            .iter_mut()
                            .zip(&o[j * h..(j + 1) * h])
                            .for_each(|(dv, x)| *dv = gi * x);
                    }
                    accumulate(grads, *predictions, &d);
                }
                if wants(*outputs) {
                    let mut d = vec![0.0; o.len()];
                    for (idx, &gi) in g.iter().enumerate() {
                        let j = idx % n_out;
                        d[j * h..(j + 1) * h]
                            .iter_mut()
                            .zip(&p[idx * h..(idx + 1) * h])
                            .for_each(|(dv, x)| *dv += gi * x);
                    }
                    accumulate(grads, *outputs, &d);
                }
            }
        }
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul { a, b, .. }
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Cosine(a, b)
        | Op::OuterSum(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Elu(a)
        | Op::LeakyRelu(a, _)
        | Op::SquashRows(a)
        | Op::SoftmaxRows(a)
        | Op::Reshape(a)
        | Op::SumRows(a)
        | Op::Sum(a) => vec![*a],
        Op::SliceRows { src, .. } => vec![*src],
        Op::Concat(parts) => parts.clone(),
        Op::CapsulePredict { weights, input, .. } => {
            let mut v = weights.clone();
            v.push(*input);
            v
        }
        Op::RouteCombine {
            couplings,
            predictions,
        } => vec![*couplings, *predictions],
        Op::Agreement {
            predictions,
            outputs,
        } => vec![*predictions, *outputs],
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(o, x)| *o += x),
        slot @ None => *slot = Some(d.to_vec()),
    }
}
