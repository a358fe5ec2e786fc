//! Recording tape: reverse-mode gradients and dual-number forward mode.
//!
//! A [`Tape`] owns an arena of value nodes and an ordered list of primitive
//! operations. Recording an operation computes three things at once:
//!
//! * the primal value (via the shared kernels in the parent module),
//! * the output tangent, when any input carries one — this is the
//!   dual-number forward sweep, so a directional derivative costs a single
//!   forward pass and never needs a second traversal,
//! * a `needs_grad` bit so the reverse sweep can skip dead branches.
//!
//! Reverse mode replays the operation list backward from a scalar loss,
//! accumulating vector-Jacobian products into per-node gradient slots. A tape
//! is consumed by [`Tape::backward`]; one loss evaluation per tape.
//!
//! Tangents are plain values, never differentiated: anything read off the
//! tangent channel is implicitly behind a stop-gradient.

use std::sync::Arc;

use super::{row_cosine_distance, time_embed, Tensor, COS_DEGENERATE_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Primal/tangent pair produced by a dual-number forward sweep.
#[derive(Clone, Debug)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Self {
        assert_eq!(
            primal.shape(),
            tangent.shape(),
            "dual tensor with mismatched shapes {:?} vs {:?}",
            primal.shape(),
            tangent.shape()
        );
        DualTensor { primal, tangent }
    }
}

struct Node {
    value: Tensor,
    tangent: Option<Tensor>,
    needs_grad: bool,
}

enum Op {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, s: f64, out: usize },
    AddRow { a: usize, row: usize, out: usize },
    MulCol { a: usize, col: usize, out: usize },
    Matmul { a: usize, b: usize, out: usize },
    Silu { a: usize, out: usize },
    TimeEmbed { col: usize, freqs: Arc<Vec<f64>>, out: usize },
    Gather { table: usize, idx: Arc<Vec<usize>>, out: usize },
    RowSumSq { a: usize, out: usize },
    RowCosine { a: usize, b: usize, out: usize },
    Sum { a: usize, out: usize },
    Mean { a: usize, out: usize },
    Dot { a: usize, b: usize, out: usize },
    L2Norm { a: usize, out: usize },
    Clamp { a: usize, lo: f64, hi: f64, out: usize },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    non_finite: bool,
}

impl Gradients {
    /// Gradient accumulated for `id`, if any op touched it.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, densified: nodes that never participated in the
    /// loss get an explicit zero tensor of their shape.
    pub fn wrt_dense(&self, id: ValueId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    /// True when any accumulated gradient contains NaN or infinity.
    pub fn has_non_finite(&self) -> bool {
        self.non_finite
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, tangent: Option<Tensor>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { value, tangent, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient, no tangent.
    pub fn input(&mut self, value: Tensor) -> ValueId {
        self.push(value, None, false)
    }

    /// Leaf carrying a forward-mode tangent (a dual number seed).
    pub fn input_dual(&mut self, value: Tensor, tangent: Tensor) -> ValueId {
        assert_eq!(
            value.shape(),
            tangent.shape(),
            "tangent shape {:?} does not match value shape {:?}",
            tangent.shape(),
            value.shape()
        );
        self.push(value, Some(tangent), false)
    }

    /// Differentiable leaf (parameter or input we want gradients for).
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push(value, None, true)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn tangent(&self, id: ValueId) -> Option<&Tensor> {
        self.nodes[id.0].tangent.as_ref()
    }

    /// Primal and tangent of a node; the tangent densifies to zeros when the
    /// node does not depend on any dual seed.
    pub fn dual(&self, id: ValueId) -> DualTensor {
        let n = &self.nodes[id.0];
        let tangent = n
            .tangent
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
        DualTensor::new(n.value.clone(), tangent)
    }

    fn meta(&self, ids: &[usize]) -> (bool, bool) {
        let needs_grad = ids.iter().any(|&i| self.nodes[i].needs_grad);
        let any_tangent = ids.iter().any(|&i| self.nodes[i].tangent.is_some());
        (needs_grad, any_tangent)
    }

    fn tan(&self, id: usize) -> Option<&Tensor> {
        self.nodes[id].tangent.as_ref()
    }

    fn record(&mut self, value: Tensor, tangent: Option<Tensor>, needs_grad: bool, op: impl FnOnce(usize) -> Op) -> ValueId {
        let out = self.push(value, tangent, needs_grad);
        if needs_grad {
            self.ops.push(op(out.0));
        }
        out
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        let (ng, any_t) = self.meta(&[a.0, b.0]);
        let tangent = any_t.then(|| match (self.tan(a.0), self.tan(b.0)) {
            (Some(ta), Some(tb)) => ta.add(tb),
            (Some(ta), None) => ta.clone(),
            (None, Some(tb)) => tb.clone(),
            (None, None) => unreachable!(),
        });
        self.record(value, tangent, ng, |out| Op::Add { a: a.0, b: b.0, out })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        let (ng, any_t) = self.meta(&[a.0, b.0]);
        let tangent = any_t.then(|| match (self.tan(a.0), self.tan(b.0)) {
            (Some(ta), Some(tb)) => ta.sub(tb),
            (Some(ta), None) => ta.clone(),
            (None, Some(tb)) => tb.scale(-1.0),
            (None, None) => unreachable!(),
        });
        self.record(value, tangent, ng, |out| Op::Sub { a: a.0, b: b.0, out })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = va.mul(vb);
        let (ng, any_t) = self.meta(&[a.0, b.0]);
        let tangent = any_t.then(|| {
            let mut acc: Option<Tensor> = None;
            if let Some(ta) = self.tan(a.0) {
                acc = Some(ta.mul(vb));
            }
            if let Some(tb) = self.tan(b.0) {
                let term = va.mul(tb);
                acc = Some(match acc {
                    Some(t) => t.add(&term),
                    None => term,
                });
            }
            acc.unwrap()
        });
        self.record(value, tangent, ng, |out| Op::Mul { a: a.0, b: b.0, out })
    }

    pub fn scale(&mut self, a: ValueId, s: f64) -> ValueId {
        let value = self.nodes[a.0].value.scale(s);
        let ng = self.nodes[a.0].needs_grad;
        let tangent = self.tan(a.0).map(|ta| ta.scale(s));
        self.record(value, tangent, ng, |out| Op::Scale { a: a.0, s, out })
    }

    pub fn add_row(&mut self, a: ValueId, row: ValueId) -> ValueId {
        let value = self.nodes[a.0].value.add_row(&self.nodes[row.0].value);
        let (ng, any_t) = self.meta(&[a.0, row.0]);
        let tangent = any_t.then(|| match (self.tan(a.0), self.tan(row.0)) {
            (Some(ta), Some(tr)) => ta.add_row(tr),
            (Some(ta), None) => ta.clone(),
            (None, Some(tr)) => {
                Tensor::zeros(self.nodes[a.0].value.shape().to_vec()).add_row(tr)
            }
            (None, None) => unreachable!(),
        });
        self.record(value, tangent, ng, |out| Op::AddRow { a: a.0, row: row.0, out })
    }

    pub fn mul_col(&mut self, a: ValueId, col: ValueId) -> ValueId {
        let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let value = va.mul_col(vc);
        let (ng, any_t) = self.meta(&[a.0, col.0]);
        let tangent = any_t.then(|| {
            let mut acc: Option<Tensor> = None;
            if let Some(ta) = self.tan(a.0) {
                acc = Some(ta.mul_col(vc));
            }
            if let Some(tc) = self.tan(col.0) {
                let term = va.mul_col(tc);
                acc = Some(match acc {
                    Some(t) => t.add(&term),
                    None => term,
                });
            }
            acc.unwrap()
        });
        self.record(value, tangent, ng, |out| Op::MulCol { a: a.0, col: col.0, out })
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = va.matmul(vb);
        let (ng, any_t) = self.meta(&[a.0, b.0]);
        let tangent = any_t.then(|| {
            let mut acc: Option<Tensor> = None;
            if let Some(ta) = self.tan(a.0) {
                acc = Some(ta.matmul(vb));
            }
            if let Some(tb) = self.tan(b.0) {
                let term = va.matmul(tb);
                acc = Some(match acc {
                    Some(t) => t.add(&term),
                    None => term,
                });
            }
            acc.unwrap()
        });
        self.record(value, tangent, ng, |out| Op::Matmul { a: a.0, b: b.0, out })
    }

    pub fn silu(&mut self, a: ValueId) -> ValueId {
        let va = &self.nodes[a.0].value;
        let value = va.silu();
        let ng = self.nodes[a.0].needs_grad;
        let tangent = self.tan(a.0).map(|ta| ta.mul(&self.nodes[a.0].value.silu_prime()));
        self.record(value, tangent, ng, |out| Op::Silu { a: a.0, out })
    }

    pub fn time_embed(&mut self, col: ValueId, freqs: Arc<Vec<f64>>) -> ValueId {
        let vc = &self.nodes[col.0].value;
        let value = time_embed(vc, &freqs);
        let ng = self.nodes[col.0].needs_grad;
        let tangent = self.tan(col.0).map(|tc| {
            let m = vc.numel();
            let c = vc.data();
            let t = tc.data();
            let mut out = Vec::with_capacity(m * 2 * freqs.len());
            for i in 0..m {
                for &f in freqs.iter() {
                    let (s, co) = (c[i] * f).sin_cos();
                    out.push(co * f * t[i]);
                    out.push(-s * f * t[i]);
                }
            }
            Tensor::new(vec![m, 2 * freqs.len()], out)
        });
        self.record(value, tangent, ng, |out| Op::TimeEmbed { col: col.0, freqs, out })
    }

    pub fn gather(&mut self, table: ValueId, idx: Arc<Vec<usize>>) -> ValueId {
        let value = self.nodes[table.0].value.gather_rows(&idx);
        let ng = self.nodes[table.0].needs_grad;
        let tangent = self.tan(table.0).map(|tt| tt.gather_rows(&idx));
        self.record(value, tangent, ng, |out| Op::Gather { table: table.0, idx, out })
    }

    pub fn row_sumsq(&mut self, a: ValueId) -> ValueId {
        let va = &self.nodes[a.0].value;
        let value = va.row_sumsq();
        let ng = self.nodes[a.0].needs_grad;
        let tangent = self.tan(a.0).map(|ta| {
            let (m, n) = va.dims2();
            let (v, t) = (va.data(), ta.data());
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = (0..n).map(|j| 2.0 * v[i * n + j] * t[i * n + j]).sum();
            }
            Tensor::new(vec![m, 1], out)
        });
        self.record(value, tangent, ng, |out| Op::RowSumSq { a: a.0, out })
    }

    pub fn row_cosine(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = row_cosine_distance(va, vb);
        let (ng, any_t) = self.meta(&[a.0, b.0]);
        let tangent = any_t.then(|| {
            let (m, n) = va.dims2();
            let (xa, xb) = (va.data(), vb.data());
            let zeros = vec![0.0; m * n];
            let ta = self.tan(a.0).map(|t| t.data().to_vec()).unwrap_or_else(|| zeros.clone());
            let tb = self.tan(b.0).map(|t| t.data().to_vec()).unwrap_or(zeros);
            let mut out = vec![0.0; m];
            for i in 0..m {
                let s = i * n..(i + 1) * n;
                out[i] = cosine_row_jvp(&xa[s.clone()], &xb[s.clone()], &ta[s.clone()], &tb[s]);
            }
            Tensor::new(vec![m, 1], out)
        });
        self.record(value, tangent, ng, |out| Op::RowCosine { a: a.0, b: b.0, out })
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        let ng = self.nodes[a.0].needs_grad;
        let tangent = self.tan(a.0).map(|ta| Tensor::scalar(ta.sum()));
        self.record(value, tangent, ng, |out| Op::Sum { a: a.0, out })
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let value = Tensor::scalar(self.nodes[a.0].value.mean());
        let ng = self.nodes[a.0].needs_grad;
        let tangent = self.tan(a.0).map(|ta| Tensor::scalar(ta.mean()));
        self.record(value, tangent, ng, |out| Op::Mean { a: a.0, out })
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = Tensor::scalar(va.dot(vb));
        let (ng, any_t) = self.meta(&[a.0, b.0]);
        let tangent = any_t.then(|| {
            let mut acc = 0.0;
            if let Some(ta) = self.tan(a.0) {
                acc += ta.dot(vb);
            }
            if let Some(tb) = self.tan(b.0) {
                acc += va.dot(tb);
            }
            Tensor::scalar(acc)
        });
        self.record(value, tangent, ng, |out| Op::Dot { a: a.0, b: b.0, out })
    }

    pub fn l2_norm(&mut self, a: ValueId) -> ValueId {
        let va = &self.nodes[a.0].value;
        let norm = va.l2_norm();
        let value = Tensor::scalar(norm);
        let ng = self.nodes[a.0].needs_grad;
        let tangent = self.tan(a.0).map(|ta| {
            // d|a| = a.da / |a|; zero vector has no direction, contribute 0
            Tensor::scalar(if norm > 0.0 { va.dot(ta) / norm } else { 0.0 })
        });
        self.record(value, tangent, ng, |out| Op::L2Norm { a: a.0, out })
    }

    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> ValueId {
        let va = &self.nodes[a.0].value;
        let value = va.clamp_el(lo, hi);
        let ng = self.nodes[a.0].needs_grad;
        let tangent = self.tan(a.0).map(|ta| ta.mul(&self.nodes[a.0].value.clamp_mask(lo, hi)));
        self.record(value, tangent, ng, |out| Op::Clamp { a: a.0, lo, hi, out })
    }

    /// Reverse sweep from a scalar loss node. Consumes the tape: the arena is
    /// dismantled while accumulating, so a tape drives exactly one backward.
    pub fn backward(self, loss: ValueId) -> Gradients {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward from non-scalar loss of shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let nodes = &self.nodes;
        let acc = |slot: &mut Option<Tensor>, delta: Tensor| {
            *slot = Some(match slot.take() {
                Some(g) => g.add(&delta),
                None => delta,
            });
        };
        // Gradients flow only into nodes marked needs_grad; constants and
        // dual seeds are skipped, which is also what implements
        // stop-gradient for values fed in from outside the tape.
        let want = |i: usize| nodes[i].needs_grad;

        for op in self.ops.iter().rev() {
            match op {
                Op::Add { a, b, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.clone());
                    }
                    if want(*b) {
                        acc(&mut grads[*b], g);
                    }
                }
                Op::Sub { a, b, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.clone());
                    }
                    if want(*b) {
                        acc(&mut grads[*b], g.scale(-1.0));
                    }
                }
                Op::Mul { a, b, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.mul(&nodes[*b].value));
                    }
                    if want(*b) {
                        acc(&mut grads[*b], g.mul(&nodes[*a].value));
                    }
                }
                Op::Scale { a, s, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.scale(*s));
                    }
                }
                Op::AddRow { a, row, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.clone());
                    }
                    if want(*row) {
                        acc(&mut grads[*row], g.col_sum());
                    }
                }
                Op::MulCol { a, col, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.mul_col(&nodes[*col].value));
                    }
                    if want(*col) {
                        // d/dcol_i = sum_j g[i,j] a[i,j]
                        let prod = g.mul(&nodes[*a].value);
                        let (m, n) = prod.dims2();
                        let mut out_col = vec![0.0; m];
                        for i in 0..m {
                            out_col[i] = prod.data()[i * n..(i + 1) * n].iter().sum();
                        }
                        let shaped = if shapes[*col].len() == 2 {
                            Tensor::new(vec![m, 1], out_col)
                        } else {
                            Tensor::new(vec![m], out_col)
                        };
                        acc(&mut grads[*col], shaped);
                    }
                }
                Op::Matmul { a, b, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.matmul_nt(&nodes[*b].value));
                    }
                    if want(*b) {
                        acc(&mut grads[*b], nodes[*a].value.matmul_tn(&g));
                    }
                }
                Op::Silu { a, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.mul(&nodes[*a].value.silu_prime()));
                    }
                }
                Op::TimeEmbed { col, freqs, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*col) {
                        let vc = &nodes[*col].value;
                        let m = vc.numel();
                        let c = vc.data();
                        let gd = g.data();
                        let d = 2 * freqs.len();
                        let mut out_col = vec![0.0; m];
                        for i in 0..m {
                            let mut s_acc = 0.0;
                            for (fi, &f) in freqs.iter().enumerate() {
                                let (s, co) = (c[i] * f).sin_cos();
                                s_acc += f * (gd[i * d + 2 * fi] * co - gd[i * d + 2 * fi + 1] * s);
                            }
                            out_col[i] = s_acc;
                        }
                        let shaped = if shapes[*col].len() == 2 {
                            Tensor::new(vec![m, 1], out_col)
                        } else {
                            Tensor::new(vec![m], out_col)
                        };
                        acc(&mut grads[*col], shaped);
                    }
                }
                Op::Gather { table, idx, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*table) {
                        let (v, n) = nodes[*table].value.dims2();
                        let mut scat = Tensor::zeros(vec![v, n]);
                        {
                            let buf = scat.data_mut();
                            let gd = g.data();
                            for (r, &i) in idx.iter().enumerate() {
                                for j in 0..n {
                                    buf[i * n + j] += gd[r * n + j];
                                }
                            }
                        }
                        acc(&mut grads[*table], scat);
                    }
                }
                Op::RowSumSq { a, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], nodes[*a].value.scale(2.0).mul_col(&g));
                    }
                }
                Op::RowCosine { a, b, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    let (m, n) = nodes[*a].value.dims2();
                    let (xa, xb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let gd = g.data();
                    let mut ga = vec![0.0; m * n];
                    let mut gb = vec![0.0; m * n];
                    for i in 0..m {
                        let s = i * n..(i + 1) * n;
                        cosine_row_vjp(&xa[s.clone()], &xb[s.clone()], gd[i], &mut ga[s.clone()], &mut gb[s]);
                    }
                    if want(*a) {
                        acc(&mut grads[*a], Tensor::new(vec![m, n], ga));
                    }
                    if want(*b) {
                        acc(&mut grads[*b], Tensor::new(vec![m, n], gb));
                    }
                }
                Op::Sum { a, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], Tensor::full(shapes[*a].clone(), g.item()));
                    }
                }
                Op::Mean { a, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        let numel: usize = shapes[*a].iter().product();
                        acc(&mut grads[*a], Tensor::full(shapes[*a].clone(), g.item() / numel as f64));
                    }
                }
                Op::Dot { a, b, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    let gv = g.item();
                    if want(*a) {
                        acc(&mut grads[*a], nodes[*b].value.scale(gv));
                    }
                    if want(*b) {
                        acc(&mut grads[*b], nodes[*a].value.scale(gv));
                    }
                }
                Op::L2Norm { a, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        let norm = nodes[*a].value.l2_norm();
                        if norm > 0.0 {
                            acc(&mut grads[*a], nodes[*a].value.scale(g.item() / norm));
                        }
                    }
                }
                Op::Clamp { a, lo, hi, out } => {
                    let Some(g) = grads[*out].clone() else { continue };
                    if want(*a) {
                        acc(&mut grads[*a], g.mul(&nodes[*a].value.clamp_mask(*lo, *hi)));
                    }
                }
            }
        }

        let non_finite = grads.iter().flatten().any(|g| g.has_non_finite());
        Gradients { grads, shapes, non_finite }
    }
}

/// Directional derivative of 1 - a.b/(|a||b|) for one row. Degenerate rows
/// (either norm under the floor) have derivative 0 by the same convention as
/// the primal.
fn cosine_row_jvp(a: &[f64], b: &[f64], ta: &[f64], tb: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COS_DEGENERATE_NORM || nb < COS_DEGENERATE_NORM {
        return 0.0;
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<f64>();
    let d_dot = a.iter().zip(tb).map(|(&x, &y)| x * y).sum::<f64>()
        + b.iter().zip(ta).map(|(&x, &y)| x * y).sum::<f64>();
    let d_na = a.iter().zip(ta).map(|(&x, &y)| x * y).sum::<f64>() / na;
    let d_nb = b.iter().zip(tb).map(|(&x, &y)| x * y).sum::<f64>() / nb;
    // d(1 - dot/(na nb)) = -[d_dot/(na nb) - dot (d_na nb + na d_nb)/(na nb)^2]
    -(d_dot / (na * nb) - dot * (d_na * nb + na * d_nb) / (na * nb * na * nb))
}

/// VJP of one cosine-distance row: adds the scaled row gradients into
/// `ga`/`gb`. Degenerate rows contribute nothing.
fn cosine_row_vjp(a: &[f64], b: &[f64], g: f64, ga: &mut [f64], gb: &mut [f64]) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COS_DEGENERATE_NORM || nb < COS_DEGENERATE_NORM {
        return;
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<f64>();
    // d/da_j [1 - dot/(na nb)] = -(b_j/(na nb) - dot a_j/(na^3 nb))
    for j in 0..a.len() {
        ga[j] += g * (-(b[j] / (na * nb)) + dot * a[j] / (na * na * na * nb));
        gb[j] += g * (-(a[j] / (na * nb)) + dot * b[j] / (nb * nb * nb * na));
    }
}

/// Run `f` once with dual-number inputs and return the primal together with
/// the directional derivative along `tangents`. Panics when inputs and
/// tangents disagree in count or shape (contract violation).
pub fn jvp<F>(f: F, inputs: &[Tensor], tangents: &[Tensor]) -> DualTensor
where
    F: FnOnce(&mut Tape, &[ValueId]) -> ValueId,
{
    assert_eq!(
        inputs.len(),
        tangents.len(),
        "jvp got {} inputs but {} tangents",
        inputs.len(),
        tangents.len()
    );
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| tape.input_dual(x.clone(), t.clone()))
        .collect();
    let out = f(&mut tape, &ids);
    tape.dual(out)
}

/// Evaluate a taped scalar function and differentiate it with respect to
/// every input. Returns the loss value and one dense gradient per input.
pub fn gradient<F>(f: F, inputs: &[Tensor]) -> (f64, Vec<Tensor>)
where
    F: FnOnce(&mut Tape, &[ValueId]) -> ValueId,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &ids);
    let loss = tape.value(out).item();
    let grads = tape.backward(out);
    (loss, ids.iter().map(|&id| grads.wrt_dense(id)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of a scalar function of flat inputs.
    fn fd_grad(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (k, x) in inputs.iter().enumerate() {
            let mut g = vec![0.0; x.numel()];
            for i in 0..x.numel() {
                let mut lo = inputs.to_vec();
                let mut hi = inputs.to_vec();
                lo[k].data_mut()[i] -= h;
                hi[k].data_mut()[i] += h;
                g[i] = (f(&hi) - f(&lo)) / (2.0 * h);
            }
            out.push(Tensor::new(x.shape().to_vec(), g));
        }
        out
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        let denom = a.abs().max(b.abs()).max(1.0);
        assert!(
            (a - b).abs() / denom <= tol,
            "values differ: {a} vs {b} (tol {tol})"
        );
    }

    /// Scalar test function exercising most primitives:
    /// mean(silu(x W + b) .* x) + |x| + clamped dot + cosine term.
    fn test_fn(tape: &mut Tape, ids: &[ValueId]) -> ValueId {
        let (x, w, b) = (ids[0], ids[1], ids[2]);
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        let h = tape.silu(h);
        let p = tape.mul(h, x);
        let m = tape.mean(p);
        let n = tape.l2_norm(x);
        let c = tape.clamp(h, -0.5, 0.5);
        let d = tape.dot(c, x);
        let cosd = tape.row_cosine(h, x);
        let cs = tape.mean(cosd);
        let s1 = tape.add(m, n);
        let s2 = tape.add(d, cs);
        tape.add(s1, s2)
    }

    fn test_inputs() -> Vec<Tensor> {
        vec![
            Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.2, 0.4]),
            Tensor::new(vec![2, 2], vec![0.5, -0.2, 0.8, 0.1]),
            Tensor::new(vec![2], vec![0.05, -0.3]),
        ]
    }

    #[test]
    fn reverse_mode_matches_central_differences() {
        let inputs = test_inputs();
        let (_, grads) = gradient(test_fn, &inputs);
        let fd = fd_grad(
            |xs| {
                let mut tape = Tape::new();
                let ids: Vec<ValueId> = xs.iter().map(|x| tape.input(x.clone())).collect();
                // run on a fresh tape: needs_grad off, we only read the value
                let mut t2 = Tape::new();
                let ids2: Vec<ValueId> = ids
                    .iter()
                    .map(|&id| t2.input(tape.value(id).clone()))
                    .collect();
                let out = test_fn(&mut t2, &ids2);
                t2.value(out).item()
            },
            &inputs,
            1e-5,
        );
        for (g, f) in grads.iter().zip(&fd) {
            for (x, y) in g.data().iter().zip(f.data()) {
                assert_close(*x, *y, 1e-6);
            }
        }
    }

    #[test]
    fn forward_mode_matches_reverse_mode_directional_derivative() {
        let inputs = test_inputs();
        let (_, grads) = gradient(test_fn, &inputs);
        let tangents: Vec<Tensor> = vec![
            Tensor::new(vec![2, 2], vec![0.11, -0.35, 0.97, -0.2]),
            Tensor::new(vec![2, 2], vec![-0.6, 0.44, 0.13, 0.9]),
            Tensor::new(vec![2], vec![0.77, -0.1]),
        ];
        let dual = jvp(test_fn, &inputs, &tangents);
        let from_reverse: f64 = grads.iter().zip(&tangents).map(|(g, t)| g.dot(t)).sum();
        let diff = (dual.tangent.item() - from_reverse).abs();
        let denom = dual.tangent.item().abs().max(from_reverse.abs()).max(1e-12);
        assert!(diff / denom <= 1e-10, "dot-consistency violated: {diff}");
    }

    #[test]
    fn jvp_primal_is_bit_identical_to_plain_forward() {
        let inputs = test_inputs();
        let zeros: Vec<Tensor> = inputs.iter().map(|x| Tensor::zeros(x.shape().to_vec())).collect();
        let dual = jvp(test_fn, &inputs, &zeros);
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = test_fn(&mut tape, &ids);
        assert_eq!(dual.primal.item().to_bits(), tape.value(out).item().to_bits());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(move || tape.backward(y)));
        assert!(r.is_err());
    }

    #[test]
    fn jvp_rejects_mismatched_seeds() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let r = std::panic::catch_unwind(|| {
            jvp(|t, ids| t.sum(ids[0]), &[x.clone()], &[])
        });
        assert!(r.is_err());
        let bad = Tensor::new(vec![3], vec![0.0; 3]);
        let r = std::panic::catch_unwind(|| {
            jvp(|t, ids| t.sum(ids[0]), &[x], &[bad])
        });
        assert!(r.is_err());
    }

    #[test]
    fn untouched_params_densify_to_zero_gradients() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::new(vec![2], vec![1.0, -1.0]));
        let unused = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let loss = tape.sum(used);
        let loss = tape.scale(loss, 3.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt_dense(used).data(), &[3.0, 3.0]);
        assert!(grads.wrt(unused).is_none());
        assert_eq!(grads.wrt_dense(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_gradient_is_pass_through_inside_zero_outside() {
        let x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]);
        let (_, grads) = gradient(
            |t, ids| {
                let c = t.clamp(ids[0], -1.0, 1.0);
                t.sum(c)
            },
            &[x],
        );
        assert_eq!(grads[0].data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn nan_gradients_raise_the_diagnostic_flag() {
        let x = Tensor::new(vec![2], vec![f64::NAN, 1.0]);
        let mut tape = Tape::new();
        let id = tape.param(x);
        let sq = tape.mul(id, id);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        assert!(grads.has_non_finite());
    }

    #[test]
    fn gather_scatters_gradients_into_the_right_rows() {
        let table = Tensor::new(vec![3, 2], vec![0.0; 6]);
        let (_, grads) = gradient(
            |t, ids| {
                let g = t.gather(ids[0], Arc::new(vec![1, 1, 2]));
                t.sum(g)
            },
            &[table],
        );
        assert_eq!(grads[0].data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn second_tangent_channel_flows_through_time_embed() {
        // d/dc sin(c f) = f cos(c f); check via jvp with unit seed
        let col = Tensor::new(vec![1, 1], vec![0.3]);
        let seed = Tensor::new(vec![1, 1], vec![1.0]);
        let freqs = Arc::new(vec![0.5, 1.5]);
        let f2 = freqs.clone();
        let dual = jvp(
            move |t, ids| {
                let e = t.time_embed(ids[0], f2.clone());
                t.sum(e)
            },
            &[col],
            &[seed],
        );
        let want: f64 = [0.5f64, 1.5]
            .iter()
            .map(|f| f * (0.3 * f).cos() - f * (0.3 * f).sin())
            .sum();
        assert_close(dual.tangent.item(), want, 1e-12);
    }
}
