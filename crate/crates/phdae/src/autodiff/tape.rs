//! Eager reverse-mode tape over lane-batched tensors.
//!
//! Every tape value is a row-major `rows x lanes` block of `f64`. Lanes hold
//! independent samples evaluated in lockstep, so one recorded program
//! evaluates a whole minibatch; values with `lanes == 1` broadcast across
//! wider operands (parameters, constants). Values are computed eagerly at
//! record time, which lets value-dependent control flow (pivot selection,
//! Newton iterations) run during the forward pass.
//!
//! Derivative structures needed inside a forward pass (state Jacobians of
//! the algebraic equations) are themselves expressed with these primitive
//! ops, so a single reverse sweep differentiates through them.

use std::cell::RefCell;
use std::rc::Rc;

use crate::numerics::{DenseMatrix, LuFactors};

/// Handle to a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(u32);

impl ValId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnOp {
    Neg,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// Add a compile-time constant.
    AddC(f64),
    Tanh,
    Relu,
    /// Heaviside step with step(0) = 0; derivative treated as 0 everywhere.
    Step,
    Exp,
    Powi(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Kind {
    Leaf,
    Unary {
        op: UnOp,
        a: ValId,
    },
    Binary {
        op: BinOp,
        a: ValId,
        b: ValId,
    },
    /// Per-lane `y = W x`, where `w` is a flat `(out*inn) x 1` parameter
    /// block and `x` holds `r` columns per lane (flat `(inn*r) x lanes`).
    MatMul {
        w: ValId,
        x: ValId,
        out: usize,
        inn: usize,
        r: usize,
    },
    /// Per-lane `y = A x` with a constant matrix `A` (`p x q`); `x` holds
    /// `r` columns per lane (flat `(q*r) x lanes`).
    ConstMul {
        m: Rc<DenseMatrix>,
        x: ValId,
        r: usize,
    },
    /// Row gather: `y[i] = x[idx[i]]`.
    Gather {
        x: ValId,
        idx: Rc<Vec<u32>>,
    },
    /// Contiguous row slice.
    Slice {
        x: ValId,
        start: usize,
    },
    /// Row-wise concatenation; parts with `lanes == 1` are broadcast.
    Concat {
        parts: Vec<ValId>,
    },
    /// Per-lane sum over rows, yielding `1 x lanes`.
    SumRows {
        x: ValId,
    },
    /// Mean over lanes, yielding `rows x 1`.
    MeanLanes {
        x: ValId,
    },
    /// Per-lane solve `A y = b` with `a` flat `(k*k) x lanes`. Lanes with a
    /// singular pivot produce zeros and are reported in the mask.
    LinSolve {
        a: ValId,
        b: ValId,
        k: usize,
        factors: Vec<Option<LuFactors>>,
    },
}

struct Node {
    kind: Kind,
    rows: usize,
    lanes: usize,
    off: usize,
    needs_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    data: Vec<f64>,
    adj: Vec<f64>,
}

/// Reverse-mode tape. Single-owner: not `Sync`; independent tapes may run in
/// parallel workers.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dgemm_wrap(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for v in c.iter_mut() {
                *v = 0.0;
            }
        } else if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                data: Vec::new(),
                adj: Vec::new(),
            }),
        }
    }

    /// Drop all recorded nodes, retaining allocated capacity.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.data.clear();
        inner.adj.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, id: ValId) -> usize {
        self.inner.borrow().nodes[id.idx()].rows
    }

    pub fn lanes(&self, id: ValId) -> usize {
        self.inner.borrow().nodes[id.idx()].lanes
    }

    pub fn value(&self, id: ValId) -> Vec<f64> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id.idx()];
        inner.data[node.off..node.off + node.rows * node.lanes].to_vec()
    }

    pub fn value_scalar(&self, id: ValId) -> f64 {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id.idx()];
        debug_assert_eq!(node.rows * node.lanes, 1);
        inner.data[node.off]
    }

    /// Read one lane of a value into a buffer.
    pub fn read_lane(&self, id: ValId, lane: usize, out: &mut [f64]) {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id.idx()];
        assert!(lane < node.lanes);
        assert_eq!(out.len(), node.rows);
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = inner.data[node.off + i * node.lanes + lane];
        }
    }

    /// Adjoint of a node after `backward`.
    pub fn grad(&self, id: ValId) -> Vec<f64> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id.idx()];
        inner.adj[node.off..node.off + node.rows * node.lanes].to_vec()
    }

    fn push(&self, kind: Kind, rows: usize, lanes: usize, needs_grad: bool) -> ValId {
        let mut inner = self.inner.borrow_mut();
        let off = inner.data.len();
        inner.data.resize(off + rows * lanes, 0.0);
        inner.nodes.push(Node {
            kind,
            rows,
            lanes,
            off,
            needs_grad,
        });
        ValId((inner.nodes.len() - 1) as u32)
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&self, rows: usize, lanes: usize, values: &[f64], needs_grad: bool) -> ValId {
        assert_eq!(values.len(), rows * lanes, "leaf data length");
        let id = self.push(Kind::Leaf, rows, lanes, needs_grad);
        let mut inner = self.inner.borrow_mut();
        let off = inner.nodes[id.idx()].off;
        inner.data[off..off + values.len()].copy_from_slice(values);
        id
    }

    pub fn scalar(&self, v: f64) -> ValId {
        self.leaf(1, 1, &[v], false)
    }

    pub fn scalar_var(&self, v: f64) -> ValId {
        self.leaf(1, 1, &[v], true)
    }

    pub fn zeros(&self, rows: usize, lanes: usize) -> ValId {
        self.push(Kind::Leaf, rows, lanes, false)
    }

    /// Constant column broadcast across lanes.
    pub fn constant(&self, values: &[f64]) -> ValId {
        self.leaf(values.len(), 1, values, false)
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&self, op: UnOp, a: ValId) -> ValId {
        let (rows, lanes, grad) = {
            let inner = self.inner.borrow();
            let n = &inner.nodes[a.idx()];
            (n.rows, n.lanes, n.needs_grad)
        };
        let id = self.push(Kind::Unary { op, a }, rows, lanes, grad);
        let mut inner = self.inner.borrow_mut();
        let (a_off, out_off) = (inner.nodes[a.idx()].off, inner.nodes[id.idx()].off);
        let len = rows * lanes;
        let (before, out) = inner.data.split_at_mut(out_off);
        let src = &before[a_off..a_off + len];
        let dst = &mut out[..len];
        match op {
            UnOp::Neg => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = -s;
                }
            }
            UnOp::Scale(c) => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = c * s;
                }
            }
            UnOp::AddC(c) => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + c;
                }
            }
            UnOp::Tanh => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.tanh();
                }
            }
            UnOp::Relu => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = if *s > 0.0 { *s } else { 0.0 };
                }
            }
            UnOp::Step => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = if *s > 0.0 { 1.0 } else { 0.0 };
                }
            }
            UnOp::Exp => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.exp();
                }
            }
            UnOp::Powi(k) => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.powi(k);
                }
            }
        }
        id
    }

    pub fn neg(&self, a: ValId) -> ValId {
        self.unary(UnOp::Neg, a)
    }

    pub fn scale(&self, a: ValId, c: f64) -> ValId {
        self.unary(UnOp::Scale(c), a)
    }

    pub fn add_c(&self, a: ValId, c: f64) -> ValId {
        self.unary(UnOp::AddC(c), a)
    }

    pub fn tanh(&self, a: ValId) -> ValId {
        self.unary(UnOp::Tanh, a)
    }

    pub fn relu(&self, a: ValId) -> ValId {
        self.unary(UnOp::Relu, a)
    }

    /// 1 where the input is positive, else 0; constant under differentiation.
    pub fn step(&self, a: ValId) -> ValId {
        self.unary(UnOp::Step, a)
    }

    pub fn exp(&self, a: ValId) -> ValId {
        self.unary(UnOp::Exp, a)
    }

    pub fn powi(&self, a: ValId, k: i32) -> ValId {
        self.unary(UnOp::Powi(k), a)
    }

    fn binary(&self, op: BinOp, a: ValId, b: ValId) -> ValId {
        let (ra, la, ga, rb, lb, gb) = {
            let inner = self.inner.borrow();
            let na = &inner.nodes[a.idx()];
            let nb = &inner.nodes[b.idx()];
            (na.rows, na.lanes, na.needs_grad, nb.rows, nb.lanes, nb.needs_grad)
        };
        assert!(
            (ra == rb || ra == 1 || rb == 1) && (la == lb || la == 1 || lb == 1),
            "binary op shape mismatch: {ra}x{la} vs {rb}x{lb}"
        );
        let rows = ra.max(rb);
        let lanes = la.max(lb);
        let id = self.push(Kind::Binary { op, a, b }, rows, lanes, ga || gb);
        let mut inner = self.inner.borrow_mut();
        let a_off = inner.nodes[a.idx()].off;
        let b_off = inner.nodes[b.idx()].off;
        let out_off = inner.nodes[id.idx()].off;
        let (before, out) = inner.data.split_at_mut(out_off);
        for i in 0..rows {
            let ia = if ra == 1 { 0 } else { i };
            let ib = if rb == 1 { 0 } else { i };
            for l in 0..lanes {
                let va = before[a_off + ia * la + if la == 1 { 0 } else { l }];
                let vb = before[b_off + ib * lb + if lb == 1 { 0 } else { l }];
                out[i * lanes + l] = match op {
                    BinOp::Add => va + vb,
                    BinOp::Sub => va - vb,
                    BinOp::Mul => va * vb,
                    BinOp::Div => va / vb,
                };
            }
        }
        id
    }

    pub fn add(&self, a: ValId, b: ValId) -> ValId {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&self, a: ValId, b: ValId) -> ValId {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&self, a: ValId, b: ValId) -> ValId {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&self, a: ValId, b: ValId) -> ValId {
        self.binary(BinOp::Div, a, b)
    }

    // ---- structured ops -------------------------------------------------

    /// Per-lane matrix product with a parameter block: `y = W x` where `w`
    /// is flat `(out*inn) x 1` and `x` is flat `(inn*r) x lanes`.
    pub fn matmul(&self, w: ValId, x: ValId, out: usize, inn: usize, r: usize) -> ValId {
        let (w_rows, w_lanes, gw, x_rows, x_lanes, gx) = {
            let inner = self.inner.borrow();
            let nw = &inner.nodes[w.idx()];
            let nx = &inner.nodes[x.idx()];
            (nw.rows, nw.lanes, nw.needs_grad, nx.rows, nx.lanes, nx.needs_grad)
        };
        assert_eq!(w_rows, out * inn, "matmul weight shape");
        assert_eq!(w_lanes, 1, "matmul weights must be lane-broadcast");
        assert_eq!(x_rows, inn * r, "matmul input shape");
        let id = self.push(
            Kind::MatMul { w, x, out, inn, r },
            out * r,
            x_lanes,
            gw || gx,
        );
        let mut inner = self.inner.borrow_mut();
        let w_off = inner.nodes[w.idx()].off;
        let x_off = inner.nodes[x.idx()].off;
        let out_off = inner.nodes[id.idx()].off;
        let wide = r * x_lanes;
        let (before, dst) = inner.data.split_at_mut(out_off);
        dgemm_wrap(
            out,
            inn,
            wide,
            1.0,
            &before[w_off..w_off + out * inn],
            inn as isize,
            1,
            &before[x_off..x_off + inn * wide],
            wide as isize,
            1,
            0.0,
            &mut dst[..out * wide],
            wide as isize,
            1,
        );
        id
    }

    /// Per-lane product with a constant matrix: `y = A x`, `x` flat
    /// `(q*r) x lanes` where `A` is `p x q`.
    pub fn const_mul(&self, m: Rc<DenseMatrix>, x: ValId, r: usize) -> ValId {
        let (p, q) = (m.rows(), m.cols());
        let (x_rows, x_lanes, gx) = {
            let inner = self.inner.borrow();
            let nx = &inner.nodes[x.idx()];
            (nx.rows, nx.lanes, nx.needs_grad)
        };
        assert_eq!(x_rows, q * r, "const_mul input shape");
        let id = self.push(Kind::ConstMul { m: m.clone(), x, r }, p * r, x_lanes, gx);
        let mut inner = self.inner.borrow_mut();
        let x_off = inner.nodes[x.idx()].off;
        let out_off = inner.nodes[id.idx()].off;
        let wide = r * x_lanes;
        let (before, dst) = inner.data.split_at_mut(out_off);
        dgemm_wrap(
            p,
            q,
            wide,
            1.0,
            m.data(),
            q as isize,
            1,
            &before[x_off..x_off + q * wide],
            wide as isize,
            1,
            0.0,
            &mut dst[..p * wide],
            wide as isize,
            1,
        );
        id
    }

    /// Row gather: `y[i] = x[idx[i]]`.
    pub fn gather(&self, x: ValId, idx: Rc<Vec<u32>>) -> ValId {
        let (x_rows, lanes, gx) = {
            let inner = self.inner.borrow();
            let nx = &inner.nodes[x.idx()];
            (nx.rows, nx.lanes, nx.needs_grad)
        };
        debug_assert!(idx.iter().all(|&i| (i as usize) < x_rows));
        let rows = idx.len();
        let id = self.push(Kind::Gather { x, idx: idx.clone() }, rows, lanes, gx);
        let mut inner = self.inner.borrow_mut();
        let x_off = inner.nodes[x.idx()].off;
        let out_off = inner.nodes[id.idx()].off;
        let (before, dst) = inner.data.split_at_mut(out_off);
        for (i, &src_row) in idx.iter().enumerate() {
            let s = x_off + src_row as usize * lanes;
            dst[i * lanes..(i + 1) * lanes].copy_from_slice(&before[s..s + lanes]);
        }
        id
    }

    /// Contiguous row slice `x[start..start+len]`.
    pub fn slice(&self, x: ValId, start: usize, len: usize) -> ValId {
        let (x_rows, lanes, gx) = {
            let inner = self.inner.borrow();
            let nx = &inner.nodes[x.idx()];
            (nx.rows, nx.lanes, nx.needs_grad)
        };
        assert!(start + len <= x_rows, "slice out of bounds");
        let id = self.push(Kind::Slice { x, start }, len, lanes, gx);
        let mut inner = self.inner.borrow_mut();
        let x_off = inner.nodes[x.idx()].off;
        let out_off = inner.nodes[id.idx()].off;
        let (before, dst) = inner.data.split_at_mut(out_off);
        let s = x_off + start * lanes;
        dst[..len * lanes].copy_from_slice(&before[s..s + len * lanes]);
        id
    }

    /// Row-wise concatenation. Parts with one lane are broadcast to the
    /// widest lane count.
    pub fn concat(&self, parts: &[ValId]) -> ValId {
        assert!(!parts.is_empty());
        let (mut rows, mut lanes, mut grad) = (0usize, 1usize, false);
        {
            let inner = self.inner.borrow();
            for &p in parts {
                let n = &inner.nodes[p.idx()];
                rows += n.rows;
                grad |= n.needs_grad;
                if n.lanes != 1 {
                    assert!(
                        lanes == 1 || lanes == n.lanes,
                        "concat lane mismatch: {} vs {}",
                        lanes,
                        n.lanes
                    );
                    lanes = n.lanes;
                }
            }
        }
        let id = self.push(Kind::Concat { parts: parts.to_vec() }, rows, lanes, grad);
        let mut inner = self.inner.borrow_mut();
        let out_off = inner.nodes[id.idx()].off;
        let metas: Vec<(usize, usize, usize)> = {
            parts
                .iter()
                .map(|&p| {
                    let n = &inner.nodes[p.idx()];
                    (n.off, n.rows, n.lanes)
                })
                .collect()
        };
        let (before, dst) = inner.data.split_at_mut(out_off);
        let mut row0 = 0usize;
        for (off, prows, planes) in metas {
            for i in 0..prows {
                let dst_row = &mut dst[(row0 + i) * lanes..(row0 + i + 1) * lanes];
                if planes == lanes {
                    dst_row.copy_from_slice(&before[off + i * lanes..off + (i + 1) * lanes]);
                } else {
                    let v = before[off + i]; // planes == 1
                    for slot in dst_row.iter_mut() {
                        *slot = v;
                    }
                }
            }
            row0 += prows;
        }
        id
    }

    /// Per-lane sum over rows, producing `1 x lanes`.
    pub fn sum_rows(&self, x: ValId) -> ValId {
        let (rows, lanes, gx) = {
            let inner = self.inner.borrow();
            let n = &inner.nodes[x.idx()];
            (n.rows, n.lanes, n.needs_grad)
        };
        let id = self.push(Kind::SumRows { x }, 1, lanes, gx);
        let mut inner = self.inner.borrow_mut();
        let x_off = inner.nodes[x.idx()].off;
        let out_off = inner.nodes[id.idx()].off;
        let (before, dst) = inner.data.split_at_mut(out_off);
        for l in 0..lanes {
            let mut acc = 0.0;
            for i in 0..rows {
                acc += before[x_off + i * lanes + l];
            }
            dst[l] = acc;
        }
        id
    }

    /// Mean over lanes, producing `rows x 1`.
    pub fn mean_lanes(&self, x: ValId) -> ValId {
        let (rows, lanes, gx) = {
            let inner = self.inner.borrow();
            let n = &inner.nodes[x.idx()];
            (n.rows, n.lanes, n.needs_grad)
        };
        let id = self.push(Kind::MeanLanes { x }, rows, 1, gx);
        let mut inner = self.inner.borrow_mut();
        let x_off = inner.nodes[x.idx()].off;
        let out_off = inner.nodes[id.idx()].off;
        let (before, dst) = inner.data.split_at_mut(out_off);
        let inv = 1.0 / lanes as f64;
        for i in 0..rows {
            let mut acc = 0.0;
            for l in 0..lanes {
                acc += before[x_off + i * lanes + l];
            }
            dst[i] = acc * inv;
        }
        id
    }

    /// Per-lane linear solve `A y = b` where `a` is flat `(k*k) x lanes`.
    ///
    /// Returns the solution and the list of lanes whose matrix was singular;
    /// those lanes output zeros and propagate zero gradients.
    pub fn lin_solve(&self, a: ValId, b: ValId, k: usize) -> (ValId, Vec<u32>) {
        let (a_rows, a_lanes, ga, b_rows, b_lanes, gb) = {
            let inner = self.inner.borrow();
            let na = &inner.nodes[a.idx()];
            let nb = &inner.nodes[b.idx()];
            (na.rows, na.lanes, na.needs_grad, nb.rows, nb.lanes, nb.needs_grad)
        };
        assert_eq!(a_rows, k * k, "lin_solve matrix shape");
        assert_eq!(b_rows, k, "lin_solve rhs shape");
        assert_eq!(a_lanes, b_lanes, "lin_solve lane mismatch");
        let lanes = a_lanes;

        let mut factors: Vec<Option<LuFactors>> = Vec::with_capacity(lanes);
        let mut singular = Vec::new();
        let id = self.push(
            Kind::LinSolve {
                a,
                b,
                k,
                factors: Vec::new(),
            },
            k,
            lanes,
            ga || gb,
        );
        {
            let mut inner = self.inner.borrow_mut();
            let a_off = inner.nodes[a.idx()].off;
            let b_off = inner.nodes[b.idx()].off;
            let out_off = inner.nodes[id.idx()].off;
            let (before, dst) = inner.data.split_at_mut(out_off);
            let mut mat = DenseMatrix::zeros(k, k);
            let mut rhs = vec![0.0; k];
            for lane in 0..lanes {
                for i in 0..k {
                    for j in 0..k {
                        mat[(i, j)] = before[a_off + (i * k + j) * lanes + lane];
                    }
                    rhs[i] = before[b_off + i * lanes + lane];
                }
                match LuFactors::factor(&mat) {
                    Ok(f) => {
                        let sol = f.solve(&rhs);
                        for i in 0..k {
                            dst[i * lanes + lane] = sol[i];
                        }
                        factors.push(Some(f));
                    }
                    Err(_) => {
                        singular.push(lane as u32);
                        factors.push(None);
                    }
                }
            }
            if let Kind::LinSolve { factors: slot, .. } = &mut inner.nodes[id.idx()].kind {
                *slot = factors;
            }
        }
        (id, singular)
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Reverse sweep from a scalar loss node. Adjoints are reset first, so
    /// `backward` may be called repeatedly for different outputs.
    pub fn backward(&self, loss: ValId) {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        {
            let n = &inner.nodes[loss.idx()];
            assert_eq!(n.rows * n.lanes, 1, "backward requires a scalar output");
        }
        let data_len = inner.data.len();
        inner.adj.clear();
        inner.adj.resize(data_len, 0.0);
        inner.adj[inner.nodes[loss.idx()].off] = 1.0;

        for i in (0..=loss.idx()).rev() {
            if !inner.nodes[i].needs_grad {
                continue;
            }
            backward_node(inner, i);
        }
    }
}

/// Accumulate input adjoints for node `i`. The arena is append-only, so all
/// input offsets precede the node's own offset.
fn backward_node(inner: &mut Inner, i: usize) {
    let (rows, lanes, off) = {
        let n = &inner.nodes[i];
        (n.rows, n.lanes, n.off)
    };
    let len = rows * lanes;
    match &inner.nodes[i].kind {
        Kind::Leaf => {}
        Kind::Unary { op, a } => {
            let op = *op;
            let a = *a;
            let a_node = &inner.nodes[a.idx()];
            if !a_node.needs_grad {
                return;
            }
            let a_off = a_node.off;
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..len];
            let a_adj = &mut adj_lo[a_off..a_off + len];
            let a_val = &inner.data[a_off..a_off + len];
            let out_val = &inner.data[off..off + len];
            match op {
                UnOp::Neg => {
                    for (g, o) in a_adj.iter_mut().zip(out_adj) {
                        *g -= o;
                    }
                }
                UnOp::Scale(c) => {
                    for (g, o) in a_adj.iter_mut().zip(out_adj) {
                        *g += c * o;
                    }
                }
                UnOp::AddC(_) => {
                    for (g, o) in a_adj.iter_mut().zip(out_adj) {
                        *g += o;
                    }
                }
                UnOp::Tanh => {
                    for k in 0..len {
                        let y = out_val[k];
                        a_adj[k] += out_adj[k] * (1.0 - y * y);
                    }
                }
                UnOp::Relu => {
                    for k in 0..len {
                        if a_val[k] > 0.0 {
                            a_adj[k] += out_adj[k];
                        }
                    }
                }
                UnOp::Step => {}
                UnOp::Exp => {
                    for k in 0..len {
                        a_adj[k] += out_adj[k] * out_val[k];
                    }
                }
                UnOp::Powi(p) => {
                    for k in 0..len {
                        a_adj[k] += out_adj[k] * p as f64 * a_val[k].powi(p - 1);
                    }
                }
            }
        }
        Kind::Binary { op, a, b } => {
            let op = *op;
            let (a, b) = (*a, *b);
            let (a_off, ra, la, ga) = {
                let n = &inner.nodes[a.idx()];
                (n.off, n.rows, n.lanes, n.needs_grad)
            };
            let (b_off, rb, lb, gb) = {
                let n = &inner.nodes[b.idx()];
                (n.off, n.rows, n.lanes, n.needs_grad)
            };
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..len];
            for i_row in 0..rows {
                let ia = if ra == 1 { 0 } else { i_row };
                let ib = if rb == 1 { 0 } else { i_row };
                for l in 0..lanes {
                    let o = out_adj[i_row * lanes + l];
                    let ka = a_off + ia * la + if la == 1 { 0 } else { l };
                    let kb = b_off + ib * lb + if lb == 1 { 0 } else { l };
                    match op {
                        BinOp::Add => {
                            if ga {
                                adj_lo[ka] += o;
                            }
                            if gb {
                                adj_lo[kb] += o;
                            }
                        }
                        BinOp::Sub => {
                            if ga {
                                adj_lo[ka] += o;
                            }
                            if gb {
                                adj_lo[kb] -= o;
                            }
                        }
                        BinOp::Mul => {
                            let va = inner.data[ka];
                            let vb = inner.data[kb];
                            if ga {
                                adj_lo[ka] += o * vb;
                            }
                            if gb {
                                adj_lo[kb] += o * va;
                            }
                        }
                        BinOp::Div => {
                            let va = inner.data[ka];
                            let vb = inner.data[kb];
                            if ga {
                                adj_lo[ka] += o / vb;
                            }
                            if gb {
                                adj_lo[kb] -= o * va / (vb * vb);
                            }
                        }
                    }
                }
            }
        }
        Kind::MatMul { w, x, out, inn, r } => {
            let (w, x, out, inn, r) = (*w, *x, *out, *inn, *r);
            let (w_off, gw) = {
                let n = &inner.nodes[w.idx()];
                (n.off, n.needs_grad)
            };
            let (x_off, gx) = {
                let n = &inner.nodes[x.idx()];
                (n.off, n.needs_grad)
            };
            let wide = r * lanes;
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..len];
            // x_adj += W^T @ out_adj
            if gx {
                dgemm_wrap(
                    inn,
                    out,
                    wide,
                    1.0,
                    &inner.data[w_off..w_off + out * inn],
                    1,
                    inn as isize,
                    out_adj,
                    wide as isize,
                    1,
                    1.0,
                    &mut adj_lo[x_off..x_off + inn * wide],
                    wide as isize,
                    1,
                );
            }
            // w_adj += out_adj @ x^T (sums over lanes)
            if gw {
                dgemm_wrap(
                    out,
                    wide,
                    inn,
                    1.0,
                    out_adj,
                    wide as isize,
                    1,
                    &inner.data[x_off..x_off + inn * wide],
                    1,
                    wide as isize,
                    1.0,
                    &mut adj_lo[w_off..w_off + out * inn],
                    inn as isize,
                    1,
                );
            }
        }
        Kind::ConstMul { m, x, r } => {
            let m = m.clone();
            let (x, r) = (*x, *r);
            let (x_off, gx, x_rows) = {
                let n = &inner.nodes[x.idx()];
                (n.off, n.needs_grad, n.rows)
            };
            if !gx {
                return;
            }
            let wide = r * lanes;
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..len];
            dgemm_wrap(
                m.cols(),
                m.rows(),
                wide,
                1.0,
                m.data(),
                1,
                m.cols() as isize,
                out_adj,
                wide as isize,
                1,
                1.0,
                &mut adj_lo[x_off..x_off + x_rows * lanes],
                wide as isize,
                1,
            );
        }
        Kind::Gather { x, idx } => {
            let x = *x;
            let idx = idx.clone();
            let (x_off, gx) = {
                let n = &inner.nodes[x.idx()];
                (n.off, n.needs_grad)
            };
            if !gx {
                return;
            }
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..len];
            for (i_row, &src) in idx.iter().enumerate() {
                let dst = x_off + src as usize * lanes;
                for l in 0..lanes {
                    adj_lo[dst + l] += out_adj[i_row * lanes + l];
                }
            }
        }
        Kind::Slice { x, start } => {
            let (x, start) = (*x, *start);
            let (x_off, gx) = {
                let n = &inner.nodes[x.idx()];
                (n.off, n.needs_grad)
            };
            if !gx {
                return;
            }
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..len];
            let dst = x_off + start * lanes;
            for k in 0..len {
                adj_lo[dst + k] += out_adj[k];
            }
        }
        Kind::Concat { parts } => {
            let parts = parts.clone();
            let metas: Vec<(usize, usize, usize, bool)> = parts
                .iter()
                .map(|&p| {
                    let n = &inner.nodes[p.idx()];
                    (n.off, n.rows, n.lanes, n.needs_grad)
                })
                .collect();
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..len];
            let mut row0 = 0usize;
            for (p_off, p_rows, p_lanes, p_grad) in metas {
                if p_grad {
                    for i_row in 0..p_rows {
                        let src = &out_adj[(row0 + i_row) * lanes..(row0 + i_row + 1) * lanes];
                        if p_lanes == lanes {
                            let dst = &mut adj_lo[p_off + i_row * lanes..p_off + (i_row + 1) * lanes];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            // broadcast part: sum over lanes
                            let mut acc = 0.0;
                            for s in src {
                                acc += s;
                            }
                            adj_lo[p_off + i_row] += acc;
                        }
                    }
                }
                row0 += p_rows;
            }
        }
        Kind::SumRows { x } => {
            let x = *x;
            let (x_off, gx, x_rows) = {
                let n = &inner.nodes[x.idx()];
                (n.off, n.needs_grad, n.rows)
            };
            if !gx {
                return;
            }
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..lanes];
            for i_row in 0..x_rows {
                let dst = &mut adj_lo[x_off + i_row * lanes..x_off + (i_row + 1) * lanes];
                for (d, s) in dst.iter_mut().zip(out_adj) {
                    *d += s;
                }
            }
        }
        Kind::MeanLanes { x } => {
            let x = *x;
            let (x_off, gx, x_lanes) = {
                let n = &inner.nodes[x.idx()];
                (n.off, n.needs_grad, n.lanes)
            };
            if !gx {
                return;
            }
            let inv = 1.0 / x_lanes as f64;
            let (adj_lo, adj_hi) = inner.adj.split_at_mut(off);
            let out_adj = &adj_hi[..rows];
            for i_row in 0..rows {
                let g = out_adj[i_row] * inv;
                let dst = &mut adj_lo[x_off + i_row * x_lanes..x_off + (i_row + 1) * x_lanes];
                for d in dst.iter_mut() {
                    *d += g;
                }
            }
        }
        Kind::LinSolve { a, b, k, factors } => {
            let (a, b, k) = (*a, *b, *k);
            // Adjoints: with y = A^{-1} b, db = A^{-T} ybar, dA = -db y^T.
            let (a_off, ga) = {
                let n = &inner.nodes[a.idx()];
                (n.off, n.needs_grad)
            };
            let (b_off, gb) = {
                let n = &inner.nodes[b.idx()];
                (n.off, n.needs_grad)
            };
            let lane_solves: Vec<Option<Vec<f64>>> = {
                let mut result = Vec::with_capacity(lanes);
                let (_, adj_hi) = inner.adj.split_at(off);
                let out_adj = &adj_hi[..len];
                let mut ybar = vec![0.0; k];
                for lane in 0..lanes {
                    match &factors[lane] {
                        Some(f) => {
                            for i_row in 0..k {
                                ybar[i_row] = out_adj[i_row * lanes + lane];
                            }
                            result.push(Some(f.solve_transposed(&ybar)));
                        }
                        None => result.push(None),
                    }
                }
                result
            };
            let (adj_lo, _) = inner.adj.split_at_mut(off);
            for (lane, solved) in lane_solves.iter().enumerate() {
                if let Some(db) = solved {
                    if gb {
                        for i_row in 0..k {
                            adj_lo[b_off + i_row * lanes + lane] += db[i_row];
                        }
                    }
                    if ga {
                        for i_row in 0..k {
                            for j in 0..k {
                                let y_j = inner.data[off + j * lanes + lane];
                                adj_lo[a_off + (i_row * k + j) * lanes + lane] -= db[i_row] * y_j;
                            }
                        }
                    }
                }
            }
        }
    }
}
