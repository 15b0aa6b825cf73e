//! Assembly of the system matrices E, J, B from incidence matrices, and
//! evaluation of the flow J z(x) - r(x) + B u(t) for known or learned
//! component relations.
//!
//! State layout: x = [q_C | phi_L | e | j_V | lambda], where lambda holds
//! coupling currents and is empty for a standalone circuit. Equation rows
//! are ordered [KCL | flux | capacitor relation | voltage source | coupling].
//! The effort vector is z = [e | gradH(phi_L) | q(q_C) | j_V | lambda].

use std::ops::Range;
use std::rc::Rc;

use crate::autodiff::{Tape, ValId};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::topology::IncidenceSet;

/// Block offsets of the state vector and equation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n_c: usize,
    pub n_l: usize,
    pub n_v: usize,
    pub n_vsrc: usize,
    pub n_lambda: usize,
}

impl StateLayout {
    pub fn n(&self) -> usize {
        self.n_c + self.n_l + self.n_v + self.n_vsrc + self.n_lambda
    }

    /// Differential state count (capacitor charges and inductor fluxes).
    pub fn d(&self) -> usize {
        self.n_c + self.n_l
    }

    /// Algebraic state count (nodal voltages, source currents, couplings).
    pub fn a(&self) -> usize {
        self.n_v + self.n_vsrc + self.n_lambda
    }

    pub fn qc_range(&self) -> Range<usize> {
        0..self.n_c
    }

    pub fn phi_range(&self) -> Range<usize> {
        self.n_c..self.n_c + self.n_l
    }

    pub fn e_range(&self) -> Range<usize> {
        let d = self.d();
        d..d + self.n_v
    }

    pub fn jv_range(&self) -> Range<usize> {
        let s = self.d() + self.n_v;
        s..s + self.n_vsrc
    }

    pub fn lambda_range(&self) -> Range<usize> {
        let s = self.d() + self.n_v + self.n_vsrc;
        s..s + self.n_lambda
    }

    // Equation row blocks.
    pub fn kcl_rows(&self) -> Range<usize> {
        0..self.n_v
    }

    pub fn flux_rows(&self) -> Range<usize> {
        self.n_v..self.n_v + self.n_l
    }

    pub fn cap_rows(&self) -> Range<usize> {
        let s = self.n_v + self.n_l;
        s..s + self.n_c
    }

    pub fn vsrc_rows(&self) -> Range<usize> {
        let s = self.n_v + self.n_l + self.n_c;
        s..s + self.n_vsrc
    }

    pub fn lambda_rows(&self) -> Range<usize> {
        let s = self.n_v + self.n_l + self.n_c + self.n_vsrc;
        s..s + self.n_lambda
    }
}

/// Piecewise-constant input signal u(t) = (i(t), v(t)).
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Constant(Vec<f64>),
    /// Right-open steps: value k applies on [times[k], times[k+1]).
    Steps {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl Signal {
    pub fn dim(&self) -> usize {
        match self {
            Signal::Constant(v) => v.len(),
            Signal::Steps { values, .. } => values.first().map_or(0, |v| v.len()),
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        match self {
            Signal::Constant(v) => v.clone(),
            Signal::Steps { times, values } => {
                let mut k = 0;
                while k + 1 < times.len() && t >= times[k + 1] {
                    k += 1;
                }
                values[k].clone()
            }
        }
    }
}

/// Component relations: resistor voltage -> current map `g`, capacitor
/// charge -> voltage map `q`, and the gradient of the inductor Hamiltonian.
///
/// Implementations build their outputs (and the derivative structures the
/// index reduction needs) as tape ops, so the same code path serves plain
/// evaluation, simulation, and training.
pub trait Relations {
    fn n_r(&self) -> usize;
    fn n_c(&self) -> usize;
    fn n_l(&self) -> usize;

    /// Length of the trainable parameter vector (0 for known relations).
    fn param_len(&self) -> usize {
        0
    }

    /// Resistor relation: branch voltages `[n_r x L]` to branch currents.
    fn g(&self, t: &Tape, theta: Option<ValId>, vr: ValId) -> ValId;

    /// Capacitor relation: charges `[n_c x L]` to capacitor voltages.
    fn q(&self, t: &Tape, theta: Option<ValId>, qc: ValId) -> ValId;

    /// Gradient of the Hamiltonian: fluxes `[n_l x L]` to inductor currents.
    fn grad_h(&self, t: &Tape, theta: Option<ValId>, phi: ValId) -> ValId;

    /// Jacobian of `g` as a per-lane flat matrix `[(n_r*n_r) x L]`.
    fn jac_g(&self, t: &Tape, theta: Option<ValId>, vr: ValId) -> ValId;

    /// Directional derivative of `q` at `qc` along `dqc`, `[n_c x L]`.
    fn jvp_q(&self, t: &Tape, theta: Option<ValId>, qc: ValId, dqc: ValId) -> ValId;

    /// Directional derivative of `grad_h` at `phi` along `dphi`, `[n_l x L]`.
    fn jvp_grad_h(&self, t: &Tape, theta: Option<ValId>, phi: ValId, dphi: ValId) -> ValId;
}

/// Linear relations g(v) = v / R, q(c) = c / C, gradH(phi) = phi / L with
/// per-component constants.
#[derive(Debug, Clone)]
pub struct LinearRelations {
    pub r_vals: Vec<f64>,
    pub c_vals: Vec<f64>,
    pub l_vals: Vec<f64>,
}

impl LinearRelations {
    pub fn new(r_vals: Vec<f64>, c_vals: Vec<f64>, l_vals: Vec<f64>) -> Result<Self> {
        for (name, vals) in [("R", &r_vals), ("C", &c_vals), ("L", &l_vals)] {
            if vals.iter().any(|&v| v <= 0.0) {
                return Err(Error::Config(format!("{name} values must be positive")));
            }
        }
        Ok(LinearRelations {
            r_vals,
            c_vals,
            l_vals,
        })
    }

    fn inv(vals: &[f64]) -> Vec<f64> {
        vals.iter().map(|v| 1.0 / v).collect()
    }
}

impl Relations for LinearRelations {
    fn n_r(&self) -> usize {
        self.r_vals.len()
    }
    fn n_c(&self) -> usize {
        self.c_vals.len()
    }
    fn n_l(&self) -> usize {
        self.l_vals.len()
    }

    fn g(&self, t: &Tape, _theta: Option<ValId>, vr: ValId) -> ValId {
        if self.r_vals.is_empty() {
            return vr;
        }
        t.mul(vr, t.constant(&Self::inv(&self.r_vals)))
    }

    fn q(&self, t: &Tape, _theta: Option<ValId>, qc: ValId) -> ValId {
        if self.c_vals.is_empty() {
            return qc;
        }
        t.mul(qc, t.constant(&Self::inv(&self.c_vals)))
    }

    fn grad_h(&self, t: &Tape, _theta: Option<ValId>, phi: ValId) -> ValId {
        if self.l_vals.is_empty() {
            return phi;
        }
        t.mul(phi, t.constant(&Self::inv(&self.l_vals)))
    }

    fn jac_g(&self, t: &Tape, _theta: Option<ValId>, vr: ValId) -> ValId {
        let k = self.n_r();
        let mut flat = vec![0.0; k * k];
        for (i, r) in self.r_vals.iter().enumerate() {
            flat[i * k + i] = 1.0 / r;
        }
        let _ = vr;
        t.constant(&flat)
    }

    fn jvp_q(&self, t: &Tape, _theta: Option<ValId>, _qc: ValId, dqc: ValId) -> ValId {
        if self.c_vals.is_empty() {
            return dqc;
        }
        t.mul(dqc, t.constant(&Self::inv(&self.c_vals)))
    }

    fn jvp_grad_h(&self, t: &Tape, _theta: Option<ValId>, _phi: ValId, dphi: ValId) -> ValId {
        if self.l_vals.is_empty() {
            return dphi;
        }
        t.mul(dphi, t.constant(&Self::inv(&self.l_vals)))
    }
}

/// The assembled constant matrices of d/dt(E x) = J z(x) - r(x) + B u(t).
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub e: Rc<DenseMatrix>,
    pub j: Rc<DenseMatrix>,
    pub b: Rc<DenseMatrix>,
}

impl SystemMatrices {
    /// Exact skew-symmetry of J (integer entries).
    pub fn j_is_skew(&self) -> bool {
        let j = &*self.j;
        let n = j.rows();
        for i in 0..n {
            for k in 0..n {
                if j[(i, k)] + j[(k, i)] != 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

fn place(dst: &mut DenseMatrix, rows: Range<usize>, cols: Range<usize>, m: &DenseMatrix, sign: f64) {
    assert_eq!(rows.len(), m.rows());
    assert_eq!(cols.len(), m.cols());
    for (i, r) in rows.enumerate() {
        for (j, c) in cols.clone().enumerate() {
            dst[(r, c)] = sign * m[(i, j)];
        }
    }
}

/// Assemble E, J, B (optionally with coupling columns `A_lambda`).
///
/// Sign conventions validated against the FitzHugh-Nagumo reference
/// dynamics: J[KCL, gradH] = +A_L, J[flux, e] = -A_L^T, J[KCL, j_V] = -A_V,
/// J[vsrc, e] = +A_V^T, B[KCL, i] = +A_I, B[vsrc, v] = +I. Couplings act as
/// zero-voltage sources: J[KCL, lambda] = -A_lambda, J[lambda, e] =
/// +A_lambda^T, with no input column.
pub fn assemble_with_coupling(
    inc: &IncidenceSet,
    a_lambda: Option<&DenseMatrix>,
) -> Result<(SystemMatrices, StateLayout)> {
    let c = inc.counts();
    for kind in crate::topology::ComponentKind::ALL {
        if inc.get(kind).rows() != c.n_v {
            return Err(Error::dimension(
                c.n_v,
                inc.get(kind).rows(),
                format!("A_{} row count", kind.letter()),
            ));
        }
    }
    let n_lambda = a_lambda.map_or(0, |m| m.cols());
    if let Some(al) = a_lambda {
        if al.rows() != c.n_v {
            return Err(Error::dimension(c.n_v, al.rows(), "A_lambda row count"));
        }
    }
    let layout = StateLayout {
        n_c: c.n_c,
        n_l: c.n_l,
        n_v: c.n_v,
        n_vsrc: c.n_vsrc,
        n_lambda,
    };
    let n = layout.n();

    let mut e = DenseMatrix::zeros(n, n);
    place(&mut e, layout.kcl_rows(), layout.qc_range(), &inc.a_c, 1.0);
    place(
        &mut e,
        layout.flux_rows(),
        layout.phi_range(),
        &DenseMatrix::identity(layout.n_l),
        1.0,
    );

    // z-block column offsets: [e | gradH | q | j_V | lambda] with sizes
    // (n_v, n_l, n_c, n_vsrc, n_lambda) matching the row block sizes.
    let ze = 0..layout.n_v;
    let zh = layout.n_v..layout.n_v + layout.n_l;
    let zq_end = layout.n_v + layout.n_l + layout.n_c;
    let zj = zq_end..zq_end + layout.n_vsrc;
    let zl = zq_end + layout.n_vsrc..n;

    let mut j = DenseMatrix::zeros(n, n);
    place(&mut j, layout.kcl_rows(), zh.clone(), &inc.a_l, 1.0);
    place(&mut j, layout.kcl_rows(), zj.clone(), &inc.a_v, -1.0);
    place(&mut j, layout.flux_rows(), ze.clone(), &inc.a_l.transpose(), -1.0);
    place(&mut j, layout.vsrc_rows(), ze.clone(), &inc.a_v.transpose(), 1.0);
    if let Some(al) = a_lambda {
        place(&mut j, layout.kcl_rows(), zl.clone(), al, -1.0);
        place(&mut j, layout.lambda_rows(), ze.clone(), &al.transpose(), 1.0);
    }

    let m = c.n_i + c.n_vsrc;
    let mut b = DenseMatrix::zeros(n, m);
    place(&mut b, layout.kcl_rows(), 0..c.n_i, &inc.a_i, 1.0);
    place(
        &mut b,
        layout.vsrc_rows(),
        c.n_i..m,
        &DenseMatrix::identity(c.n_vsrc),
        1.0,
    );

    Ok((
        SystemMatrices {
            e: Rc::new(e),
            j: Rc::new(j),
            b: Rc::new(b),
        },
        layout,
    ))
}

/// Assemble E, J, B for a standalone circuit.
pub fn assemble(inc: &IncidenceSet) -> Result<(SystemMatrices, StateLayout)> {
    assemble_with_coupling(inc, None)
}

/// Intermediate tape values shared between the flow and its derivative
/// structures.
pub struct RhsParts {
    pub rhs: ValId,
    pub e: ValId,
    pub qc: ValId,
    pub phi: ValId,
    pub vr: ValId,
    pub q_of_qc: ValId,
    pub grad_h: ValId,
}

/// A port-Hamiltonian DAE: matrices, component relations (with their
/// parameter values, empty for known relations), and input signal.
pub struct PHDAESystem {
    pub layout: StateLayout,
    pub matrices: SystemMatrices,
    pub incidence: IncidenceSet,
    pub relations: Rc<dyn Relations>,
    pub sources: Signal,
    pub params: Vec<f64>,
    pub a_lambda: Option<Rc<DenseMatrix>>,
    a_r: Rc<DenseMatrix>,
    a_rt: Rc<DenseMatrix>,
    a_ct: Rc<DenseMatrix>,
}

impl PHDAESystem {
    pub fn new(
        incidence: IncidenceSet,
        relations: Rc<dyn Relations>,
        sources: Signal,
        params: Vec<f64>,
    ) -> Result<Self> {
        Self::with_coupling(incidence, None, relations, sources, params)
    }

    pub fn with_coupling(
        incidence: IncidenceSet,
        a_lambda: Option<DenseMatrix>,
        relations: Rc<dyn Relations>,
        sources: Signal,
        params: Vec<f64>,
    ) -> Result<Self> {
        let (matrices, layout) = assemble_with_coupling(&incidence, a_lambda.as_ref())?;
        let c = incidence.counts();
        if relations.n_r() != c.n_r || relations.n_c() != c.n_c || relations.n_l() != c.n_l {
            return Err(Error::Config(format!(
                "relations dims (R={}, C={}, L={}) do not match circuit (R={}, C={}, L={})",
                relations.n_r(),
                relations.n_c(),
                relations.n_l(),
                c.n_r,
                c.n_c,
                c.n_l
            )));
        }
        let m = c.n_i + c.n_vsrc;
        if sources.dim() != m {
            return Err(Error::dimension(m, sources.dim(), "source signal dim"));
        }
        if params.len() != relations.param_len() {
            return Err(Error::dimension(
                relations.param_len(),
                params.len(),
                "relation parameters",
            ));
        }
        let a_r = Rc::new(incidence.a_r.clone());
        let a_rt = Rc::new(incidence.a_r.transpose());
        let a_ct = Rc::new(incidence.a_c.transpose());
        Ok(PHDAESystem {
            layout,
            matrices,
            incidence,
            relations,
            sources,
            params,
            a_lambda: a_lambda.map(Rc::new),
            a_r,
            a_rt,
            a_ct,
        })
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn input_dim(&self) -> usize {
        self.matrices.b.cols()
    }

    fn state_slices(&self, t: &Tape, x: ValId) -> (ValId, ValId, ValId, ValId, ValId) {
        let l = self.layout;
        let qc = t.slice(x, l.qc_range().start, l.n_c);
        let phi = t.slice(x, l.phi_range().start, l.n_l);
        let e = t.slice(x, l.e_range().start, l.n_v);
        let jv = t.slice(x, l.jv_range().start, l.n_vsrc);
        let lam = t.slice(x, l.lambda_range().start, l.n_lambda);
        (qc, phi, e, jv, lam)
    }

    /// Effort z(x) = [e, gradH(phi), q(q_C), j_V, lambda] as tape ops.
    pub fn effort_ops(&self, t: &Tape, theta: Option<ValId>, x: ValId) -> ValId {
        let (qc, phi, e, jv, lam) = self.state_slices(t, x);
        let gh = self.relations.grad_h(t, theta, phi);
        let qv = self.relations.q(t, theta, qc);
        t.concat(&[e, gh, qv, jv, lam])
    }

    /// Dissipation r(x) = [A_R g(A_R^T e), 0, A_C^T e - q(q_C), 0, 0].
    pub fn dissipation_ops(&self, t: &Tape, theta: Option<ValId>, x: ValId) -> ValId {
        let (qc, _phi, e, _jv, _lam) = self.state_slices(t, x);
        let lanes = t.lanes(x);
        let vr = t.const_mul(self.a_rt.clone(), e, 1);
        let gv = self.relations.g(t, theta, vr);
        let r_kcl = t.const_mul(self.a_r.clone(), gv, 1);
        let qv = self.relations.q(t, theta, qc);
        let r_cap = t.sub(t.const_mul(self.a_ct.clone(), e, 1), qv);
        let l = self.layout;
        t.concat(&[
            r_kcl,
            t.zeros(l.n_l, lanes),
            r_cap,
            t.zeros(l.n_vsrc + l.n_lambda, lanes),
        ])
    }

    /// Full flow J z(x) - r(x) + B u, sharing relation evaluations, with the
    /// intermediates needed by the index reduction.
    pub fn rhs_parts_ops(&self, t: &Tape, theta: Option<ValId>, x: ValId, u: ValId) -> RhsParts {
        let l = self.layout;
        let lanes = t.lanes(x);
        let (qc, phi, e, jv, lam) = self.state_slices(t, x);
        let gh = self.relations.grad_h(t, theta, phi);
        let qv = self.relations.q(t, theta, qc);
        let z = t.concat(&[e, gh, qv, jv, lam]);
        let jz = t.const_mul(self.matrices.j.clone(), z, 1);

        let vr = t.const_mul(self.a_rt.clone(), e, 1);
        let gv = self.relations.g(t, theta, vr);
        let r_kcl = t.const_mul(self.a_r.clone(), gv, 1);
        let r_cap = t.sub(t.const_mul(self.a_ct.clone(), e, 1), qv);
        let r = t.concat(&[
            r_kcl,
            t.zeros(l.n_l, lanes),
            r_cap,
            t.zeros(l.n_vsrc + l.n_lambda, lanes),
        ]);

        let bu = t.const_mul(self.matrices.b.clone(), u, 1);
        let rhs = t.add(t.sub(jz, r), bu);
        RhsParts {
            rhs,
            e,
            qc,
            phi,
            vr,
            q_of_qc: qv,
            grad_h: gh,
        }
    }

    pub fn rhs_ops(&self, t: &Tape, theta: Option<ValId>, x: ValId, u: ValId) -> ValId {
        self.rhs_parts_ops(t, theta, x, u).rhs
    }

    fn theta_leaf(&self, t: &Tape) -> Option<ValId> {
        if self.params.is_empty() {
            None
        } else {
            Some(t.leaf(self.params.len(), 1, &self.params, false))
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::dimension(self.n(), x.len(), "state length"));
        }
        Ok(())
    }

    /// Effort at a plain state vector.
    pub fn effort(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let t = Tape::new();
        let theta = self.theta_leaf(&t);
        let xid = t.leaf(x.len(), 1, x, false);
        let z = self.effort_ops(&t, theta, xid);
        Ok(t.value(z))
    }

    /// Dissipation at a plain state vector.
    pub fn dissipation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let t = Tape::new();
        let theta = self.theta_leaf(&t);
        let xid = t.leaf(x.len(), 1, x, false);
        let r = self.dissipation_ops(&t, theta, xid);
        Ok(t.value(r))
    }

    /// Flow at a plain state vector with an explicit input vector.
    pub fn rhs_at(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        if u.len() != self.input_dim() {
            return Err(Error::dimension(self.input_dim(), u.len(), "input length"));
        }
        let t = Tape::new();
        let theta = self.theta_leaf(&t);
        let xid = t.leaf(x.len(), 1, x, false);
        let uid = t.leaf(u.len(), 1, u, false);
        let rhs = self.rhs_ops(&t, theta, xid, uid);
        let out = t.value(rhs);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rhs evaluation".into()));
        }
        Ok(out)
    }

    /// Flow at time t, sampling the source signal.
    pub fn rhs(&self, x: &[f64], time: f64) -> Result<Vec<f64>> {
        let u = self.sources.eval(time);
        self.rhs_at(x, &u)
    }

    // Internal accessor for the reduction module.
    pub(crate) fn a_r_rc(&self) -> Rc<DenseMatrix> {
        self.a_r.clone()
    }
}
