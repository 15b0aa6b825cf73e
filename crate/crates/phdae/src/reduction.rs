//! Semi-explicit transformation and index reduction: classify rows of E,
//! factor the differential block with reduced QR, and turn the DAE into an
//! explicit ODE by differentiating the algebraic equations.
//!
//! With differential states v and algebraic states w, the reduced system is
//!
//! ```text
//! vdot = f(v,w,u,t) = R^-1 Q^T [J z - r + B u]_diffRows
//! wdot = -(dh/dw)^-1 (dh/dv f + dh/du udot + dt h)
//! ```
//!
//! where h collects the rows of the flow at the zero rows of E. Inputs are
//! held with a zero-order hold, so the udot term is zero in normal use (it
//! is kept in code behind an explicit argument).

use std::rc::Rc;

use crate::assembly::{PHDAESystem, RhsParts, StateLayout};
use crate::autodiff::{Tape, ValId};
use crate::error::{Error, Result};
use crate::numerics::{self, DenseMatrix};
use crate::simulate::VectorField;

/// Row/state partition of a PHDAE into differential and algebraic parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub diff_rows: Vec<usize>,
    pub alg_rows: Vec<usize>,
    pub diff_states: Vec<usize>,
    pub alg_states: Vec<usize>,
}

fn partition_rows(e: &DenseMatrix, layout: &StateLayout) -> Partition {
    let n = layout.n();
    let mut diff_rows = Vec::new();
    let mut alg_rows = Vec::new();
    for i in 0..n {
        if (0..n).any(|j| e[(i, j)] != 0.0) {
            diff_rows.push(i);
        } else {
            alg_rows.push(i);
        }
    }
    Partition {
        diff_rows,
        alg_rows,
        diff_states: (0..layout.d()).collect(),
        alg_states: (layout.d()..n).collect(),
    }
}

/// Split equation rows into differential (nonzero rows of E) and algebraic
/// (zero rows), and states into (q_C, phi_L) and (e, j_V, lambda).
///
/// Errors when the algebraic block is not square, i.e. the number of zero
/// rows differs from the number of algebraic states; index reduction needs a
/// square dh/dw.
pub fn classify(e: &DenseMatrix, layout: &StateLayout) -> Result<Partition> {
    let p = partition_rows(e, layout);
    if p.alg_rows.len() != layout.a() {
        return Err(Error::Structural(format!(
            "{} algebraic rows for {} algebraic states; capacitor rows of E must \
             match the capacitor count",
            p.alg_rows.len(),
            layout.a()
        )));
    }
    Ok(p)
}

fn transpose_perm(p: usize, q: usize) -> Vec<u32> {
    // flat [p x q] -> flat [q x p]
    let mut idx = vec![0u32; p * q];
    for i in 0..p {
        for j in 0..q {
            idx[j * p + i] = (i * q + j) as u32;
        }
    }
    idx
}

/// Tape values produced by one reduced-field construction.
pub struct FieldBuild {
    pub xdot: ValId,
    /// Algebraic residual at the evaluation point.
    pub h: ValId,
    /// Lanes whose dh/dw was singular (their wdot is zeroed).
    pub singular: Vec<u32>,
}

/// A PHDAE in semi-explicit form: row partition, reduced QR of the
/// differential block of E, and builders for f, h, and the reduced ODE
/// field.
pub struct SemiExplicitSystem {
    pub sys: Rc<PHDAESystem>,
    pub partition: Partition,
    /// Q factor of Ebar (p x d).
    pub q_fact: DenseMatrix,
    /// R factor of Ebar (d x d, positive diagonal).
    pub r_fact: DenseMatrix,
    /// True when the algebraic block is square (index reduction possible).
    pub square: bool,
    /// R^-1 Q^T, mapping the differential rows of the flow to vdot.
    mf: Rc<DenseMatrix>,
    diff_idx: Rc<Vec<u32>>,
    alg_idx: Rc<Vec<u32>>,
    /// Rows of the KCL block that are algebraic (zero rows of A_C).
    kcl_alg: Vec<usize>,
    neg_a_r_sel: Rc<DenseMatrix>,
    a_l_sel: Rc<DenseMatrix>,
    b_alg: Rc<DenseMatrix>,
    /// Constant part of dh/dw, flattened a x a.
    dhdw_const: Vec<f64>,
    /// Scatter map embedding the resistor block into flat dh/dw.
    embed_idx: Rc<Vec<u32>>,
    tr_block: Rc<Vec<u32>>,
    tr_back: Rc<Vec<u32>>,
}

impl SemiExplicitSystem {
    pub fn new(sys: Rc<PHDAESystem>) -> Result<Self> {
        let layout = sys.layout;
        let partition = partition_rows(&sys.matrices.e, &layout);
        let d = layout.d();
        let a = layout.a();
        let p = partition.diff_rows.len();
        if p < d {
            return Err(Error::Structural(format!(
                "{p} differential equations for {d} differential states"
            )));
        }
        let square = partition.alg_rows.len() == a;

        let (q_fact, r_fact, mf) = if d > 0 {
            let ebar = sys
                .matrices
                .e
                .select(&partition.diff_rows, &(0..d).collect::<Vec<_>>());
            let (q, r) = numerics::reduced_qr(&ebar)?;
            // mf = R^-1 Q^T, column by column back substitution
            let qt = q.transpose();
            let mut mf = DenseMatrix::zeros(d, p);
            for col in 0..p {
                let rhs: Vec<f64> = (0..d).map(|i| qt[(i, col)]).collect();
                let x = numerics::solve_upper_triangular(&r, &rhs);
                for i in 0..d {
                    mf[(i, col)] = x[i];
                }
            }
            (q, r, mf)
        } else {
            (
                DenseMatrix::zeros(0, 0),
                DenseMatrix::zeros(0, 0),
                DenseMatrix::zeros(0, 0),
            )
        };

        let kcl_alg: Vec<usize> = partition
            .alg_rows
            .iter()
            .copied()
            .filter(|&r| r < layout.n_v)
            .collect();
        let ka = kcl_alg.len();
        let inc = &sys.incidence;
        let n_r = inc.a_r.cols();
        let all_r_cols: Vec<usize> = (0..n_r).collect();
        let mut neg_a_r_sel = inc.a_r.select(&kcl_alg, &all_r_cols);
        for i in 0..ka {
            for j in 0..n_r {
                neg_a_r_sel[(i, j)] = -neg_a_r_sel[(i, j)];
            }
        }
        let a_l_sel = inc
            .a_l
            .select(&kcl_alg, &(0..layout.n_l).collect::<Vec<_>>());
        let b_alg = sys
            .matrices
            .b
            .select(&partition.alg_rows, &(0..sys.matrices.b.cols()).collect::<Vec<_>>());

        // Constant blocks of dh/dw over h rows [kcl_alg | cap | vsrc | lam]
        // and w columns [e | j_V | lambda].
        let n_h = partition.alg_rows.len();
        let mut dhdw_const = vec![0.0; n_h * a];
        let col_e = 0;
        let col_jv = layout.n_v;
        let col_lam = layout.n_v + layout.n_vsrc;
        for (hi, &row) in kcl_alg.iter().enumerate() {
            for k in 0..layout.n_vsrc {
                dhdw_const[hi * a + col_jv + k] = -inc.a_v[(row, k)];
            }
            if let Some(al) = &sys.a_lambda {
                for k in 0..layout.n_lambda {
                    dhdw_const[hi * a + col_lam + k] = -al[(row, k)];
                }
            }
        }
        let cap0 = ka;
        for ci in 0..layout.n_c {
            for ej in 0..layout.n_v {
                dhdw_const[(cap0 + ci) * a + col_e + ej] = -inc.a_c[(ej, ci)];
            }
        }
        let vs0 = ka + layout.n_c;
        for k in 0..layout.n_vsrc {
            for ej in 0..layout.n_v {
                dhdw_const[(vs0 + k) * a + col_e + ej] = inc.a_v[(ej, k)];
            }
        }
        let lm0 = ka + layout.n_c + layout.n_vsrc;
        if let Some(al) = &sys.a_lambda {
            for k in 0..layout.n_lambda {
                for ej in 0..layout.n_v {
                    dhdw_const[(lm0 + k) * a + col_e + ej] = al[(ej, k)];
                }
            }
        }

        // Scatter map: the varying resistor block lives at h rows 0..ka,
        // w columns 0..n_v; everything else reads the appended zero row.
        let zero_row = (ka * layout.n_v) as u32;
        let mut embed_idx = vec![zero_row; n_h * a];
        for hi in 0..ka {
            for ej in 0..layout.n_v {
                embed_idx[hi * a + col_e + ej] = (hi * layout.n_v + ej) as u32;
            }
        }

        Ok(SemiExplicitSystem {
            partition: partition.clone(),
            q_fact,
            r_fact,
            square,
            mf: Rc::new(mf),
            diff_idx: Rc::new(partition.diff_rows.iter().map(|&i| i as u32).collect()),
            alg_idx: Rc::new(partition.alg_rows.iter().map(|&i| i as u32).collect()),
            kcl_alg,
            neg_a_r_sel: Rc::new(neg_a_r_sel),
            a_l_sel: Rc::new(a_l_sel),
            b_alg: Rc::new(b_alg),
            dhdw_const,
            embed_idx: Rc::new(embed_idx),
            tr_block: Rc::new(transpose_perm(ka, n_r)),
            tr_back: Rc::new(transpose_perm(layout.n_v, ka)),
            sys,
        })
    }

    pub fn d(&self) -> usize {
        self.sys.layout.d()
    }

    pub fn a(&self) -> usize {
        self.sys.layout.a()
    }

    pub fn n(&self) -> usize {
        self.sys.layout.n()
    }

    /// vdot = R^-1 Q^T of the differential rows of the flow.
    pub fn f_ops(&self, t: &Tape, theta: Option<ValId>, x: ValId, u: ValId) -> ValId {
        let parts = self.sys.rhs_parts_ops(t, theta, x, u);
        self.f_from_parts(t, &parts)
    }

    fn f_from_parts(&self, t: &Tape, parts: &RhsParts) -> ValId {
        let rhs_diff = t.gather(parts.rhs, self.diff_idx.clone());
        t.const_mul(self.mf.clone(), rhs_diff, 1)
    }

    /// Algebraic residual h: the flow at the zero rows of E.
    pub fn h_ops(&self, t: &Tape, theta: Option<ValId>, x: ValId, u: ValId) -> ValId {
        let parts = self.sys.rhs_parts_ops(t, theta, x, u);
        t.gather(parts.rhs, self.alg_idx.clone())
    }

    /// dh/dw as a per-lane flat (a*a) x L value.
    fn dhdw_ops(&self, t: &Tape, theta: Option<ValId>, parts: &RhsParts) -> ValId {
        let layout = self.sys.layout;
        let lanes = t.lanes(parts.rhs);
        let ka = self.kcl_alg.len();
        let n_r = self.sys.incidence.a_r.cols();
        let block = if ka > 0 && n_r > 0 {
            // -A_R[sel] Jg A_R^T, flat [ka*n_v x L]
            let jg = self.sys.relations.jac_g(t, theta, parts.vr);
            let p1 = t.const_mul(self.neg_a_r_sel.clone(), jg, n_r);
            let p1t = t.gather(p1, self.tr_block.clone());
            let p2 = t.const_mul(self.sys.a_r_rc(), p1t, ka);
            t.gather(p2, self.tr_back.clone())
        } else {
            t.zeros(ka * layout.n_v, lanes)
        };
        let pool = t.concat(&[block, t.zeros(1, lanes)]);
        let varying = t.gather(pool, self.embed_idx.clone());
        let base = t.constant(&self.dhdw_const);
        t.add(base, varying)
    }

    /// dh/dv f as tape ops (a Jacobian-vector product; the full dh/dv is
    /// never materialized).
    fn dhdv_mul_ops(&self, t: &Tape, theta: Option<ValId>, parts: &RhsParts, f: ValId) -> ValId {
        let layout = self.sys.layout;
        let lanes = t.lanes(parts.rhs);
        let fq = t.slice(f, 0, layout.n_c);
        let fphi = t.slice(f, layout.n_c, layout.n_l);
        let kcl_part = if !self.kcl_alg.is_empty() && layout.n_l > 0 {
            let jvp_h = self.sys.relations.jvp_grad_h(t, theta, parts.phi, fphi);
            t.const_mul(self.a_l_sel.clone(), jvp_h, 1)
        } else {
            t.zeros(self.kcl_alg.len(), lanes)
        };
        let cap_part = self.sys.relations.jvp_q(t, theta, parts.qc, fq);
        t.concat(&[
            kcl_part,
            cap_part,
            t.zeros(layout.n_vsrc + layout.n_lambda, lanes),
        ])
    }

    /// Build the full reduced field (vdot, wdot) as tape ops. Also exposes
    /// the algebraic residual at the evaluation point and the lanes whose
    /// dh/dw was singular.
    pub fn field_ops(
        &self,
        t: &Tape,
        theta: Option<ValId>,
        x: ValId,
        u: ValId,
        udot: Option<ValId>,
    ) -> Result<FieldBuild> {
        if !self.square {
            return Err(Error::Structural(
                "index reduction requires a square algebraic block".into(),
            ));
        }
        let parts = self.sys.rhs_parts_ops(t, theta, x, u);
        let h = t.gather(parts.rhs, self.alg_idx.clone());
        let f = self.f_from_parts(t, &parts);
        let dhdw = self.dhdw_ops(t, theta, &parts);
        let mut rhs_w = self.dhdv_mul_ops(t, theta, &parts, f);
        if let Some(ud) = udot {
            rhs_w = t.add(rhs_w, t.const_mul(self.b_alg.clone(), ud, 1));
        }
        let (sol, singular) = t.lin_solve(dhdw, rhs_w, self.a());
        let wdot = t.neg(sol);
        Ok(FieldBuild {
            xdot: t.concat(&[f, wdot]),
            h,
            singular,
        })
    }

    fn theta_leaf(&self, t: &Tape, params: &[f64]) -> Option<ValId> {
        if params.is_empty() {
            None
        } else {
            Some(t.leaf(params.len(), 1, params, false))
        }
    }

    /// Plain evaluation of the reduced ODE field at one state.
    pub fn ode_field(&self, params: &[f64], x: &[f64], u: &[f64], time: f64) -> Result<Vec<f64>> {
        let t = Tape::new();
        let theta = self.theta_leaf(&t, params);
        let xid = t.leaf(x.len(), 1, x, false);
        let uid = t.leaf(u.len(), 1, u, false);
        let fb = self.field_ops(&t, theta, xid, uid, None)?;
        if !fb.singular.is_empty() {
            return Err(Error::SingularJacobian {
                index: 0,
                pivot: 0.0,
                context: format!(" of dh/dw at t = {time}"),
            });
        }
        let out = t.value(fb.xdot);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ode_field at t = {time}")));
        }
        Ok(out)
    }

    /// Residual of the algebraic equations at a plain state.
    pub fn h_residual(&self, params: &[f64], x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let t = Tape::new();
        let theta = self.theta_leaf(&t, params);
        let xid = t.leaf(x.len(), 1, x, false);
        let uid = t.leaf(u.len(), 1, u, false);
        let h = self.h_ops(&t, theta, xid, uid);
        Ok(t.value(h))
    }

    fn h_and_jac(
        &self,
        params: &[f64],
        x: &[f64],
        u: &[f64],
    ) -> Result<(Vec<f64>, DenseMatrix)> {
        let t = Tape::new();
        let theta = self.theta_leaf(&t, params);
        let xid = t.leaf(x.len(), 1, x, false);
        let uid = t.leaf(u.len(), 1, u, false);
        let parts = self.sys.rhs_parts_ops(&t, theta, xid, uid);
        let h = t.gather(parts.rhs, self.alg_idx.clone());
        let dhdw = self.dhdw_ops(&t, theta, &parts);
        let a = self.a();
        Ok((t.value(h), DenseMatrix::from_vec(a, a, t.value(dhdw))))
    }

    /// Solve h(v0, w, u(t0), t0) = 0 for the algebraic states by damped
    /// Newton iteration (at most 50 steps, step halving up to 30 times).
    pub fn consistent_init(
        &self,
        params: &[f64],
        v0: &[f64],
        w_guess: &[f64],
        t0: f64,
    ) -> Result<Vec<f64>> {
        let d = self.d();
        let a = self.a();
        if v0.len() != d {
            return Err(Error::dimension(d, v0.len(), "differential state"));
        }
        if w_guess.len() != a {
            return Err(Error::dimension(a, w_guess.len(), "algebraic guess"));
        }
        if !self.square {
            return Err(Error::Structural(
                "consistent initialization requires a square algebraic block".into(),
            ));
        }
        let u = self.sys.sources.eval(t0);
        let mut x = vec![0.0; self.n()];
        x[..d].copy_from_slice(v0);
        x[d..].copy_from_slice(w_guess);

        const TOL: f64 = 1e-10;
        let mut residual = f64::INFINITY;
        for _iter in 0..50 {
            let (h, jac) = self.h_and_jac(params, &x, &u)?;
            residual = numerics::norm_inf(&h);
            if !residual.is_finite() {
                return Err(Error::NonFinite("consistent_init residual".into()));
            }
            if residual <= TOL {
                return Ok(x[d..].to_vec());
            }
            let delta = numerics::lu_solve(&jac, &h)?;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..=30 {
                let mut cand = x.clone();
                for i in 0..a {
                    cand[d + i] = x[d + i] - step * delta[i];
                }
                let hc = self.h_residual(params, &cand, &u)?;
                let rc = numerics::norm_inf(&hc);
                if rc < residual {
                    x = cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence {
                    residual,
                    iterations: _iter + 1,
                });
            }
        }
        Err(Error::NonConvergence {
            residual,
            iterations: 50,
        })
    }

    /// Full consistent state from differential values, zero initial guess.
    pub fn consistent_state(&self, params: &[f64], v0: &[f64], t0: f64) -> Result<Vec<f64>> {
        let w = self.consistent_init(params, v0, &vec![0.0; self.a()], t0)?;
        let mut x = vec![0.0; self.n()];
        x[..self.d()].copy_from_slice(v0);
        x[self.d()..].copy_from_slice(&w);
        Ok(x)
    }
}

/// The reduced ODE as a vector field for the integrator. Owns scratch tape
/// state, so each instance is single-owner; the underlying
/// `SemiExplicitSystem` can be shared.
pub struct ReducedOde {
    pub se: Rc<SemiExplicitSystem>,
    pub params: Vec<f64>,
    /// Zero-order hold on inputs (udot = 0). Kept as a switch so the udot
    /// code path stays exercised.
    pub zoh: bool,
    scratch: Tape,
}

impl ReducedOde {
    pub fn new(se: Rc<SemiExplicitSystem>) -> Self {
        let params = se.sys.params.clone();
        ReducedOde {
            se,
            params,
            zoh: true,
            scratch: Tape::new(),
        }
    }

    pub fn with_params(se: Rc<SemiExplicitSystem>, params: Vec<f64>) -> Self {
        ReducedOde {
            se,
            params,
            zoh: true,
            scratch: Tape::new(),
        }
    }
}

impl VectorField for ReducedOde {
    fn state_dim(&self) -> usize {
        self.se.n()
    }

    fn input_dim(&self) -> usize {
        self.se.sys.input_dim()
    }

    fn eval(&self, x: &[f64], u: &[f64], time: f64) -> Result<Vec<f64>> {
        let t = &self.scratch;
        t.clear();
        let theta = if self.params.is_empty() {
            None
        } else {
            Some(t.leaf(self.params.len(), 1, &self.params, false))
        };
        let xid = t.leaf(x.len(), 1, x, false);
        let uid = t.leaf(u.len(), 1, u, false);
        let udot = if self.zoh {
            None
        } else {
            Some(t.zeros(u.len(), 1)) // piecewise-constant inputs
        };
        let fb = self.se.field_ops(t, theta, xid, uid, udot)?;
        if !fb.singular.is_empty() {
            return Err(Error::SingularJacobian {
                index: 0,
                pivot: 0.0,
                context: format!(" of dh/dw at t = {time}"),
            });
        }
        let out = t.value(fb.xdot);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reduced field at t = {time}")));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{LinearRelations, Signal};
    use crate::systems;
    use crate::topology::{incidence_of, CircuitGraph, ComponentKind, Edge};

    fn fhn_se() -> SemiExplicitSystem {
        let sys = Rc::new(systems::fhn_system().build().unwrap());
        SemiExplicitSystem::new(sys).unwrap()
    }

    #[test]
    fn classify_fhn_partition() {
        let sys = systems::fhn_system().build().unwrap();
        let p = classify(&sys.matrices.e, &sys.layout).unwrap();
        assert_eq!(p.diff_rows, vec![0, 3]);
        assert_eq!(p.alg_rows, vec![1, 2, 4, 5]);
        assert_eq!(p.diff_states, vec![0, 1]);
        assert_eq!(p.alg_states, vec![2, 3, 4, 5]);
    }

    #[test]
    fn classify_dgu_counts() {
        let sys = systems::dgu_system(1.2, 1.8, 2.2).build().unwrap();
        let p = classify(&sys.matrices.e, &sys.layout).unwrap();
        assert_eq!(p.diff_rows.len(), 2);
        assert_eq!(p.alg_rows.len(), 4);
    }

    #[test]
    fn classify_rejects_all_zero_e_with_differential_states() {
        let sys = systems::fhn_system().build().unwrap();
        let zero = DenseMatrix::zeros(sys.n(), sys.n());
        assert!(matches!(
            classify(&zero, &sys.layout),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn fhn_ebar_is_identity_so_f_equals_diff_rows() {
        let se = fhn_se();
        assert_eq!(se.q_fact, DenseMatrix::identity(2));
        assert_eq!(se.r_fact, DenseMatrix::identity(2));
        let x = [0.4, -0.8, 0.3, 0.2, -0.1, 0.5];
        let u = [1.0, -0.7];
        let rhs = se.sys.rhs_at(&x, &u).unwrap();
        let t = Tape::new();
        let xid = t.leaf(6, 1, &x, false);
        let uid = t.leaf(2, 1, &u, false);
        let f = t.value(se.f_ops(&t, None, xid, uid));
        assert!((f[0] - rhs[0]).abs() < 1e-15);
        assert!((f[1] - rhs[3]).abs() < 1e-15);
    }

    #[test]
    fn consistent_state_zeroes_h() {
        let se = fhn_se();
        let x0 = se.consistent_state(&[], &[0.5, -0.25], 0.0).unwrap();
        let u = se.sys.sources.eval(0.0);
        let h = se.h_residual(&[], &x0, &u).unwrap();
        assert!(numerics::norm_inf(&h) <= 1e-10);
    }

    #[test]
    fn consistent_init_affine_case_converges_in_one_step() {
        // FHN h is affine in w for fixed v, so Newton lands exactly.
        let se = fhn_se();
        let v0 = [1.3, 2.0];
        let w = se.consistent_init(&[], &v0, &[0.0; 4], 0.0).unwrap();
        let mut x = vec![v0[0], v0[1]];
        x.extend_from_slice(&w);
        let u = se.sys.sources.eval(0.0);
        let h = se.h_residual(&[], &x, &u).unwrap();
        assert!(numerics::norm_inf(&h) <= 1e-12);
    }

    #[test]
    fn consistent_init_trivial_zero() {
        // no sources, relations vanish at zero -> w0 = 0
        let g = CircuitGraph::new(
            2,
            vec![
                Edge { id: 0, kind: ComponentKind::Capacitor, from: 1, to: 0 },
                Edge { id: 0, kind: ComponentKind::Resistor, from: 1, to: 0 },
            ],
        );
        let inc = incidence_of(&g).unwrap();
        let rel = Rc::new(LinearRelations::new(vec![1.0], vec![1.0], vec![]).unwrap());
        let sys = Rc::new(
            PHDAESystem::new(inc, rel, Signal::Constant(vec![]), vec![]).unwrap(),
        );
        let se = SemiExplicitSystem::new(sys).unwrap();
        let w = se.consistent_init(&[], &[0.0], &[0.5], 0.0).unwrap();
        assert!(w[0].abs() <= 1e-10);
    }

    #[test]
    fn scalar_toy_index_reduction() {
        // capacitor + unit resistor to ground: f = -v, h = q - e,
        // so wdot = -v on the constraint manifold.
        let g = CircuitGraph::new(
            2,
            vec![
                Edge { id: 0, kind: ComponentKind::Capacitor, from: 1, to: 0 },
                Edge { id: 0, kind: ComponentKind::Resistor, from: 1, to: 0 },
            ],
        );
        let inc = incidence_of(&g).unwrap();
        let rel = Rc::new(LinearRelations::new(vec![1.0], vec![1.0], vec![]).unwrap());
        let sys = Rc::new(
            PHDAESystem::new(inc, rel, Signal::Constant(vec![]), vec![]).unwrap(),
        );
        let se = SemiExplicitSystem::new(sys).unwrap();
        let xdot = se.ode_field(&[], &[1.0, 1.0], &[], 0.0).unwrap();
        assert!((xdot[0] + 1.0).abs() < 1e-14);
        assert!((xdot[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn least_squares_f_for_floating_capacitor() {
        // C between two grounded-resistor nodes: two differential rows, one
        // differential state. f must match the hand-eliminated ODE on the
        // consistent manifold, and the QR residual is orthogonal to Ebar.
        let g = CircuitGraph::new(
            3,
            vec![
                Edge { id: 0, kind: ComponentKind::Capacitor, from: 1, to: 2 },
                Edge { id: 0, kind: ComponentKind::Resistor, from: 1, to: 0 },
                Edge { id: 1, kind: ComponentKind::Resistor, from: 2, to: 0 },
            ],
        );
        let inc = incidence_of(&g).unwrap();
        let rel = Rc::new(LinearRelations::new(vec![1.0, 1.0], vec![1.0], vec![]).unwrap());
        let sys = Rc::new(
            PHDAESystem::new(inc, rel, Signal::Constant(vec![]), vec![]).unwrap(),
        );
        let se = SemiExplicitSystem::new(sys.clone()).unwrap();
        assert!(!se.square);
        // classify rejects the non-square block
        assert!(classify(&sys.matrices.e, &sys.layout).is_err());

        // consistent manifold: e1 = q/2, e2 = -q/2 (R1 = R2 = C = 1)
        let q = 0.8;
        let x = [q, q / 2.0, -q / 2.0];
        let t = Tape::new();
        let xid = t.leaf(3, 1, &x, false);
        let uid = t.leaf(0, 1, &[], false);
        let f = t.value(se.f_ops(&t, None, xid, uid));
        // hand elimination: qdot = -e1 / R1 = -q/2
        assert!((f[0] + q / 2.0).abs() < 1e-14);

        // residual orthogonality at a generic (inconsistent) state
        let x2 = [0.3, 0.9, -0.1];
        let rhs = se.sys.rhs_at(&x2, &[]).unwrap();
        let t2 = Tape::new();
        let xid2 = t2.leaf(3, 1, &x2, false);
        let uid2 = t2.leaf(0, 1, &[], false);
        let f2 = t2.value(se.f_ops(&t2, None, xid2, uid2));
        // Ebar = [1; -1]; residual (rhs_diff - Ebar f) must be orthogonal
        let r0 = rhs[0] - f2[0];
        let r1 = rhs[1] + f2[0];
        assert!((r0 - r1).abs() < 1e-13); // dot with [1, -1] is r0 - r1
    }

    #[test]
    fn ode_field_errors_on_structural_defect() {
        let g = CircuitGraph::new(
            3,
            vec![
                Edge { id: 0, kind: ComponentKind::Capacitor, from: 1, to: 2 },
                Edge { id: 0, kind: ComponentKind::Resistor, from: 1, to: 0 },
                Edge { id: 1, kind: ComponentKind::Resistor, from: 2, to: 0 },
            ],
        );
        let inc = incidence_of(&g).unwrap();
        let rel = Rc::new(LinearRelations::new(vec![1.0, 1.0], vec![1.0], vec![]).unwrap());
        let sys = Rc::new(
            PHDAESystem::new(inc, rel, Signal::Constant(vec![]), vec![]).unwrap(),
        );
        let se = SemiExplicitSystem::new(sys).unwrap();
        assert!(matches!(
            se.ode_field(&[], &[0.1, 0.0, 0.0], &[], 0.0),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn udot_term_is_zero_under_zero_order_hold() {
        let se = Rc::new(fhn_se());
        let x0 = se.consistent_state(&[], &[0.4, 0.1], 0.0).unwrap();
        let u = se.sys.sources.eval(0.0);
        let mut with_zoh = ReducedOde::new(se.clone());
        with_zoh.zoh = true;
        let f1 = with_zoh.eval(&x0, &u, 0.0).unwrap();
        let mut without = ReducedOde::new(se.clone());
        without.zoh = false;
        let f2 = without.eval(&x0, &u, 0.0).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn dims_always_consistent() {
        for spec in [
            systems::fhn_system(),
            systems::dgu_system(1.2, 1.8, 2.2),
        ] {
            let sys = Rc::new(spec.build().unwrap());
            let se = SemiExplicitSystem::new(sys).unwrap();
            assert_eq!(se.d() + se.a(), se.n());
            let x0 = se.consistent_state(&se.sys.params.clone(), &vec![0.1; se.d()], 0.0).unwrap();
            let u = se.sys.sources.eval(0.0);
            let h = se.h_residual(&se.sys.params.clone(), &x0, &u).unwrap();
            assert_eq!(h.len(), se.a());
            let field = se.ode_field(&se.sys.params.clone(), &x0, &u, 0.0).unwrap();
            assert_eq!(field.len(), se.n());
        }
    }
}
