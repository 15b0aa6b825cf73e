//! Automatic differentiation: a lane-batched reverse-mode tape, forward-mode
//! dual numbers, and their combination for the nested derivatives the index
//! reduction and training paths need.
//!
//! Strategy: reverse mode over the tape for parameter gradients, forward
//! mode for the small state-space Jacobians, and forward-mode arithmetic on
//! tape-recorded values where one appears inside the other.

pub mod scalar;
pub mod tape;

pub use scalar::{matvec_s, DiffScalar, Dual, TVar};
pub use tape::{Tape, ValId};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// A function of inputs and (optionally) parameters expressed over the
/// generic scalar algebra, so it can be evaluated in any derivative mode.
pub trait DiffFunction {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn param_dim(&self) -> usize {
        0
    }
    fn eval<S: DiffScalar>(&self, params: &[S], x: &[S]) -> Vec<S>;
}

fn check_dims(f: &impl DiffFunction, params: &[f64], x: &[f64]) -> Result<()> {
    if x.len() != f.in_dim() {
        return Err(Error::dimension(f.in_dim(), x.len(), "input"));
    }
    if params.len() != f.param_dim() {
        return Err(Error::dimension(f.param_dim(), params.len(), "params"));
    }
    Ok(())
}

/// Gradient of a scalar-valued function with respect to `x` (reverse mode).
pub fn gradient(f: &impl DiffFunction, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_dims(f, params, x)?;
    if f.out_dim() != 1 {
        return Err(Error::dimension(1, f.out_dim(), "gradient output"));
    }
    let tape = Tape::new();
    let xs: Vec<TVar> = x.iter().map(|&v| TVar::variable(&tape, v)).collect();
    let ps: Vec<TVar> = params.iter().map(|&v| TVar::constant(&tape, v)).collect();
    let out = f.eval(&ps, &xs);
    let y = out[0];
    if !y.primal().is_finite() {
        return Err(Error::NonFinite("gradient forward pass".into()));
    }
    tape.backward(y.id);
    let g: Vec<f64> = xs.iter().map(|v| tape.grad(v.id)[0]).collect();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient reverse pass".into()));
    }
    Ok(g)
}

/// Jacobian by forward mode, one column per input.
pub fn jacobian_forward(f: &impl DiffFunction, params: &[f64], x: &[f64]) -> Result<DenseMatrix> {
    check_dims(f, params, x)?;
    let (m, k) = (f.out_dim(), f.in_dim());
    let mut jac = DenseMatrix::zeros(m, k);
    let ps: Vec<Dual<f64>> = params.iter().map(|&v| Dual::unseeded(v)).collect();
    for j in 0..k {
        let xs: Vec<Dual<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if i == j {
                    Dual::seeded(v)
                } else {
                    Dual::unseeded(v)
                }
            })
            .collect();
        let out = f.eval(&ps, &xs);
        for (i, o) in out.iter().enumerate() {
            if !o.du.is_finite() {
                return Err(Error::NonFinite("jacobian forward pass".into()));
            }
            jac[(i, j)] = o.du;
        }
    }
    Ok(jac)
}

/// Jacobian by reverse mode, one row per output.
pub fn jacobian_reverse(f: &impl DiffFunction, params: &[f64], x: &[f64]) -> Result<DenseMatrix> {
    check_dims(f, params, x)?;
    let (m, k) = (f.out_dim(), f.in_dim());
    let tape = Tape::new();
    let xs: Vec<TVar> = x.iter().map(|&v| TVar::variable(&tape, v)).collect();
    let ps: Vec<TVar> = params.iter().map(|&v| TVar::constant(&tape, v)).collect();
    let out = f.eval(&ps, &xs);
    let mut jac = DenseMatrix::zeros(m, k);
    for (i, o) in out.iter().enumerate() {
        tape.backward(o.id);
        for (j, v) in xs.iter().enumerate() {
            jac[(i, j)] = tape.grad(v.id)[0];
        }
    }
    if !jac.is_finite() {
        return Err(Error::NonFinite("jacobian reverse pass".into()));
    }
    Ok(jac)
}

/// Forward-mode Jacobian (the default mode for small state Jacobians).
pub fn jacobian(f: &impl DiffFunction, params: &[f64], x: &[f64]) -> Result<DenseMatrix> {
    jacobian_forward(f, params, x)
}

/// Gradient of a scalar-valued function with respect to its parameters.
///
/// The function body may contain inner forward-mode derivatives (built with
/// [`Dual`] over the generic scalar), which is how second-order expressions
/// such as gradients of learned Hamiltonians are differentiated again.
pub fn nested_gradient(f: &impl DiffFunction, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_dims(f, params, x)?;
    if f.out_dim() != 1 {
        return Err(Error::dimension(1, f.out_dim(), "nested_gradient output"));
    }
    let tape = Tape::new();
    let ps: Vec<TVar> = params.iter().map(|&v| TVar::variable(&tape, v)).collect();
    let xs: Vec<TVar> = x.iter().map(|&v| TVar::constant(&tape, v)).collect();
    let out = f.eval(&ps, &xs);
    let y = out[0];
    if !y.primal().is_finite() {
        return Err(Error::NonFinite("nested_gradient forward pass".into()));
    }
    tape.backward(y.id);
    let g: Vec<f64> = ps.iter().map(|v| tape.grad(v.id)[0]).collect();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("nested_gradient reverse pass".into()));
    }
    Ok(g)
}

/// Central finite differences of a scalar function, for test oracles.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Max absolute deviation relative to the magnitude of the reference vector.
pub fn relative_error(approx: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(approx.len(), reference.len());
    let scale = reference
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    approx
        .iter()
        .zip(reference)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl DiffFunction for Square {
        fn in_dim(&self) -> usize {
            1
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn eval<S: DiffScalar>(&self, _p: &[S], x: &[S]) -> Vec<S> {
            vec![x[0] * x[0]]
        }
    }

    #[test]
    fn gradient_of_square() {
        let g = gradient(&Square, &[], &[3.0]).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    /// Magnetic-flux energy phi^2 / (2 L) with L = 12.5.
    struct FluxEnergy;
    impl DiffFunction for FluxEnergy {
        fn in_dim(&self) -> usize {
            1
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn eval<S: DiffScalar>(&self, _p: &[S], x: &[S]) -> Vec<S> {
            vec![(x[0] * x[0]).scale(1.0 / (2.0 * 12.5))]
        }
    }

    #[test]
    fn gradient_of_flux_energy() {
        let g = gradient(&FluxEnergy, &[], &[2.0]).unwrap();
        assert!((g[0] - 0.16).abs() < 1e-15);
    }

    struct ReluFn;
    impl DiffFunction for ReluFn {
        fn in_dim(&self) -> usize {
            1
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn eval<S: DiffScalar>(&self, _p: &[S], x: &[S]) -> Vec<S> {
            vec![x[0].relu()]
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let g = gradient(&ReluFn, &[], &[0.0]).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    struct LinearMap(DenseMatrix);
    impl DiffFunction for LinearMap {
        fn in_dim(&self) -> usize {
            self.0.cols()
        }
        fn out_dim(&self) -> usize {
            self.0.rows()
        }
        fn eval<S: DiffScalar>(&self, _p: &[S], x: &[S]) -> Vec<S> {
            matvec_s(&self.0, x)
        }
    }

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        let m = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![0.0, 1.0]]);
        let f = LinearMap(m.clone());
        let j = jacobian(&f, &[], &[0.3, -0.7]).unwrap();
        assert_eq!(j, m);
    }

    struct DiffPair;
    impl DiffFunction for DiffPair {
        fn in_dim(&self) -> usize {
            2
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn eval<S: DiffScalar>(&self, _p: &[S], x: &[S]) -> Vec<S> {
            vec![x[1] - x[0]]
        }
    }

    #[test]
    fn jacobian_of_difference() {
        let j = jacobian(&DiffPair, &[], &[1.0, 2.0]).unwrap();
        assert_eq!(j[(0, 0)], -1.0);
        assert_eq!(j[(0, 1)], 1.0);
    }

    struct Trig;
    impl DiffFunction for Trig {
        fn in_dim(&self) -> usize {
            2
        }
        fn out_dim(&self) -> usize {
            2
        }
        fn eval<S: DiffScalar>(&self, _p: &[S], x: &[S]) -> Vec<S> {
            let a = (x[0] * x[1]).tanh();
            let b = x[0].exp() * x[1].powi(3);
            vec![a + b, a * b]
        }
    }

    #[test]
    fn forward_and_reverse_jacobians_agree() {
        let x = [0.37, -0.81];
        let jf = jacobian_forward(&Trig, &[], &x).unwrap();
        let jr = jacobian_reverse(&Trig, &[], &x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (jf[(i, j)] - jr[(i, j)]).abs() <= 1e-12,
                    "modes disagree at ({i},{j})"
                );
            }
        }
    }

    /// d/dx (df/dy) of f = x*y is 1: a minimal nested derivative.
    struct CrossDeriv;
    impl DiffFunction for CrossDeriv {
        fn in_dim(&self) -> usize {
            1
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn eval<S: DiffScalar>(&self, p: &[S], x: &[S]) -> Vec<S> {
            // inner: df/dy at y = x[0] for f(p, y) = p*y, via forward mode
            let y = Dual::seeded(x[0]);
            let pp = Dual::unseeded(p[0]);
            let f = pp * y;
            vec![f.du]
        }
    }

    #[test]
    fn nested_cross_derivative() {
        let g = nested_gradient(&CrossDeriv, &[2.5], &[4.0]).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    /// H(x) = theta * x^2; loss = (dH/dx(3) - 1)^2. dloss/dtheta at theta=1
    /// is 2*(6*theta-1)*6 = 60.
    struct NestedLoss;
    impl DiffFunction for NestedLoss {
        fn in_dim(&self) -> usize {
            1
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn eval<S: DiffScalar>(&self, p: &[S], x: &[S]) -> Vec<S> {
            let xx = Dual::seeded(x[0]);
            let th = Dual::unseeded(p[0]);
            let grad_h = (th * xx * xx).du;
            let resid = grad_h.add_const(-1.0);
            vec![resid * resid]
        }
    }

    #[test]
    fn nested_gradient_matches_hand_algebra() {
        let g = nested_gradient(&NestedLoss, &[1.0], &[3.0]).unwrap();
        assert!((g[0] - 60.0).abs() < 1e-12);
    }

    struct TanhNet {
        hidden: usize,
    }
    impl DiffFunction for TanhNet {
        fn in_dim(&self) -> usize {
            2
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            self.hidden * 2 + self.hidden + self.hidden + 1
        }
        fn eval<S: DiffScalar>(&self, p: &[S], x: &[S]) -> Vec<S> {
            // one hidden tanh layer, scalar output: ||h(x)||^2 style loss
            let h = self.hidden;
            let mut acc = x[0].lift(0.0);
            for i in 0..h {
                let pre = p[i * 2] * x[0] + p[i * 2 + 1] * x[1] + p[2 * h + i];
                acc = acc + p[3 * h + i] * pre.tanh();
            }
            let out = acc + p[4 * h];
            vec![out * out]
        }
    }

    #[test]
    fn tanh_net_parameter_gradient_matches_finite_differences() {
        let f = TanhNet { hidden: 4 };
        let params: Vec<f64> = (0..f.param_dim())
            .map(|i| 0.3 * ((i as f64) * 0.7).sin())
            .collect();
        let x = [0.5, -1.2];
        let ad = nested_gradient(&f, &params, &x).unwrap();
        let fd = finite_diff_gradient(
            |p| f.eval::<f64>(p, &x)[0],
            &params,
            1e-5,
        );
        assert!(
            relative_error(&ad, &fd) <= 1e-7,
            "rel err {}",
            relative_error(&ad, &fd)
        );
    }

    struct AffineComb;
    impl DiffFunction for AffineComb {
        fn in_dim(&self) -> usize {
            3
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn eval<S: DiffScalar>(&self, _p: &[S], x: &[S]) -> Vec<S> {
            vec![x[0].scale(2.0) + x[1].scale(-3.0) + x[2].lift(5.0)]
        }
    }

    #[test]
    fn gradient_linearity_and_constants() {
        let g = gradient(&AffineComb, &[], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(g, vec![2.0, -3.0, 0.0]);
    }
}
