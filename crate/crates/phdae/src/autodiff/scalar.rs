//! Generic scalar algebra for writing functions once and evaluating them
//! with plain numbers, forward-mode dual numbers, reverse-mode tape
//! variables, or dual numbers over tape variables (forward-over-reverse).

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{Tape, ValId};

/// Differentiable scalar algebra: +, -, *, /, integer powers, exp, tanh,
/// relu. Constants are minted from an existing value so tape-backed scalars
/// can reach their tape.
pub trait DiffScalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// A constant in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    /// The underlying primal value.
    fn primal(&self) -> f64;
    fn scale(self, c: f64) -> Self;
    fn add_const(self, c: f64) -> Self;
    fn powi(self, n: i32) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    /// relu with the convention relu'(0) = 0.
    fn relu(self) -> Self;
}

impl DiffScalar for f64 {
    fn lift(&self, c: f64) -> f64 {
        c
    }
    fn primal(&self) -> f64 {
        *self
    }
    fn scale(self, c: f64) -> f64 {
        self * c
    }
    fn add_const(self, c: f64) -> f64 {
        self + c
    }
    fn powi(self, n: i32) -> f64 {
        f64::powi(self, n)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn relu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
}

/// Forward-mode dual number over any differentiable scalar, enabling nested
/// derivatives such as gradients of expressions that already contain
/// gradients.
#[derive(Debug, Clone, Copy)]
pub struct Dual<S> {
    pub re: S,
    pub du: S,
}

impl<S: DiffScalar> Dual<S> {
    pub fn new(re: S, du: S) -> Self {
        Dual { re, du }
    }

    pub fn constant(like: &S, c: f64) -> Self {
        Dual {
            re: like.lift(c),
            du: like.lift(0.0),
        }
    }

    /// Variable seeded with tangent 1.
    pub fn seeded(re: S) -> Self {
        let one = re.lift(1.0);
        Dual { re, du: one }
    }

    /// Variable with tangent 0.
    pub fn unseeded(re: S) -> Self {
        let zero = re.lift(0.0);
        Dual { re, du: zero }
    }
}

impl<S: DiffScalar> Add for Dual<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl<S: DiffScalar> Sub for Dual<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl<S: DiffScalar> Mul for Dual<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Dual::new(self.re * rhs.re, self.re * rhs.du + self.du * rhs.re)
    }
}

impl<S: DiffScalar> Div for Dual<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re;
        Dual::new(q, (self.du - q * rhs.du) / rhs.re)
    }
}

impl<S: DiffScalar> Neg for Dual<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.du)
    }
}

impl<S: DiffScalar> DiffScalar for Dual<S> {
    fn lift(&self, c: f64) -> Self {
        Dual::constant(&self.re, c)
    }
    fn primal(&self) -> f64 {
        self.re.primal()
    }
    fn scale(self, c: f64) -> Self {
        Dual::new(self.re.scale(c), self.du.scale(c))
    }
    fn add_const(self, c: f64) -> Self {
        Dual::new(self.re.add_const(c), self.du)
    }
    fn powi(self, n: i32) -> Self {
        let v = self.re.powi(n);
        let d = self.re.powi(n - 1).scale(n as f64);
        Dual::new(v, d * self.du)
    }
    fn exp(self) -> Self {
        let v = self.re.exp();
        Dual::new(v, v * self.du)
    }
    fn tanh(self) -> Self {
        let y = self.re.tanh();
        let one_minus = (-(y * y)).add_const(1.0);
        Dual::new(y, one_minus * self.du)
    }
    fn relu(self) -> Self {
        if self.re.primal() > 0.0 {
            self
        } else {
            Dual::constant(&self.re, 0.0)
        }
    }
}

/// Reverse-mode scalar: a 1x1 tape value.
#[derive(Clone, Copy)]
pub struct TVar<'t> {
    pub tape: &'t Tape,
    pub id: ValId,
}

impl<'t> TVar<'t> {
    pub fn variable(tape: &'t Tape, v: f64) -> Self {
        TVar {
            tape,
            id: tape.scalar_var(v),
        }
    }

    pub fn constant(tape: &'t Tape, v: f64) -> Self {
        TVar {
            tape,
            id: tape.scalar(v),
        }
    }
}

impl<'t> Add for TVar<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.add(self.id, rhs.id),
        }
    }
}

impl<'t> Sub for TVar<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.sub(self.id, rhs.id),
        }
    }
}

impl<'t> Mul for TVar<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.mul(self.id, rhs.id),
        }
    }
}

impl<'t> Div for TVar<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.div(self.id, rhs.id),
        }
    }
}

impl<'t> Neg for TVar<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.neg(self.id),
        }
    }
}

impl<'t> DiffScalar for TVar<'t> {
    fn lift(&self, c: f64) -> Self {
        TVar::constant(self.tape, c)
    }
    fn primal(&self) -> f64 {
        self.tape.value_scalar(self.id)
    }
    fn scale(self, c: f64) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.scale(self.id, c),
        }
    }
    fn add_const(self, c: f64) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.add_c(self.id, c),
        }
    }
    fn powi(self, n: i32) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.powi(self.id, n),
        }
    }
    fn exp(self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.exp(self.id),
        }
    }
    fn tanh(self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.tanh(self.id),
        }
    }
    fn relu(self) -> Self {
        TVar {
            tape: self.tape,
            id: self.tape.relu(self.id),
        }
    }
}

/// Constant-matrix times generic vector.
pub fn matvec_s<S: DiffScalar>(m: &crate::numerics::DenseMatrix, x: &[S]) -> Vec<S> {
    assert_eq!(x.len(), m.cols());
    assert!(!x.is_empty() || m.rows() == 0, "matvec_s needs a context element");
    (0..m.rows())
        .map(|i| {
            let mut acc = x[0].lift(0.0);
            for (j, xv) in x.iter().enumerate() {
                let c = m[(i, j)];
                if c != 0.0 {
                    acc = acc + xv.scale(c);
                }
            }
            acc
        })
        .collect()
}
