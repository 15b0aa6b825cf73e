//! Dense linear algebra for the reduction pipeline: Householder reduced QR,
//! least squares, and LU with partial pivoting.
//!
//! Everything here is deterministic: identical inputs produce bitwise
//! identical outputs.

use crate::error::{Error, Result};

/// Relative threshold under which an R diagonal is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;
/// Relative threshold under which an LU pivot is treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        DenseMatrix {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(x: &[f64]) -> Self {
        DenseMatrix {
            rows: x.len(),
            cols: 1,
            data: x.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for (a, b) in self.row(i).iter().zip(x) {
                acc += a * b;
            }
            y[i] = acc;
        }
        y
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// Frobenius norm.
    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Extract a submatrix given row and column index lists.
    pub fn select(&self, row_idx: &[usize], col_idx: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(row_idx.len(), col_idx.len());
        for (i, &r) in row_idx.iter().enumerate() {
            for (j, &c) in col_idx.iter().enumerate() {
                out[(i, j)] = self[(r, c)];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Reduced QR factorization via Householder reflections.
///
/// For `A` of shape p x d with p >= d >= 1 and full column rank, returns `Q`
/// (p x d, orthonormal columns) and `R` (d x d, upper triangular) with the
/// sign convention that the diagonal of `R` is positive.
pub fn reduced_qr(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let (p, d) = (a.rows(), a.cols());
    if p < d || d == 0 {
        return Err(Error::dimension(d, p, "reduced_qr requires p >= d >= 1"));
    }
    let threshold = RANK_TOL * a.norm_fro();

    let mut r_full = a.clone(); // upper part becomes R, lower part is scratch
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(d); // Householder vectors
    let mut betas = vec![0.0; d];

    for k in 0..d {
        let mut sigma = 0.0;
        for i in k..p {
            sigma += r_full[(i, k)] * r_full[(i, k)];
        }
        let alpha = sigma.sqrt();
        if alpha <= threshold {
            return Err(Error::RankDeficient {
                index: k,
                diag: alpha,
                threshold,
            });
        }
        let a_kk = r_full[(k, k)];
        let r_kk = if a_kk >= 0.0 { -alpha } else { alpha };
        let mut v = vec![0.0; p - k];
        v[0] = a_kk - r_kk;
        for i in (k + 1)..p {
            v[i - k] = r_full[(i, k)];
        }
        let beta = -1.0 / (r_kk * v[0]);
        // Update trailing columns: A <- (I - beta v v^T) A.
        for j in k..d {
            let mut dot = 0.0;
            for i in k..p {
                dot += v[i - k] * r_full[(i, j)];
            }
            let s = beta * dot;
            for i in k..p {
                r_full[(i, j)] -= s * v[i - k];
            }
        }
        r_full[(k, k)] = r_kk;
        vs.push(v);
        betas[k] = beta;
    }

    // Form Q = H_0 ... H_{d-1} applied to the first d columns of I.
    let mut q = DenseMatrix::zeros(p, d);
    for j in 0..d {
        q[(j, j)] = 1.0;
    }
    for k in (0..d).rev() {
        let v = &vs[k];
        let beta = betas[k];
        for j in 0..d {
            let mut dot = 0.0;
            for i in k..p {
                dot += v[i - k] * q[(i, j)];
            }
            let s = beta * dot;
            for i in k..p {
                q[(i, j)] -= s * v[i - k];
            }
        }
    }

    // Normalize so diag(R) > 0.
    let mut r = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            r[(i, j)] = r_full[(i, j)];
        }
    }
    for i in 0..d {
        if r[(i, i)] < 0.0 {
            for j in i..d {
                r[(i, j)] = -r[(i, j)];
            }
            for row in 0..p {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    Ok((q, r))
}

/// Solve the least squares problem min ||A x - b||_2 through the reduced QR of A.
pub fn lstsq(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::dimension(a.rows(), b.len(), "lstsq rhs length"));
    }
    let (q, r) = reduced_qr(a)?;
    let qtb = q.transpose().matvec(b);
    Ok(solve_upper_triangular(&r, &qtb))
}

/// Back substitution for an upper-triangular system R x = y.
pub fn solve_upper_triangular(r: &DenseMatrix, y: &[f64]) -> Vec<f64> {
    let d = r.cols();
    assert_eq!(r.rows(), d);
    assert_eq!(y.len(), d);
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut acc = y[i];
        for j in (i + 1)..d {
            acc -= r[(i, j)] * x[j];
        }
        x[i] = acc / r[(i, i)];
    }
    x
}

/// LU factorization with partial pivoting of a square matrix.
#[derive(Debug, Clone)]
pub struct LuFactors {
    /// Combined L (unit lower, below diagonal) and U (on and above diagonal).
    lu: DenseMatrix,
    /// Row permutation: `perm[i]` is the original row stored at position i.
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &DenseMatrix) -> Result<LuFactors> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::dimension(n, a.cols(), "lu_solve requires square A"));
        }
        let tol = PIVOT_TOL * a.max_abs();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..n {
            // Partial pivoting: largest magnitude in column k at or below row k.
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in (k + 1)..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tol || !best.is_finite() {
                return Err(Error::SingularJacobian {
                    index: k,
                    pivot: lu[(p, k)],
                    context: String::new(),
                });
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
                perm.swap(k, p);
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                for j in (k + 1)..n {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= factor * u;
                }
            }
        }
        Ok(LuFactors { lu, perm })
    }

    pub fn n(&self) -> usize {
        self.lu.rows()
    }

    /// Solve A x = b using the stored factors.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(b.len(), n);
        // Forward substitution with permuted rhs.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[self.perm[i]];
            for j in 0..i {
                acc -= self.lu[(i, j)] * y[j];
            }
            y[i] = acc;
        }
        // Back substitution.
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in (i + 1)..n {
                acc -= self.lu[(i, j)] * x[j];
            }
            x[i] = acc / self.lu[(i, i)];
        }
        x
    }

    /// Solve A^T x = b using the stored factors of A.
    ///
    /// With P A = L U we have A^T = U^T L^T P, so solve U^T z = b,
    /// L^T w = z, then undo the permutation.
    pub fn solve_transposed(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(b.len(), n);
        // U^T is lower triangular: forward substitution.
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.lu[(j, i)] * z[j];
            }
            z[i] = acc / self.lu[(i, i)];
        }
        // L^T is unit upper triangular: back substitution.
        let mut w = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = z[i];
            for j in (i + 1)..n {
                acc -= self.lu[(j, i)] * w[j];
            }
            w[i] = acc;
        }
        // x[perm[i]] = w[i].
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = w[i];
        }
        x
    }

    /// Cheap conditioning diagnostic: ratio of largest to smallest |U_ii|.
    pub fn diag_ratio(&self) -> f64 {
        let n = self.n();
        let mut max = 0.0_f64;
        let mut min = f64::INFINITY;
        for i in 0..n {
            let d = self.lu[(i, i)].abs();
            max = max.max(d);
            min = min.min(d);
        }
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Solve A x = b with partial-pivoting LU.
pub fn lu_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let factors = LuFactors::factor(a)?;
    Ok(factors.solve(b))
}

/// Max norm of a vector.
pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Euclidean norm of a vector.
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {b}, got {a} (diff {})",
            (a - b).abs()
        );
    }

    #[test]
    fn qr_identity() {
        let a = DenseMatrix::identity(2);
        let (q, r) = reduced_qr(&a).unwrap();
        assert_eq!(q, DenseMatrix::identity(2));
        assert_eq!(r, DenseMatrix::identity(2));
    }

    #[test]
    fn qr_column_of_ones() {
        let a = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]);
        let (q, r) = reduced_qr(&a).unwrap();
        let s = 1.0 / 2.0_f64.sqrt();
        assert_close(q[(0, 0)], s, 1e-15);
        assert_close(q[(1, 0)], s, 1e-15);
        assert_close(r[(0, 0)], 2.0_f64.sqrt(), 1e-15);
    }

    #[test]
    fn qr_reconstruction_and_orthogonality() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..20 {
            let p = rng.gen_range(2..10);
            let d = rng.gen_range(1..=p);
            let a = DenseMatrix::from_vec(
                p,
                d,
                (0..p * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            if reduced_qr(&a).is_err() {
                continue; // rare near-singular draw
            }
            let (q, r) = reduced_qr(&a).unwrap();
            let qr = q.matmul(&r);
            let mut diff = 0.0;
            for i in 0..p {
                for j in 0..d {
                    diff += (qr[(i, j)] - a[(i, j)]).powi(2);
                }
            }
            assert!(diff.sqrt() <= 1e-12 * a.norm_fro().max(1.0));
            let qtq = q.transpose().matmul(&q);
            let mut orth = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let target = if i == j { 1.0 } else { 0.0 };
                    orth += (qtq[(i, j)] - target).powi(2);
                }
            }
            assert!(orth.sqrt() <= 1e-12);
            for i in 0..d {
                assert!(r[(i, i)] > 0.0, "R diagonal must be positive");
            }
        }
    }

    #[test]
    fn qr_rank_deficient_errors() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        match reduced_qr(&a) {
            Err(Error::RankDeficient { .. }) => {}
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn lstsq_overdetermined() {
        let a = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]);
        let x = lstsq(&a, &[1.0, 3.0]).unwrap();
        assert_close(x[0], 2.0, 1e-14);
        // Residual orthogonal to the column of A.
        let res: Vec<f64> = vec![1.0 - x[0], 3.0 - x[0]];
        assert_close(res[0] + res[1], 0.0, 1e-12);
    }

    #[test]
    fn lstsq_square_exact_and_zero_rhs() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let x = lstsq(&a, &[5.0, 10.0]).unwrap();
        let ax = a.matvec(&x);
        assert_close(ax[0], 5.0, 1e-12);
        assert_close(ax[1], 10.0, 1e-12);
        let zero = lstsq(&a, &[0.0, 0.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn lu_diagonal() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let x = lu_solve(&a, &[2.0, 8.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn lu_requires_pivoting() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let x = lu_solve(&a, &[3.0, 5.0]).unwrap();
        assert_eq!(x, vec![5.0, 3.0]);
    }

    #[test]
    fn lu_singular_errors() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        match lu_solve(&a, &[1.0, 1.0]) {
            Err(Error::SingularJacobian { .. }) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn lu_transposed_solve() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![3.0, 1.0, 0.0], vec![1.0, 0.0, 2.0]]);
        let b = [1.0, -2.0, 0.5];
        let f = LuFactors::factor(&a).unwrap();
        let x = f.solve_transposed(&b);
        let atx = a.transpose().matvec(&x);
        for i in 0..3 {
            assert_close(atx[i], b[i], 1e-12);
        }
    }

    #[test]
    fn qr_lstsq_matches_lu_on_random_square() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..8);
            let mut a = DenseMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = rng.gen_range(-1.0..1.0);
                }
                a[(i, i)] += 3.0; // keep well conditioned
            }
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x_qr = lstsq(&a, &b).unwrap();
            let x_lu = lu_solve(&a, &b).unwrap();
            for i in 0..n {
                let scale = x_lu[i].abs().max(1.0);
                assert!((x_qr[i] - x_lu[i]).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn residual_bound_on_lu() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 6;
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = lu_solve(&a, &b).unwrap();
        let ax = a.matvec(&x);
        let res: f64 = norm_inf(&ax.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>());
        assert!(res <= 1e-10 * (a.max_abs() * norm_inf(&x) + norm_inf(&b)));
    }
}
