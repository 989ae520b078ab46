//! Small dense linear algebra: just enough for block-structured systems of a
//! few agents with two or three states each.
//!
//! Everything here is O(n³) or worse and allocates freely. The largest
//! matrices built during a simulation are ℓn×ℓn (8×8 for the built-in
//! scenarios) and the Lyapunov solve works on an n²×n² system per leader
//! block.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{Error, Result};

/// Relative pivot threshold for Gaussian elimination.
pub const PIVOT_TOLERANCE: f64 = 1e-12;
/// Absolute symmetry tolerance (scaled by the largest entry when it exceeds one).
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Jacobi stops once the off-diagonal norm falls below this fraction of the initial norm.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense real vector.
#[derive(Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Vector(values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| alpha * v).collect())
    }

    /// Contiguous block `[start, start + len)` as a new vector.
    pub fn segment(&self, start: usize, len: usize) -> Vector {
        Vector(self.0[start..start + len].to_vec())
    }

    pub fn concat(parts: &[&Vector]) -> Vector {
        Vector(parts.iter().flat_map(|p| p.0.iter().copied()).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Dense real matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Mat::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds a matrix from row-major data. Fails when the length is not `rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Convenience constructor for literals; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            data: rows.iter().flat_map(|row| row.iter().copied()).collect(),
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Mat {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
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
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} * vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.matvec_unchecked(v))
    }

    pub(crate) fn matvec_unchecked(&self, v: &[f64]) -> Vector {
        let mut out = vec![0.0; self.rows];
        self.matvec_add_into(v, &mut out);
        Vector(out)
    }

    /// `out += self * v` without bounds bookkeeping beyond debug asserts.
    pub(crate) fn matvec_add_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.cols, v.len());
        debug_assert_eq!(self.rows, out.len());
        for (i, o) in out.iter_mut().enumerate() {
            *o += self
                .row(i)
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    /// Largest |a_ij − a_ji|; infinite for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= SYMMETRY_TOLERANCE * self.max_abs().max(1.0)
    }

    /// (A + Aᵀ)/2.
    pub fn symmetric_part(&self) -> Result<Mat> {
        self.add(&self.transpose()).map(|m| m.scale(0.5))
    }

    /// Copy of the `rows × cols` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !self.is_symmetric() {
            return Err(Error::NotSymmetric(self.asymmetry()));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows * b.rows, a.cols * b.cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..b.rows {
                for l in 0..b.cols {
                    out[(i * b.rows + k, j * b.cols + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Mat, b: &[f64]) -> Result<Vector> {
    let n = a.rows;
    if !a.is_square() || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "system {}x{} with right-hand side of length {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let threshold = PIVOT_TOLERANCE * a.max_abs();
    let mut m = a.clone();
    let mut x = b.to_vec();

    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot < threshold || pivot == 0.0 {
            return Err(Error::SingularMatrix { pivot, threshold });
        }
        if pivot_row != col {
            for j in 0..n {
                m.data.swap(col * n + j, pivot_row * n + j);
            }
            x.swap(col, pivot_row);
        }
        let d = m[(col, col)];
        for r in (col + 1)..n {
            let factor = m[(r, col)] / d;
            if factor == 0.0 {
                continue;
            }
            m[(r, col)] = 0.0;
            for j in (col + 1)..n {
                m[(r, j)] -= factor * m[(col, j)];
            }
            x[r] -= factor * x[col];
        }
    }
    for i in (0..n).rev() {
        let tail: f64 = ((i + 1)..n).map(|j| m[(i, j)] * x[j]).sum();
        x[i] = (x[i] - tail) / m[(i, i)];
    }
    Ok(Vector(x))
}

/// Matrix inverse through column-wise [`solve_linear`].
pub fn inverse(a: &Mat) -> Result<Mat> {
    let n = a.rows;
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cannot invert a {}x{} matrix",
            a.rows, a.cols
        )));
    }
    let mut inv = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_linear(a, &e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    a.check_symmetric()?;
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Mat) -> Result<Vector> {
    a.check_symmetric()?;
    let n = a.rows;
    // Work on the exactly symmetric part so rotations stay consistent.
    let mut m = a.symmetric_part()?;
    let off_norm = |m: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let target = JACOBI_TOLERANCE * m.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&m) <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig = m.diag();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(Vector(eig))
}

/// Solves `a_mᵀ P + P a_m = −q_tilde` by Kronecker vectorization.
///
/// Returns the symmetrized solution. A singular vectorized system means
/// `a_m` has eigenvalue pairs mirrored across the imaginary axis.
pub fn solve_lyapunov(a_m: &Mat, q_tilde: &Mat) -> Result<Mat> {
    let n = a_m.rows;
    if !a_m.is_square() || q_tilde.rows != n || q_tilde.cols != n {
        return Err(Error::DimensionMismatch(format!(
            "Lyapunov equation with A {}x{} and Q {}x{}",
            a_m.rows, a_m.cols, q_tilde.rows, q_tilde.cols
        )));
    }
    q_tilde.check_symmetric()?;
    let at = a_m.transpose();
    let eye = Mat::identity(n);
    let system = kron(&eye, &at).add(&kron(&at, &eye))?;
    // Column-major vec(Q).
    let rhs: Vec<f64> = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| -q_tilde[(i, j)])
        .collect();
    let vec_p = solve_linear(&system, &rhs)?;
    let mut p = Mat::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            p[(i, j)] = vec_p[j * n + i];
        }
    }
    let p = p.symmetric_part()?;
    if !p.is_finite() {
        return Err(Error::NonFiniteState);
    }
    Ok(p)
}

/// Frobenius norm of `a_mᵀ P + P a_m + q_tilde`.
pub fn lyapunov_residual(a_m: &Mat, p: &Mat, q_tilde: &Mat) -> Result<f64> {
    let lhs = a_m.transpose().matmul(p)?.add(&p.matmul(a_m)?)?;
    Ok(lhs.add(q_tilde)?.frobenius_norm())
}

/// Block-diagonal matrix from a list of blocks.
pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows = blocks.iter().map(Mat::rows).sum();
    let cols = blocks.iter().map(Mat::cols).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows {
            for j in 0..b.cols {
                out[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
        r0 += b.rows;
        c0 += b.cols;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.rows == b.rows
            && a.cols == b.cols
            && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn leader_a() -> Mat {
        Mat::from_rows(&[&[0.0, 1.0], &[-2.0, -3.0]])
    }

    #[test]
    fn kron_identity() {
        assert_eq!(kron(&Mat::identity(2), &Mat::identity(2)), Mat::identity(4));
    }

    #[test]
    fn kron_lifts_leader_block_diagonally() {
        let k = kron(&Mat::identity(4), &leader_a());
        assert_eq!((k.rows(), k.cols()), (8, 8));
        for blk in 0..4 {
            assert_eq!(k.block(2 * blk, 2 * blk, 2, 2), leader_a());
        }
        assert_eq!(k[(0, 2)], 0.0);
        assert_eq!(k[(3, 1)], 0.0);
    }

    #[test]
    fn kron_hand_expanded() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let k = kron(&a, &b);
        assert_eq!(k[(0, 1)], 1.0);
        assert_eq!(k[(0, 3)], 2.0);
        assert_eq!(k[(2, 1)], 3.0);
        assert_eq!(k[(3, 2)], 4.0);
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn solve_linear_cases() {
        let x = solve_linear(&Mat::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let x = solve_linear(&Mat::from_diag(&[2.0, 4.0]), &[2.0, 8.0]).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        let swap = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let x = solve_linear(&swap, &[3.0, 5.0]).unwrap();
        assert_eq!(x.as_slice(), &[5.0, 3.0]);
    }

    #[test]
    fn solve_linear_singular() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            solve_linear(&a, &[1.0, 1.0]),
            Err(Error::SingularMatrix { .. })
        ));
        assert!(matches!(
            solve_linear(&Mat::zeros(2, 2), &[0.0, 0.0]),
            Err(Error::SingularMatrix { .. })
        ));
        assert!(matches!(
            solve_linear(&Mat::identity(2), &[1.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn inverse_round_trip() {
        let a = Mat::from_rows(&[&[4.0, 1.0], &[2.0, 3.0]]);
        let prod = a.matmul(&inverse(&a).unwrap()).unwrap();
        assert!(close(&prod, &Mat::identity(2), 1e-14));
        assert!(inverse(&Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn cholesky_cases() {
        assert_eq!(cholesky(&Mat::identity(2)).unwrap(), Mat::identity(2));
        let p = Mat::from_rows(&[&[0.25, 0.05], &[0.05, 0.05]]);
        let l = cholesky(&p).unwrap();
        assert!(close(&l.matmul(&l.transpose()).unwrap(), &p, 1e-9));
        assert_eq!(l[(0, 1)], 0.0);
        assert_eq!(
            cholesky(&Mat::from_diag(&[1.0, -1.0])),
            Err(Error::NotPositiveDefinite)
        );
        let asym = Mat::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert!(matches!(cholesky(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn eigenvalues_of_known_matrices() {
        let e = symmetric_eigenvalues(&Mat::from_diag(&[0.4; 4])).unwrap();
        assert!(e.iter().all(|v| (v - 0.4).abs() < 1e-15));
        let e = symmetric_eigenvalues(&Mat::identity(4)).unwrap();
        assert_eq!(e.as_slice(), &[1.0; 4]);

        let g = 0.3;
        let ring = Mat::from_rows(&[
            &[1.0, -g, 0.0, -g],
            &[-g, 1.0, -g, 0.0],
            &[0.0, -g, 1.0, -g],
            &[-g, 0.0, -g, 1.0],
        ]);
        // circulant: 1 − 2γ cos(2πk/4)
        let mut oracle: Vec<f64> = (0..4)
            .map(|k| 1.0 - 2.0 * g * (2.0 * std::f64::consts::PI * k as f64 / 4.0).cos())
            .collect();
        oracle.sort_by(|a, b| a.total_cmp(b));
        let e = symmetric_eigenvalues(&ring).unwrap();
        for (got, want) in e.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((e[0] - 0.4).abs() < 1e-12 && (e[3] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_reject_asymmetric() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            symmetric_eigenvalues(&a),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn lyapunov_scalar_and_diagonal() {
        let p = solve_lyapunov(&Mat::from_rows(&[&[-1.0]]), &Mat::from_rows(&[&[2.0]])).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        let p = solve_lyapunov(&Mat::from_diag(&[-1.0, -2.0]), &Mat::identity(2)).unwrap();
        assert!(close(&p, &Mat::from_diag(&[0.5, 0.25]), 1e-12));
    }

    #[test]
    fn lyapunov_reproduces_leader_block() {
        let q = Mat::identity(2).scale(0.2);
        let p = solve_lyapunov(&leader_a(), &q).unwrap();
        let expected = Mat::from_rows(&[&[0.25, 0.05], &[0.05, 0.05]]);
        assert!(close(&p, &expected, 1e-9), "{p:?}");
        assert!(lyapunov_residual(&leader_a(), &p, &q).unwrap() <= 1e-9);
    }

    #[test]
    fn lyapunov_singular_for_mirrored_spectrum() {
        // eigenvalues ±1
        let a = Mat::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            solve_lyapunov(&a, &Mat::identity(2)),
            Err(Error::SingularMatrix { .. })
        ));
    }

    fn small_mat(n: usize) -> impl Strategy<Value = Mat> {
        prop::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |d| Mat::from_row_major(n, n, d).unwrap())
    }

    proptest! {
        #[test]
        fn kron_is_bilinear(a in small_mat(2), b in small_mat(3), alpha in -3.0f64..3.0) {
            let lhs = kron(&a.scale(alpha), &b);
            let rhs = kron(&a, &b).scale(alpha);
            prop_assert!(close(&lhs, &rhs, 1e-12));
        }

        #[test]
        fn kron_mixed_product(a in small_mat(2), b in small_mat(2), c in small_mat(2), d in small_mat(2)) {
            let lhs = kron(&a, &b).matmul(&kron(&c, &d)).unwrap();
            let rhs = kron(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap());
            prop_assert!(close(&lhs, &rhs, 1e-10));
        }

        #[test]
        fn solve_linear_round_trip(
            noise in small_mat(6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            // diagonally dominant, hence well conditioned
            let a = noise.add(&Mat::identity(6).scale(15.0)).unwrap();
            let x = solve_linear(&a, &b).unwrap();
            let r = a.matvec(&x).unwrap().sub(&Vector::from_slice(&b));
            prop_assert!(r.norm2() <= 1e-9);
        }

        #[test]
        fn lyapunov_residual_small(noise in small_mat(3), g in small_mat(3)) {
            let a = noise.sub(&Mat::identity(3).scale(8.0)).unwrap();
            let q = g.matmul(&g.transpose()).unwrap().add(&Mat::identity(3)).unwrap();
            let p = solve_lyapunov(&a, &q).unwrap();
            prop_assert!(lyapunov_residual(&a, &p, &q).unwrap() <= 1e-9);
            prop_assert!(cholesky(&p).is_ok());
        }

        #[test]
        fn eigenvalues_sum_to_trace(g in small_mat(5)) {
            let a = g.symmetric_part().unwrap();
            let e = symmetric_eigenvalues(&a).unwrap();
            prop_assert!((e.iter().sum::<f64>() - a.trace()).abs() <= 1e-9);
            prop_assert!(e.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn eigenvalues_of_diagonal_are_sorted_diagonal(d in prop::collection::vec(-5.0f64..5.0, 1..6)) {
            let e = symmetric_eigenvalues(&Mat::from_diag(&d)).unwrap();
            let mut sorted = d.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            prop_assert_eq!(e.as_slice(), sorted.as_slice());
        }
    }
}
