//! Dense matrix kernels shared by every solver: symmetric and generalized
//! eigendecompositions, rank-revealing orthonormalization, SVD, a real
//! Bartels–Stewart Lyapunov solver and a general eigensolver with left and
//! right eigenvectors.
//!
//! Matrices are `nalgebra` column-major `DMatrix` values throughout.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix4, SymmetricEigen, Vector4, SVD};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;

/// Default relative column drop tolerance of [`orthonormalize`].
pub const DEFAULT_DROP_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;
const SCHUR_MAX_ITER: usize = 10_000;

/// Relative Frobenius asymmetry `‖A − Aᵀ‖ / ‖A‖`.
pub fn asymmetry(a: &Mat) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).norm() / norm
}

pub fn check_symmetric(a: &Mat, name: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "`{name}` must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            name: name.to_string(),
            asymmetry: asym,
        });
    }
    Ok(())
}

pub fn symmetrize(a: &mut Mat) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn is_positive_definite(a: &Mat) -> bool {
    a.is_square() && Cholesky::new(a.clone()).is_some()
}

/// `trace(A·B)` without forming the product.
pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Flip column signs so that the entry of largest magnitude in each column is
/// positive. Gives eigenvector output a deterministic orientation.
pub fn normalize_column_signs(v: &mut Mat) {
    for mut col in v.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for &x in col.iter() {
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
pub fn sym_eig(a: &Mat) -> (DVector<f64>, Mat) {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::zeros(a.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    normalize_column_signs(&mut vectors);
    (values, vectors)
}

/// Solution of the symmetric-definite pencil `K Φ = M Φ Ω²`.
#[derive(Debug, Clone)]
pub struct GeneralizedEigen {
    /// Ascending eigenvalues `ω²`.
    pub eigenvalues: DVector<f64>,
    /// `M`-orthonormal eigenvectors: `ΦᵀMΦ = I`, `ΦᵀKΦ = diag(ω²)`.
    pub vectors: Mat,
}

pub fn generalized_sym_eig(k: &Mat, m: &Mat) -> Result<GeneralizedEigen> {
    check_symmetric(k, "K")?;
    check_symmetric(m, "M")?;
    if k.shape() != m.shape() {
        return Err(Error::Dimension(format!(
            "K is {:?} but M is {:?}",
            k.shape(),
            m.shape()
        )));
    }
    let chol = Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite("M".into()))?;
    let l = chol.l();
    // C = L⁻¹ K L⁻ᵀ = L⁻¹ (L⁻¹ K)ᵀ for symmetric K.
    let z = l
        .solve_lower_triangular(k)
        .ok_or_else(|| Error::Singular("Cholesky factor of M".into()))?;
    let c = l
        .solve_lower_triangular(&z.transpose())
        .ok_or_else(|| Error::Singular("Cholesky factor of M".into()))?;
    let (values, q) = sym_eig(&c);
    if values.len() > 0 && values[0] <= 0.0 {
        return Err(Error::NotPositiveDefinite("K".into()));
    }
    let mut phi = l
        .tr_solve_lower_triangular(&q)
        .ok_or_else(|| Error::Singular("Cholesky factor of M".into()))?;
    normalize_column_signs(&mut phi);
    Ok(GeneralizedEigen {
        eigenvalues: values,
        vectors: phi,
    })
}

/// Rank-revealing orthonormalization by classical Gram–Schmidt with one
/// reorthogonalization pass. Columns whose residual after projection falls
/// below `drop_tol` times the largest column norm of `a` are discarded.
/// A zero (or empty) input yields an `n × 0` matrix.
pub fn orthonormalize(a: &Mat, drop_tol: f64) -> Mat {
    orthonormalize_against(&Mat::zeros(a.nrows(), 0), a, drop_tol)
}

/// Orthonormal columns spanning `range(a)` minus `range(basis)`; `basis` must
/// already have orthonormal columns. The threshold is relative to the largest
/// column norm of `a`.
pub fn orthonormalize_against(basis: &Mat, a: &Mat, drop_tol: f64) -> Mat {
    let n = a.nrows();
    let scale = a
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0_f64, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return Mat::zeros(n, 0);
    }
    let mut q = basis.clone();
    let start = q.ncols();
    for col in a.column_iter() {
        let mut v = col.into_owned();
        for _ in 0..2 {
            if q.ncols() > 0 {
                let coeffs = q.tr_mul(&v);
                v -= &q * coeffs;
            }
        }
        let norm = v.norm();
        if norm > drop_tol * scale {
            v /= norm;
            let k = q.ncols();
            q = q.insert_column(k, 0.0);
            q.set_column(k, &v);
        }
    }
    q.columns(start, q.ncols() - start).into_owned()
}

/// Thin singular value decomposition `A = U Σ Xᵀ`, singular values
/// nonincreasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub singular_values: DVector<f64>,
    pub v: Mat,
}

pub fn svd(a: &Mat) -> Svd {
    if a.nrows() == 0 || a.ncols() == 0 {
        let k = a.nrows().min(a.ncols());
        return Svd {
            u: Mat::zeros(a.nrows(), k),
            singular_values: DVector::zeros(k),
            v: Mat::zeros(a.ncols(), k),
        };
    }
    let s = SVD::new(a.clone(), true, true);
    Svd {
        u: s.u.expect("u requested"),
        singular_values: s.singular_values,
        v: s.v_t.expect("v requested").transpose(),
    }
}

/// Real Schur form `A = Q T Qᵀ` with `T` quasi-upper-triangular.
fn real_schur(a: &Mat) -> Result<(Mat, Mat)> {
    let schur = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Eigen("real Schur iteration did not converge".into()))?;
    Ok(schur.unpack())
}

/// Diagonal block partition `(start, size)` of a quasi-triangular matrix.
fn schur_blocks(t: &Mat) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

/// Solve `P Y + Y Qᵀ = R` for `P`, `Q` of size 1 or 2.
fn small_sylvester(p: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let (m, k) = (p.nrows(), q.nrows());
    let dim = m * k;
    let mut sys = Matrix4::<f64>::zeros();
    let mut rhs = Vector4::<f64>::zeros();
    // vec(P Y) = (I ⊗ P) vec(Y), vec(Y Qᵀ) = (Q ⊗ I) vec(Y).
    for col in 0..k {
        for row in 0..m {
            let eq = col * m + row;
            rhs[eq] = r[(row, col)];
            for l in 0..m {
                sys[(eq, col * m + l)] += p[(row, l)];
            }
            for l in 0..k {
                sys[(eq, l * m + row)] += q[(col, l)];
            }
        }
    }
    let sub = sys.view((0, 0), (dim, dim)).into_owned();
    let lu = sub.lu();
    let sol = lu
        .solve(&rhs.rows(0, dim).into_owned())
        .ok_or_else(|| Error::Singular("Sylvester block (eigenvalues sum to zero)".into()))?;
    Ok(Mat::from_fn(m, k, |row, col| sol[col * m + row]))
}

/// Dense Lyapunov solver for `A X + X Aᵀ + R = 0` that keeps the real Schur
/// factorization of `A`, so repeated right-hand sides cost `O(N³)` without a
/// new eigen-iteration.
#[derive(Debug, Clone)]
pub struct LyapunovSolver {
    q: Mat,
    t: Mat,
    blocks: Vec<(usize, usize)>,
}

impl LyapunovSolver {
    pub fn new(a: &Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension("Lyapunov matrix must be square".into()));
        }
        let (q, t) = real_schur(a)?;
        let blocks = schur_blocks(&t);
        for &(s, size) in &blocks {
            let stable = if size == 1 {
                t[(s, s)] < 0.0
            } else {
                let tr = t[(s, s)] + t[(s + 1, s + 1)];
                let det = t[(s, s)] * t[(s + 1, s + 1)] - t[(s, s + 1)] * t[(s + 1, s)];
                tr < 0.0 && det > 0.0
            };
            if !stable {
                return Err(Error::Unstable(format!(
                    "Schur block at {s} has an eigenvalue with nonnegative real part"
                )));
            }
        }
        Ok(Self { q, t, blocks })
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    /// Solve `A X + X Aᵀ = −G Gᵀ`.
    pub fn solve_factored(&self, g: &Mat) -> Result<Mat> {
        if g.nrows() != self.dim() {
            return Err(Error::Dimension(format!(
                "right-hand factor has {} rows, expected {}",
                g.nrows(),
                self.dim()
            )));
        }
        let gt = self.q.tr_mul(g);
        let c = -(&gt * gt.transpose());
        Ok(self.solve_transformed(c))
    }

    /// Solve `A X + X Aᵀ = C` for symmetric `C`.
    pub fn solve(&self, c: &Mat) -> Result<Mat> {
        if c.shape() != (self.dim(), self.dim()) {
            return Err(Error::Dimension("right-hand side shape".into()));
        }
        let ct = self.q.tr_mul(c) * &self.q;
        Ok(self.solve_transformed(ct))
    }

    fn solve_transformed(&self, c: Mat) -> Mat {
        let n = self.dim();
        let t = &self.t;
        let mut y = Mat::zeros(n, n);
        for &(j0, jq) in self.blocks.iter().rev() {
            let jend = j0 + jq;
            // Right-hand side for block column J: C_J − Σ_{K>J} Y_K T_{J,K}ᵀ.
            let mut rj = c.columns(j0, jq).into_owned();
            if jend < n {
                let tail = y.columns(jend, n - jend) * t.view((j0, jend), (jq, n - jend)).transpose();
                rj -= tail;
            }
            let tjj = t.view((j0, j0), (jq, jq)).into_owned();
            for &(i0, ip) in self.blocks.iter().rev() {
                let iend = i0 + ip;
                let mut rhs = rj.rows(i0, ip).into_owned();
                if iend < n {
                    rhs -= t.view((i0, iend), (ip, n - iend)) * y.view((iend, j0), (n - iend, jq));
                }
                let tii = t.view((i0, i0), (ip, ip)).into_owned();
                // Blocks are stable so the small system is always nonsingular.
                let blk = small_sylvester(&tii, &tjj, &rhs)
                    .expect("stable Schur blocks give a nonsingular Sylvester block");
                y.view_mut((i0, j0), (ip, jq)).copy_from(&blk);
            }
        }
        let mut x = &self.q * y * self.q.transpose();
        symmetrize(&mut x);
        x
    }
}

/// Solve `A X + X Aᵀ = −G Gᵀ` for stable `A`; output is symmetrized.
pub fn dense_lyapunov(a: &Mat, g: &Mat) -> Result<Mat> {
    LyapunovSolver::new(a)?.solve_factored(g)
}

/// Eigenvalues with right (`A v = λ v`) and left (`wᴴ A = λ wᴴ`) eigenvectors
/// normalized so that `wₖᴴ vₖ = 1`.
#[derive(Debug, Clone)]
pub struct ComplexEigen {
    pub values: Vec<Complex64>,
    pub right: CMat,
    pub left: CMat,
}

/// General eigendecomposition through the complex Schur form. Defective or
/// nearly defective matrices fail with [`Error::Eigen`].
pub fn eig_general(a: &Mat) -> Result<ComplexEigen> {
    let n = a.nrows();
    let ac: CMat = a.map(|x| Complex64::new(x, 0.0));
    let schur = nalgebra::Schur::try_new(ac, f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Eigen("complex Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let scale = t.norm().max(f64::MIN_POSITIVE);
    let guard = |d: Complex64| {
        if d.norm() < 1e-14 * scale {
            Complex64::new(1e-14 * scale, 0.0)
        } else {
            d
        }
    };
    let mut values = Vec::with_capacity(n);
    let mut right = CMat::zeros(n, n);
    let mut left = CMat::zeros(n, n);
    for k in 0..n {
        let lam = t[(k, k)];
        values.push(lam);
        // (T − λI) y = 0 with y_k = 1, y_i = 0 for i > k.
        let mut y = nalgebra::DVector::<Complex64>::zeros(n);
        y[k] = Complex64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for j in i + 1..=k {
                s += t[(i, j)] * y[j];
            }
            y[i] = -s / guard(t[(i, i)] - lam);
        }
        // (Tᴴ − λ̄I) u = 0 with u_k = 1, u_i = 0 for i < k.
        let mut u = nalgebra::DVector::<Complex64>::zeros(n);
        u[k] = Complex64::new(1.0, 0.0);
        for i in k + 1..n {
            let mut s = Complex64::new(0.0, 0.0);
            for j in k..i {
                s += t[(j, i)].conj() * u[j];
            }
            u[i] = -s / guard(t[(i, i)].conj() - lam.conj());
        }
        let v = &q * y;
        let mut w = &q * u;
        let v = &v / Complex64::new(v.norm(), 0.0);
        let dot = w.dotc(&v);
        if dot.norm() < 1e-12 * w.norm() {
            return Err(Error::Eigen(format!(
                "eigenvalue {lam} is (nearly) defective"
            )));
        }
        // wᴴ v = 1
        w /= dot.conj();
        right.set_column(k, &v);
        left.set_column(k, &w);
    }
    Ok(ComplexEigen {
        values,
        right,
        left,
    })
}
