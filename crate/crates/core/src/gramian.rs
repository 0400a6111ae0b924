//! Lyapunov equations of the modal first-order system.
//!
//! The undamped-by-dampers operator `𝒜₀ = [[0, I], [−Ω², −2αΩ]]` splits into
//! independent 2×2 blocks `[[0, 1], [−ω², −2αω]]` once positions and
//! velocities are interleaved, so its Lyapunov equations are solved entrywise
//! in the eigenbasis of those blocks. The damped operator `𝒜(c,g)` couples the
//! modes and is handled densely.

use nalgebra::{DVector, Matrix2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernels::{self, LyapunovSolver, Mat};
use crate::model::{DamperConfig, ModalSystem};
use crate::par;

/// Eigendecomposition of the interleaved blocks of `𝒜₀`.
#[derive(Debug, Clone)]
pub struct ShuffleDiagonalization {
    omega: DVector<f64>,
    alpha: f64,
    /// `λ_j+ = ω_j(−α + i√(1−α²))`; the partner eigenvalue is its conjugate.
    lambda: Vec<Complex64>,
}

impl ShuffleDiagonalization {
    pub fn new(omega: &DVector<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1) for underdamped modal blocks, got {alpha}"
            )));
        }
        if omega.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("eigenfrequencies must be positive".into()));
        }
        let beta = (1.0 - alpha * alpha).sqrt();
        let lambda = omega
            .iter()
            .map(|&w| Complex64::new(-alpha * w, beta * w))
            .collect();
        Ok(Self {
            omega: omega.clone(),
            alpha,
            lambda,
        })
    }

    pub fn for_system(sys: &ModalSystem) -> Result<Self> {
        Self::new(&sys.omega, sys.alpha)
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// All `2n` eigenvalues, interleaved as `λ_1+, λ_1−, λ_2+, …`.
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        self.lambda.iter().flat_map(|&l| [l, l.conj()]).collect()
    }

    /// The 2×2 block of mode `j` acting on `(x_j, ẋ_j)`.
    pub fn block(&self, j: usize) -> Matrix2<f64> {
        let w = self.omega[j];
        Matrix2::new(0.0, 1.0, -w * w, -2.0 * self.alpha * w)
    }

    /// Eigenvector matrix `Ψ_j = [[1, 1], [λ+, λ−]]`.
    pub fn psi(&self, j: usize) -> Matrix2<Complex64> {
        let l = self.lambda[j];
        Matrix2::new(Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0), l, l.conj())
    }

    pub fn psi_inv(&self, j: usize) -> Matrix2<Complex64> {
        let lp = self.lambda[j];
        let lm = lp.conj();
        let s = (lm - lp).inv();
        Matrix2::new(lm * s, -s, -lp * s, s)
    }

    /// Coordinates of `[G_pos; G_vel]` along the `λ+` eigenvectors, one row
    /// per mode. The `λ−` coordinates are the complex conjugates.
    fn transform(&self, g_pos: Option<&Mat>, g_vel: &Mat) -> Vec<Vec<Complex64>> {
        let q = g_vel.ncols();
        (0..self.n())
            .map(|j| {
                let lp = self.lambda[j];
                let lm = lp.conj();
                let s = (lm - lp).inv();
                (0..q)
                    .map(|c| {
                        let p = g_pos.map_or(0.0, |g| g[(j, c)]);
                        (lm * p - g_vel[(j, c)]) * s
                    })
                    .collect()
            })
            .collect()
    }
}

/// Blocks of a symmetric first-order Gramian `[[X11, X12], [X12ᵀ, X22]]`
/// with respect to positions and velocities.
#[derive(Debug, Clone)]
pub struct FirstOrderGramian {
    pub x11: Mat,
    pub x12: Mat,
    pub x22: Mat,
}

impl FirstOrderGramian {
    pub fn to_dense(&self) -> Mat {
        let n = self.x11.nrows();
        let mut x = Mat::zeros(2 * n, 2 * n);
        x.view_mut((0, 0), (n, n)).copy_from(&self.x11);
        x.view_mut((0, n), (n, n)).copy_from(&self.x12);
        x.view_mut((n, 0), (n, n)).copy_from(&self.x12.transpose());
        x.view_mut((n, n), (n, n)).copy_from(&self.x22);
        x
    }
}

/// Solve `𝒜₀ 𝒳 + 𝒳 𝒜₀ᵀ = −𝒢 𝒢ᵀ` for `𝒢 = [G_pos; G_vel]` (a missing
/// `G_pos` means zero), returning the position/velocity blocks.
pub fn structured_lyapunov(
    diag: &ShuffleDiagonalization,
    g_pos: Option<&Mat>,
    g_vel: &Mat,
) -> Result<FirstOrderGramian> {
    let n = diag.n();
    if g_vel.nrows() != n || g_pos.is_some_and(|g| g.shape() != g_vel.shape()) {
        return Err(Error::Dimension(format!(
            "right-hand factor blocks must be {n} x q"
        )));
    }
    let g = diag.transform(g_pos, g_vel);
    let lam = &diag.lambda;
    let rows = par::map_range(n, |j| {
        let lj = lam[j];
        let gj = &g[j];
        let mut r11 = vec![0.0; n];
        let mut r12 = vec![0.0; n];
        let mut r22 = vec![0.0; n];
        for k in 0..n {
            let gk = &g[k];
            // ⟨g_j+, g_k+⟩ and ⟨g_j+, g_k−⟩ with g_k− = conj(g_k+)
            let mut same = Complex64::new(0.0, 0.0);
            let mut cross = Complex64::new(0.0, 0.0);
            for (a, b) in gj.iter().zip(gk) {
                same += a * b.conj();
                cross += a * b;
            }
            let lk = lam[k];
            let y_pp = -same / (lj + lk.conj());
            let y_pm = -cross / (lj + lk);
            // conj(λ_k+) and conj(λ_k−) = λ_k+
            let v_pp = y_pp * lk.conj();
            let v_pm = y_pm * lk;
            r11[k] = 2.0 * (y_pp + y_pm).re;
            r12[k] = 2.0 * (v_pp + v_pm).re;
            r22[k] = 2.0 * (lj * (v_pp + v_pm)).re;
        }
        (r11, r12, r22)
    });
    let mut x11 = Mat::zeros(n, n);
    let mut x12 = Mat::zeros(n, n);
    let mut x22 = Mat::zeros(n, n);
    for (j, (r11, r12, r22)) in rows.into_iter().enumerate() {
        for k in 0..n {
            x11[(j, k)] = r11[k];
            x12[(j, k)] = r12[k];
            x22[(j, k)] = r22[k];
        }
    }
    kernels::symmetrize(&mut x11);
    kernels::symmetrize(&mut x22);
    Ok(FirstOrderGramian { x11, x12, x22 })
}

/// `trace(X11)` for `𝒢 = [0; G]` in closed form:
/// `Σ_j ‖G_j,:‖² / (4αω_j³)`.
pub fn position_gramian_trace(omega: &DVector<f64>, alpha: f64, g: &Mat) -> f64 {
    g.row_iter()
        .zip(omega.iter())
        .map(|(row, &w)| row.norm_squared() / (4.0 * alpha * w * w * w))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramianKind {
    PositionControllability,
    VelocityObservability,
}

/// Factor `R` with `P ≈ R Rᵀ`.
#[derive(Debug, Clone)]
pub struct GramianFactor {
    pub r: Mat,
    pub kind: GramianKind,
}

impl GramianFactor {
    pub fn rank(&self) -> usize {
        self.r.ncols()
    }
}

/// Default relative eigenvalue cutoff of [`psd_factor`]: retains the Gramian
/// to roundoff.
pub const DEFAULT_FACTOR_TOL: f64 = 1e-13;

/// Factor of a symmetric PSD matrix from its eigendecomposition, dropping
/// eigenvalues below `drop_tol` times the largest one. Columns are ordered
/// by decreasing eigenvalue.
pub fn psd_factor(x: &Mat, drop_tol: f64) -> Mat {
    let n = x.nrows();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let (vals, vecs) = kernels::sym_eig(x);
    let top = vals[n - 1];
    if top <= 0.0 {
        return Mat::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n).rev().filter(|&i| vals[i] > drop_tol * top).collect();
    let mut r = Mat::zeros(n, keep.len());
    for (dst, &i) in keep.iter().enumerate() {
        r.set_column(dst, &(vecs.column(i) * vals[i].sqrt()));
    }
    r
}

/// Factor of the position controllability Gramian of
/// `ẍ + 2αΩẋ + Ω²x = G u`, with `G` being `B̃` or `F̃(c)`.
pub fn controllability_factor(sys: &ModalSystem, g: &Mat, drop_tol: f64) -> Result<GramianFactor> {
    let n = sys.n();
    if g.ncols() == 0 {
        return Ok(GramianFactor {
            r: Mat::zeros(n, 0),
            kind: GramianKind::PositionControllability,
        });
    }
    let diag = ShuffleDiagonalization::for_system(sys)?;
    let x = structured_lyapunov(&diag, None, g)?;
    Ok(GramianFactor {
        r: psd_factor(&x.x11, drop_tol),
        kind: GramianKind::PositionControllability,
    })
}

/// `[[0, I], [−K, −D]]`.
pub fn first_order_matrix(k: &Mat, d: &Mat) -> Mat {
    let n = k.nrows();
    let mut a = Mat::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).fill_with_identity();
    a.view_mut((n, 0), (n, n)).copy_from(&(-k));
    a.view_mut((n, n), (n, n)).copy_from(&(-d));
    a
}

/// Position block `P₁` of the controllability Gramian of
/// `ẍ + D ẋ + K x = B u` (unit mass).
pub fn position_controllability_gramian(k: &Mat, d: &Mat, b: &Mat) -> Result<Mat> {
    let n = k.nrows();
    let a = first_order_matrix(k, d);
    let mut g = Mat::zeros(2 * n, b.ncols());
    g.view_mut((n, 0), (n, b.ncols())).copy_from(b);
    let p = LyapunovSolver::new(&a)?.solve_factored(&g)?;
    Ok(p.view((0, 0), (n, n)).into_owned())
}

/// `sqrt(trace(C P₁ Cᵀ))` for `ẍ + D ẋ + K x = B u`, `y = C x`.
pub fn second_order_response(k: &Mat, d: &Mat, b: &Mat, c: &Mat) -> Result<f64> {
    let p1 = position_controllability_gramian(k, d, b)?;
    let val = kernels::trace_product(&(c * p1), &c.transpose());
    Ok(val.max(0.0).sqrt())
}

/// Full-order system response `J(c,g)`.
pub fn system_response(sys: &ModalSystem, cfg: &DamperConfig) -> Result<f64> {
    let d = sys.full_damping(cfg)?;
    let k = Mat::from_diagonal(&sys.omega.map(|w| w * w));
    second_order_response(&k, &d, &sys.b, &sys.c)
}

/// Response of the system without external dampers.
pub fn internal_response(sys: &ModalSystem) -> Result<f64> {
    let diag = ShuffleDiagonalization::for_system(sys)?;
    let x = structured_lyapunov(&diag, None, &sys.b)?;
    let val = kernels::trace_product(&(&sys.c * x.x11), &sys.c.transpose());
    Ok(val.max(0.0).sqrt())
}

/// Second-order system `M_r ẍ + D_r ẋ + K_r x = B_r u`, `y = C_r x`.
#[derive(Debug, Clone)]
pub struct ReducedMatrices {
    pub m: Mat,
    pub d: Mat,
    pub k: Mat,
    pub b: Mat,
    pub c: Mat,
}

impl ReducedMatrices {
    /// One-sided (Galerkin) projection onto the columns of `v`.
    pub fn galerkin(sys: &ModalSystem, d_full: &Mat, v: &Mat) -> Self {
        Self::petrov(sys, d_full, v, v)
    }

    /// Two-sided projection `Wᵀ(·)T`.
    pub fn petrov(sys: &ModalSystem, d_full: &Mat, w: &Mat, t: &Mat) -> Self {
        let w2 = sys.omega.map(|x| x * x);
        let mut kt = t.clone();
        for (mut row, &s) in kt.row_iter_mut().zip(w2.iter()) {
            row *= s;
        }
        let mut m = w.tr_mul(t);
        let mut d = w.tr_mul(&(d_full * t));
        let mut k = w.tr_mul(&kt);
        if std::ptr::eq(w, t) {
            kernels::symmetrize(&mut m);
            kernels::symmetrize(&mut d);
            kernels::symmetrize(&mut k);
        }
        Self {
            m,
            d,
            k,
            b: w.tr_mul(&sys.b),
            c: &sys.c * t,
        }
    }

    pub fn order(&self) -> usize {
        self.k.nrows()
    }

    /// `C_r (s² M_r + s D_r + K_r)⁻¹ B_r`.
    pub fn transfer(&self, s: Complex64) -> Result<kernels::CMat> {
        let cplx = |a: &Mat| a.map(|x| Complex64::new(x, 0.0));
        let pencil = cplx(&self.m) * (s * s) + cplx(&self.d) * s + cplx(&self.k);
        let x = pencil
            .lu()
            .solve(&cplx(&self.b))
            .ok_or_else(|| Error::Singular(format!("reduced pencil at s = {s}")))?;
        Ok(cplx(&self.c) * x)
    }
}

/// Balanced truncation of the system at fixed dampers to order `r`, from the
/// position controllability and velocity observability Gramians.
#[derive(Debug, Clone)]
pub struct BalancedTruncation {
    pub w: Mat,
    pub t: Mat,
    pub singular_values: DVector<f64>,
    pub reduced: ReducedMatrices,
}

pub fn balanced_truncation_fixed(
    sys: &ModalSystem,
    cfg: &DamperConfig,
    r: usize,
) -> Result<BalancedTruncation> {
    let n = sys.n();
    let d = sys.full_damping(cfg)?;
    let k = Mat::from_diagonal(&sys.omega.map(|w| w * w));
    let a = first_order_matrix(&k, &d);

    let mut gb = Mat::zeros(2 * n, sys.inputs());
    gb.view_mut((n, 0), (n, sys.inputs())).copy_from(&sys.b);
    let p = LyapunovSolver::new(&a)?.solve_factored(&gb)?;
    let mut gc = Mat::zeros(2 * n, sys.outputs());
    gc.view_mut((0, 0), (n, sys.outputs())).copy_from(&sys.c.transpose());
    let q = LyapunovSolver::new(&a.transpose())?.solve_factored(&gc)?;

    let r1 = psd_factor(&p.view((0, 0), (n, n)).into_owned(), DEFAULT_FACTOR_TOL);
    let s3 = psd_factor(&q.view((n, n), (n, n)).into_owned(), DEFAULT_FACTOR_TOL);
    let svd = kernels::svd(&(s3.transpose() * &r1));
    let sv = &svd.singular_values;
    let rank = if sv.is_empty() {
        0
    } else {
        let cut = sv[0] * (n as f64) * f64::EPSILON;
        sv.iter().filter(|&&s| s > cut).count()
    };
    if r == 0 || r > rank {
        return Err(Error::RankExceeded { requested: r, rank });
    }
    let scale = DVector::from_iterator(r, sv.iter().take(r).map(|s| 1.0 / s.sqrt()));
    let w = &s3 * svd.u.columns(0, r) * Mat::from_diagonal(&scale);
    let t = &r1 * svd.v.columns(0, r) * Mat::from_diagonal(&scale);
    let reduced = ReducedMatrices::petrov(sys, &d, &w, &t);
    Ok(BalancedTruncation {
        w,
        t,
        singular_values: sv.clone(),
        reduced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_example_1;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn a0(omega: &DVector<f64>, alpha: f64) -> Mat {
        let k = Mat::from_diagonal(&omega.map(|w| w * w));
        let d = Mat::from_diagonal(&(omega * (2.0 * alpha)));
        first_order_matrix(&k, &d)
    }

    fn stack(g_pos: &Mat, g_vel: &Mat) -> Mat {
        let n = g_vel.nrows();
        let mut g = Mat::zeros(2 * n, g_vel.ncols());
        g.view_mut((0, 0), g_pos.shape()).copy_from(g_pos);
        g.view_mut((n, 0), g_vel.shape()).copy_from(g_vel);
        g
    }

    #[test]
    fn eigenvalues_closed_form() {
        let d = ShuffleDiagonalization::new(&DVector::from_vec(vec![1.0]), 0.005).unwrap();
        let l = d.eigenvalues();
        assert!((l[0] - Complex64::new(-0.005, 0.999_987_499_921_874_2)).norm() < 1e-15);
        assert_eq!(l[1], l[0].conj());
        let dense = nalgebra::Schur::new(Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.01]))
            .complex_eigenvalues();
        assert!(dense.iter().all(|e| (e - l[0]).norm() < 1e-14 || (e - l[1]).norm() < 1e-14));

        let d = ShuffleDiagonalization::new(&DVector::from_vec(vec![2.0]), 0.5).unwrap();
        let l = d.eigenvalues();
        assert!((l[0] - Complex64::new(-1.0, 2.0 * 0.75f64.sqrt())).norm() < 1e-15);
        assert!(ShuffleDiagonalization::new(&DVector::from_vec(vec![1.0]), 1.0).is_err());
    }

    #[test]
    fn blocks_are_diagonalized() {
        let omega = DVector::from_vec(vec![0.01, 0.7, 3.0, 250.0]);
        for alpha in [0.005, 0.1, 0.5, 0.99] {
            let d = ShuffleDiagonalization::new(&omega, alpha).unwrap();
            for j in 0..omega.len() {
                let blk = d.block(j).map(|x| Complex64::new(x, 0.0));
                let m = d.psi_inv(j) * blk * d.psi(j);
                let l = d.eigenvalues();
                let off = m[(0, 1)].norm() + m[(1, 0)].norm();
                let diag_err = (m[(0, 0)] - l[2 * j]).norm() + (m[(1, 1)] - l[2 * j + 1]).norm();
                assert!(off + diag_err <= 1e-12 * omega[j].max(1.0), "j={j} alpha={alpha}");
            }
        }
    }

    #[test]
    fn single_mode_against_kronecker() {
        let omega = DVector::from_vec(vec![1.0]);
        let d = ShuffleDiagonalization::new(&omega, 0.5).unwrap();
        let g = Mat::from_element(1, 1, 1.0);
        let x = structured_lyapunov(&d, None, &g).unwrap().to_dense();
        let oracle = oracle::kronecker_lyapunov(&a0(&omega, 0.5), &stack(&Mat::zeros(1, 1), &g)).unwrap();
        assert!((&x - &oracle).norm() <= 1e-12 * oracle.norm());
        // closed form for one mode: X11 = f²/(4αω³), X22 = f²/(4αω)
        assert!((x[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((x[(1, 1)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn random_instances_against_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..12 {
            let n = rng.random_range(1..=12);
            let alpha = [0.005, 0.1, 0.5][trial % 3];
            let omega = DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-1.0..1.5)));
            let q = rng.random_range(1..=3);
            let gp = Mat::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
            let gv = Mat::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
            let d = ShuffleDiagonalization::new(&omega, alpha).unwrap();
            let x = structured_lyapunov(&d, Some(&gp), &gv).unwrap().to_dense();
            let oracle = oracle::kronecker_lyapunov(&a0(&omega, alpha), &stack(&gp, &gv)).unwrap();
            let err = (&x - &oracle).norm() / oracle.norm();
            assert!(err <= 1e-10, "trial {trial}: {err:e}");
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let d = ShuffleDiagonalization::new(&DVector::from_vec(vec![1.0, 2.0]), 0.1).unwrap();
        let x = structured_lyapunov(&d, None, &Mat::zeros(2, 1)).unwrap();
        assert_eq!(x.to_dense(), Mat::zeros(4, 4));
    }

    #[test]
    fn block_identities_and_trace() {
        let sys = make_example_1(30).unwrap().to_modal().unwrap();
        let f = sys.damper_columns(&[4, 17]).unwrap();
        let d = ShuffleDiagonalization::for_system(&sys).unwrap();
        let x = structured_lyapunov(&d, None, &f).unwrap();
        let om = Mat::from_diagonal(&sys.omega);
        let om2 = &om * &om;
        let a = sys.alpha;
        let scale = x.x22.norm();
        let e1 = &x.x12 + x.x12.transpose();
        let e2 = &x.x22 - &x.x11 * &om2 - &x.x12 * &om * (2.0 * a);
        let e3 = &om2 * &x.x12 + x.x12.transpose() * &om2 + &x.x22 * &om * (2.0 * a)
            + &om * &x.x22 * (2.0 * a)
            - &f * f.transpose();
        assert!(e1.norm() <= 1e-8 * x.x12.norm().max(scale));
        assert!(e2.norm() <= 1e-8 * scale);
        assert!(e3.norm() <= 1e-8 * (&f * f.transpose()).norm());
        let tr = position_gramian_trace(&sys.omega, a, &f);
        assert!((x.x11.trace() - tr).abs() <= 1e-10 * tr);
    }

    #[test]
    fn factor_reproduces_gramian() {
        let sys = make_example_1(10).unwrap().to_modal().unwrap();
        let d = ShuffleDiagonalization::for_system(&sys).unwrap();
        let x11 = structured_lyapunov(&d, None, &sys.b).unwrap().x11;
        let (ev, _) = kernels::sym_eig(&x11);
        assert!(ev[0] >= -1e-10 * ev[ev.len() - 1]);
        let f = controllability_factor(&sys, &sys.b, DEFAULT_FACTOR_TOL).unwrap();
        assert_eq!(f.kind, GramianKind::PositionControllability);
        assert!(f.rank() <= 10);
        assert!((&f.r * f.r.transpose() - &x11).norm() <= 1e-9 * x11.norm());
        let empty = controllability_factor(&sys, &Mat::zeros(10, 0), DEFAULT_FACTOR_TOL).unwrap();
        assert_eq!(empty.rank(), 0);
    }

    #[test]
    fn response_limits() {
        let sys = make_example_1(10).unwrap().to_modal().unwrap();
        let tiny = DamperConfig::new(vec![2, 7], vec![1e-10, 1e-10]).with_bounds(1e-12, 1.0);
        let j_tiny = system_response(&sys, &tiny).unwrap();
        let j0 = internal_response(&sys).unwrap();
        assert!((j_tiny - j0).abs() <= 1e-6 * j0);

        let mut silent = sys.clone();
        silent.c = Mat::zeros(3, 10);
        let cfg = DamperConfig::new(vec![2, 7], vec![10.0, 10.0]);
        assert_eq!(system_response(&silent, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn response_matches_frequency_quadrature() {
        let sys = make_example_1(10).unwrap().to_modal().unwrap();
        let cfg = DamperConfig::new(vec![2, 7], vec![10.0, 10.0]);
        let j = system_response(&sys, &cfg).unwrap();
        let q = oracle::h2_quadrature(&sys, &cfg, 1e-9).unwrap();
        assert!((j - q).abs() <= 1e-3 * j, "lyapunov {j}, quadrature {q}");
    }

    #[test]
    fn response_is_monotone_in_gain_for_single_mode() {
        // SISO single mode with the damper on it: J² = b²c²/(4ζω³ … ) decreases in g
        let sys = ModalSystem::from_diagonal(
            DVector::from_vec(vec![1.5]),
            0.01,
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for g in [1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let j = system_response(&sys, &DamperConfig::new(vec![1], vec![g])).unwrap();
            assert!(j < last);
            last = j;
        }
    }

    fn small_system(seed: u64, n: usize) -> ModalSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = DVector::from_fn(n, |i, _| 0.5 + i as f64 + rng.random_range(0.0..0.5));
        let b = Mat::from_fn(n, 1, |_, _| rng.random_range(0.5..1.5));
        let c = Mat::from_fn(2, n, |_, _| rng.random_range(0.5..1.5));
        let mut phi = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        phi = kernels::orthonormalize(&phi, 1e-10);
        let mut sys = ModalSystem::from_diagonal(omega, 0.05, b, c).unwrap();
        sys.phi = phi;
        sys
    }

    #[test]
    fn balanced_truncation_full_order_is_exact() {
        let sys = small_system(29, 6);
        let cfg = DamperConfig::new(vec![2], vec![0.8]);
        let bt = balanced_truncation_fixed(&sys, &cfg, 6).unwrap();
        let wt = bt.w.transpose() * &bt.t;
        assert!((wt - Mat::identity(6, 6)).norm() <= 1e-8);
        for w in [0.3, 1.0, 2.7, 5.0] {
            let s = Complex64::new(0.0, w);
            let g = sys.transfer(s, &cfg).unwrap();
            let gr = bt.reduced.transfer(s).unwrap();
            assert!((&g - gr).norm() <= 1e-6 * g.norm(), "w = {w}");
        }
        assert!(matches!(
            balanced_truncation_fixed(&sys, &cfg, 7),
            Err(Error::RankExceeded { .. })
        ));
    }

    #[test]
    fn balanced_truncation_error_decreases_with_order() {
        let sys = small_system(31, 20);
        let cfg = DamperConfig::new(vec![3, 11], vec![2.0, 0.5]);
        let err = |r: usize| {
            let bt = balanced_truncation_fixed(&sys, &cfg, r).unwrap();
            assert!((bt.w.transpose() * &bt.t - Mat::identity(r, r)).norm() <= 1e-8);
            [0.5, 2.0, 5.0, 11.0, 17.0]
                .iter()
                .map(|&w| {
                    let s = Complex64::new(0.0, w);
                    (sys.transfer(s, &cfg).unwrap() - bt.reduced.transfer(s).unwrap()).norm()
                })
                .sum::<f64>()
        };
        assert!(err(10) < err(4));
    }
}
