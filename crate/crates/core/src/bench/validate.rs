//! Oracle suite: each fast solver against an independent dense or
//! vectorized computation on small random instances.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gramian::{self, ShuffleDiagonalization};
use crate::indicator::{self, IndicatorContext};
use crate::kernels::{self, CMat, Mat};
use crate::model::{make_example_1, DamperConfig, ModalSystem};
use crate::oracle;
use crate::subspace::{self, BasisSource, OrthoBasis};

/// Largest system the suite accepts; the vectorized oracles scale as `n⁶`.
pub const MAX_N: usize = 40;
/// Largest `n` for the vectorized Lyapunov comparison.
pub const MAX_KRONECKER_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidateOptions {
    pub n: usize,
    pub seed: u64,
    /// Flip the sign of the damper term in the indicator. Used to confirm
    /// that the indicator property catches a wrong formula.
    pub mutate_delta: bool,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            n: MAX_N,
            seed: 1,
            mutate_delta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub checked: usize,
    pub worst: f64,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} worst {:.2e} (tol {:.0e}, {} cases)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tol,
            self.checked
        )
    }
}

fn property(name: &'static str, errs: &[f64], tol: f64) -> PropertyResult {
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let finite = errs.iter().all(|e| e.is_finite());
    PropertyResult {
        name,
        checked: errs.len(),
        worst: if finite { worst } else { f64::NAN },
        tol,
        passed: finite && worst <= tol,
    }
}

fn random_positions(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<usize> {
    let mut p = Vec::with_capacity(l);
    while p.len() < l {
        let c = rng.random_range(1..=n);
        if !p.contains(&c) {
            p.push(c);
        }
    }
    p
}

fn first_order(omega: &DVector<f64>, alpha: f64) -> Mat {
    let om = Mat::from_diagonal(omega);
    gramian::first_order_matrix(&(&om * &om), &(&om * (2.0 * alpha)))
}

/// Relative Frobenius distance between the structured Lyapunov solution and
/// the vectorized dense solve on a random diagonal instance.
pub fn lyapunov_error(rng: &mut ChaCha8Rng, n: usize, alpha: f64) -> Result<f64> {
    let omega = DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-1.0..1.5)));
    let q = rng.random_range(1..=3);
    let gp = Mat::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
    let gv = Mat::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
    let d = ShuffleDiagonalization::new(&omega, alpha)?;
    let x = gramian::structured_lyapunov(&d, Some(&gp), &gv)?.to_dense();
    let mut g = Mat::zeros(2 * n, q);
    g.rows_mut(0, n).copy_from(&gp);
    g.rows_mut(n, n).copy_from(&gv);
    let dense = oracle::kronecker_lyapunov(&first_order(&omega, alpha), &g)?;
    Ok((x - &dense).norm() / dense.norm())
}

/// For a random shift, direction, positions and gains: the residual of
/// projecting the dense shifted solve onto `span{Λ(s)B̃b, Λ(s)F̃(c)}`, and
/// the relative distance between the Woodbury solve and the dense one.
pub fn decomposition_residuals(sys: &ModalSystem, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let n = sys.n();
    let l = 2.min(n);
    let pos = random_positions(rng, n, l);
    let gains = (0..l).map(|_| 10f64.powf(rng.random_range(-1.0..3.0))).collect();
    let cfg = DamperConfig::new(pos, gains);
    let s = Complex64::new(rng.random_range(1e-3..2.0), rng.random_range(-30.0..30.0));
    let b = DVector::from_fn(sys.inputs(), |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let bt = sys.b.map(|x| Complex64::new(x, 0.0)) * &b;
    let dense = oracle::shifted_solve(sys, &cfg, s, &CMat::from_column_slice(n, 1, bt.as_slice()))?;
    let x = dense.column(0).into_owned();

    let lam = subspace::lambda_diag(sys, s)?;
    let f = sys.damper_columns(&cfg.positions)?;
    let mut span = CMat::zeros(n, 1 + l);
    for j in 0..n {
        span[(j, 0)] = lam[j] * bt[j];
        for k in 0..l {
            span[(j, 1 + k)] = lam[j] * f[(j, k)];
        }
    }
    let q = span.qr().q();
    let residual = (&x - &q * (q.adjoint() * &x)).norm() / x.norm();

    let (xw, _) = subspace::woodbury_solve(sys, &f, &cfg.gains, s, &b)?;
    let woodbury = (&xw - &x).norm() / x.norm();
    Ok((residual, woodbury))
}

/// Relative distance between the reduced-trace indicator and
/// `trace(X₁₁ − V Y₁₁,V Vᵀ)` from dense solves.
pub fn delta_error(sys: &ModalSystem, basis: &OrthoBasis, positions: &[usize], mutate: bool) -> Result<f64> {
    let ctx = IndicatorContext::new(sys, basis)?;
    let sign = if mutate { 1.0 } else { -1.0 };
    let fast = ctx.terms_with_sign(sys, positions, sign)?.delta(sys.alpha);
    let dense = indicator::dense_delta(sys, basis, positions)?;
    let f = sys.damper_columns(positions)?;
    let scale = dense.abs().max(1e-12 * gramian::position_gramian_trace(&sys.omega, sys.alpha, &f));
    Ok((fast - dense).abs() / scale)
}

/// Relative residuals of the three block identities satisfied by the
/// Gramian `X` of `(𝒜₀, [0; F̃])`, from a dense solve:
/// `X₁₂ᵀ + X₁₂ = 0`, `X₂₂ − X₁₁Ω² − 2αX₁₂Ω = 0` and
/// `Ω²X₁₂ + X₁₂ᵀΩ² + 2α(X₂₂Ω + ΩX₂₂) − F̃F̃ᵀ = 0`.
pub fn block_identity_residuals(sys: &ModalSystem, positions: &[usize]) -> Result<[f64; 3]> {
    let n = sys.n();
    let f = sys.damper_columns(positions)?;
    let mut g = Mat::zeros(2 * n, f.ncols());
    g.rows_mut(n, n).copy_from(&f);
    let x = kernels::dense_lyapunov(&first_order(&sys.omega, sys.alpha), &g)?;
    let x11 = x.view((0, 0), (n, n));
    let x12 = x.view((0, n), (n, n));
    let x22 = x.view((n, n), (n, n));
    let om = Mat::from_diagonal(&sys.omega);
    let om2 = &om * &om;
    let a = sys.alpha;
    let w = &f * f.transpose();
    let e1 = x12 + x12.transpose();
    let e2 = x22 - x11 * &om2 - x12 * &om * (2.0 * a);
    let e3 = &om2 * x12 + x12.transpose() * &om2 + (x22 * &om + &om * x22) * (2.0 * a) - &w;
    let scale = x22.norm().max(x12.norm());
    Ok([e1.norm() / scale, e2.norm() / x22.norm(), e3.norm() / w.norm()])
}

fn example_system(n: usize) -> Result<ModalSystem> {
    make_example_1(n - n % 2)?.to_modal()
}

/// Run every property at dimension `opts.n` (vectorized Lyapunov at
/// `min(n, 20)`).
pub fn validate(opts: &ValidateOptions) -> Result<Vec<PropertyResult>> {
    if opts.n < 2 || opts.n > MAX_N {
        return Err(Error::InvalidConfig(format!(
            "validation dimension must lie in [2, {MAX_N}], got {}",
            opts.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();

    let mut errs = Vec::new();
    for i in 0..50 {
        let n = rng.random_range(1..=opts.n.min(MAX_KRONECKER_N));
        errs.push(lyapunov_error(&mut rng, n, [0.005, 0.1, 0.5][i % 3])?);
    }
    out.push(property("kronecker-lyapunov", &errs, 1e-10));

    let sys = example_system(opts.n)?;
    let n = sys.n();
    let mut res = Vec::new();
    let mut wood = Vec::new();
    for _ in 0..50 {
        let (r, w) = decomposition_residuals(&sys, &mut rng)?;
        res.push(r);
        wood.push(w);
    }
    out.push(property("decomposition-residual", &res, 1e-8));
    out.push(property("woodbury-identity", &wood, 1e-10));

    let mut errs = Vec::new();
    for _ in 0..20 {
        let r = rng.random_range(1..=(n - 1).min(15));
        let v = Mat::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let basis = OrthoBasis::from_columns(&v, BasisSource::Imported, kernels::DEFAULT_DROP_TOL);
        let pos = random_positions(&mut rng, n, 2.min(n));
        errs.push(delta_error(&sys, &basis, &pos, opts.mutate_delta)?);
    }
    out.push(property("delta-dense-trace", &errs, 1e-8));

    let mut errs = Vec::new();
    for _ in 0..5 {
        let pos = random_positions(&mut rng, n, 2.min(n));
        errs.extend(block_identity_residuals(&sys, &pos)?);
    }
    out.push(property("block-identities", &errs, 1e-8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let r = validate(&ValidateOptions { n: 12, ..Default::default() }).unwrap();
        assert_eq!(r.len(), 5);
        for p in &r {
            assert!(p.passed, "{p}");
        }
    }

    #[test]
    fn mutation_is_caught_by_the_indicator_property_only() {
        let r = validate(&ValidateOptions {
            n: 12,
            mutate_delta: true,
            ..Default::default()
        })
        .unwrap();
        for p in &r {
            assert_eq!(p.passed, p.name != "delta-dense-trace", "{p}");
        }
    }

    #[test]
    fn rejects_out_of_range_dimension() {
        for n in [0, 1, MAX_N + 1] {
            assert!(matches!(
                validate(&ValidateOptions { n, ..Default::default() }),
                Err(Error::InvalidConfig(_))
            ));
        }
        assert!(validate(&ValidateOptions { n: 2, ..Default::default() }).unwrap().iter().all(|p| p.passed));
    }
}
