//! Trace error indicator `Δ(c) = trace(X₁₁(c) − Y₁₁(c))` for the position
//! block of the damper Gramian, where `X` solves the full Lyapunov equation
//! of the internally damped system with right-hand side `[0; F̃]` and `Y` is
//! the lifted solution of its Galerkin projection onto a basis `V`.
//!
//! With `E₁ = Y₁₂ᵀ + Y₁₂`, `E₂ = Y₂₂ − Y₁₁Ω² − 2αY₁₂Ω` and
//! `E₃ = Ω²Y₁₂ + Y₁₂ᵀΩ² + 2α(Y₂₂Ω + ΩY₂₂) − W`, `W = F̃F̃ᵀ`,
//!
//! `Δ = trace(E₂Ω⁻²) + (trace(Ω⁻¹E₁) − trace(Ω⁻³E₃))/(4α) + α·trace(E₁Ω⁻¹)`.
//!
//! Every term reduces to `r×r` traces against `VᵀΩ⁻¹V` and `VᵀΩ⁻²V`, plus
//! the full-space constant `trace(Ω⁻³W) = Σ f̃ⱼᵀΩ⁻³f̃ⱼ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, LyapunovSolver, Mat};
use crate::model::ModalSystem;
use crate::subspace::{weighted_gram, OrthoBasis, ProjectedSystem};

/// Denominator of the relative indicator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `Δ / trace(Y₁₁)`.
    #[default]
    ReducedTrace,
    /// `Δ / trace(X₁₁)`, using the closed form of the full trace.
    FullTrace,
}

/// Everything about a basis the indicator needs, built once per basis.
#[derive(Debug, Clone)]
pub struct IndicatorContext {
    pub proj: ProjectedSystem,
    /// `VᵀΩ⁻¹V`
    pub n1: Mat,
    /// `VᵀΩ⁻²V`
    pub n2: Mat,
    pub alpha: f64,
    solver: Option<LyapunovSolver>,
}

/// Individual traces entering `Δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaTerms {
    /// `trace(E₂Ω⁻²)`
    pub e2: f64,
    /// `trace(Ω⁻¹E₁)`
    pub e1: f64,
    /// `trace(Ω⁻³E₃)`
    pub e3: f64,
    /// `trace(Y₁₁)`
    pub reduced_trace: f64,
    /// `trace(X₁₁)`
    pub full_trace: f64,
}

impl DeltaTerms {
    pub fn delta(&self, alpha: f64) -> f64 {
        self.e2 + (self.e1 - self.e3) / (4.0 * alpha) + alpha * self.e1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Indicator {
    pub delta: f64,
    pub relative: f64,
    pub reduced_trace: f64,
    pub full_trace: f64,
}

impl IndicatorContext {
    pub fn new(sys: &ModalSystem, basis: &OrthoBasis) -> Result<Self> {
        let proj = ProjectedSystem::new(sys, basis);
        let v = basis.matrix();
        let r = v.ncols();
        let solver = if r == 0 {
            None
        } else {
            let a = crate::gramian::first_order_matrix(&proj.k, &proj.d0);
            Some(LyapunovSolver::new(&a).map_err(|e| Error::Unstable(format!("reduced operator: {e}")))?)
        };
        Ok(Self {
            n1: weighted_gram(v, sys.omega.iter().map(|w| 1.0 / w)),
            n2: weighted_gram(v, sys.omega.iter().map(|w| 1.0 / (w * w))),
            alpha: sys.alpha,
            proj,
            solver,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.dim()
    }

    /// Reduced Gramian blocks `(Y₁₁,V, Y₁₂,V, Y₂₂,V)`.
    pub fn reduced_gramian(&self, sys: &ModalSystem, positions: &[usize]) -> Result<(Mat, Mat, Mat)> {
        let r = self.dim();
        let Some(solver) = &self.solver else {
            return Ok((Mat::zeros(0, 0), Mat::zeros(0, 0), Mat::zeros(0, 0)));
        };
        let fv = self.proj.damper_columns(sys, positions)?;
        let mut g = Mat::zeros(2 * r, fv.ncols());
        g.rows_mut(r, r).copy_from(&fv);
        let y = solver.solve_factored(&g)?;
        Ok((
            y.view((0, 0), (r, r)).into_owned(),
            y.view((0, r), (r, r)).into_owned(),
            y.view((r, r), (r, r)).into_owned(),
        ))
    }

    pub(crate) fn terms_with_sign(&self, sys: &ModalSystem, positions: &[usize], w_sign: f64) -> Result<DeltaTerms> {
        let f = sys.damper_columns(positions)?;
        let full_trace = crate::gramian::position_gramian_trace(&sys.omega, sys.alpha, &f);
        let t3: f64 = f
            .column_iter()
            .map(|col| col.iter().zip(sys.omega.iter()).map(|(x, w)| x * x / (w * w * w)).sum::<f64>())
            .sum();
        let (y11, y12, y22) = self.reduced_gramian(sys, positions)?;
        if self.dim() == 0 {
            return Ok(DeltaTerms {
                e2: 0.0,
                e1: 0.0,
                e3: w_sign * t3,
                reduced_trace: 0.0,
                full_trace,
            });
        }
        let a = self.alpha;
        let e1v = &y12 + y12.transpose();
        let y11_tr = y11.trace();
        let e2 = kernels::trace_product(&y22, &self.n2) - y11_tr - 2.0 * a * kernels::trace_product(&y12, &self.n1);
        let e1 = kernels::trace_product(&e1v, &self.n1);
        let e3 = e1 + 4.0 * a * kernels::trace_product(&y22, &self.n2) + w_sign * t3;
        Ok(DeltaTerms {
            e2,
            e1,
            e3,
            reduced_trace: y11_tr,
            full_trace,
        })
    }

    pub fn terms(&self, sys: &ModalSystem, positions: &[usize]) -> Result<DeltaTerms> {
        self.terms_with_sign(sys, positions, -1.0)
    }

    /// `Δ(c)`.
    pub fn delta(&self, sys: &ModalSystem, positions: &[usize]) -> Result<f64> {
        Ok(self.terms(sys, positions)?.delta(self.alpha))
    }

    pub fn evaluate(&self, sys: &ModalSystem, positions: &[usize], norm: Normalization) -> Result<Indicator> {
        let t = self.terms(sys, positions)?;
        Ok(finish(t, self.alpha, norm))
    }
}

pub(crate) fn finish(t: DeltaTerms, alpha: f64, norm: Normalization) -> Indicator {
    let delta = t.delta(alpha);
    let denom = match norm {
        Normalization::ReducedTrace => t.reduced_trace,
        Normalization::FullTrace => t.full_trace,
    };
    let relative = if delta == 0.0 {
        0.0
    } else if denom > 0.0 {
        delta / denom
    } else {
        f64::INFINITY
    };
    Indicator {
        delta,
        relative,
        reduced_trace: t.reduced_trace,
        full_trace: t.full_trace,
    }
}

/// `trace(X₁₁ − V Y₁₁,V Vᵀ)` from dense Lyapunov solves of the full and the
/// reduced first-order systems.
pub fn dense_delta(sys: &ModalSystem, basis: &OrthoBasis, positions: &[usize]) -> Result<f64> {
    let n = sys.n();
    let f = sys.damper_columns(positions)?;
    let om = Mat::from_diagonal(&sys.omega);
    let a_full = crate::gramian::first_order_matrix(&(&om * &om), &(&om * (2.0 * sys.alpha)));
    let mut g_full = Mat::zeros(2 * n, f.ncols());
    g_full.rows_mut(n, n).copy_from(&f);
    let x11 = crate::kernels::dense_lyapunov(&a_full, &g_full)?.view((0, 0), (n, n)).into_owned();
    let v = basis.matrix();
    let r = v.ncols();
    if r == 0 {
        return Ok(x11.trace());
    }
    let proj = ProjectedSystem::new(sys, basis);
    let a = crate::gramian::first_order_matrix(&proj.k, &proj.d0);
    let fv = v.tr_mul(&f);
    let mut g = Mat::zeros(2 * r, fv.ncols());
    g.rows_mut(r, r).copy_from(&fv);
    let y = crate::oracle::kronecker_lyapunov(&a, &g)?;
    let y11 = v * y.view((0, 0), (r, r)) * v.transpose();
    Ok((x11 - y11).trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gramian::DEFAULT_FACTOR_TOL;
    use crate::model::make_example_1;
    use crate::subspace::{build_v0, build_vf, enrich, BasisSource, Truncation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn system(n: usize) -> ModalSystem {
        make_example_1(n).unwrap().to_modal().unwrap()
    }

    fn random_positions(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<usize> {
        let mut pos = Vec::new();
        while pos.len() < l {
            let p = rng.random_range(1..=n);
            if !pos.contains(&p) {
                pos.push(p);
            }
        }
        pos
    }

    fn random_basis(rng: &mut ChaCha8Rng, n: usize, r: usize) -> OrthoBasis {
        OrthoBasis::from_columns(&Mat::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0)), BasisSource::Imported, 1e-10)
    }

    #[test]
    fn matches_dense_trace_on_random_bases() {
        let sys = system(30);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let basis = random_basis(&mut rng, 30, 10);
            let pos = random_positions(&mut rng, 30, 2);
            let ctx = IndicatorContext::new(&sys, &basis).unwrap();
            let d = ctx.delta(&sys, &pos).unwrap();
            let oracle = dense_delta(&sys, &basis, &pos).unwrap();
            assert!((d - oracle).abs() <= 1e-8 * oracle.abs(), "{d} vs {oracle}");
        }
    }

    #[test]
    fn wrong_w_sign_breaks_the_oracle() {
        let sys = system(20);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = random_basis(&mut rng, 20, 6);
        let ctx = IndicatorContext::new(&sys, &basis).unwrap();
        let bad = ctx.terms_with_sign(&sys, &[4, 11], 1.0).unwrap().delta(sys.alpha);
        let oracle = dense_delta(&sys, &basis, &[4, 11]).unwrap();
        assert!((bad - oracle).abs() > 1e-3 * oracle.abs());
    }

    #[test]
    fn full_span_gives_zero() {
        let sys = system(20);
        let basis = OrthoBasis::from_columns(&Mat::identity(20, 20), BasisSource::Imported, 1e-10);
        let ctx = IndicatorContext::new(&sys, &basis).unwrap();
        let t = ctx.terms(&sys, &[2, 17]).unwrap();
        assert!(t.delta(sys.alpha).abs() <= 1e-8 * t.full_trace);
        assert!((t.reduced_trace - t.full_trace).abs() <= 1e-8 * t.full_trace);
    }

    #[test]
    fn no_dampers_gives_zero() {
        let sys = system(20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ctx = IndicatorContext::new(&sys, &random_basis(&mut rng, 20, 5)).unwrap();
        assert_eq!(ctx.delta(&sys, &[]).unwrap(), 0.0);
        let ind = ctx.evaluate(&sys, &[], Normalization::ReducedTrace).unwrap();
        assert_eq!(ind.relative, 0.0);
    }

    #[test]
    fn empty_basis_misses_everything() {
        let sys = system(10);
        let ctx = IndicatorContext::new(&sys, &OrthoBasis::empty(10)).unwrap();
        let ind = ctx.evaluate(&sys, &[3], Normalization::FullTrace).unwrap();
        assert!((ind.relative - 1.0).abs() < 1e-14);
        let ind = ctx.evaluate(&sys, &[3], Normalization::ReducedTrace).unwrap();
        assert!(ind.relative.is_infinite());
    }

    #[test]
    fn vf_enrichment_captures_exactly() {
        let sys = system(40);
        let v0 = build_v0(&sys, Truncation::EigenRelative(1e-4)).unwrap();
        let pos = [6, 33];
        let before = IndicatorContext::new(&sys, &v0).unwrap().terms(&sys, &pos).unwrap();
        let vf = build_vf(&sys, &pos, Truncation::EigenRelative(DEFAULT_FACTOR_TOL)).unwrap();
        let v = enrich(&v0, &vf).unwrap();
        let after = IndicatorContext::new(&sys, &v).unwrap().terms(&sys, &pos).unwrap();
        assert!(before.delta(sys.alpha) > 1e-6 * before.full_trace);
        assert!(after.delta(sys.alpha).abs() <= 1e-8 * after.full_trace);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn near_nonnegative_on_enriched_bases(p1 in 1usize..=30, p2 in 1usize..=30, q in 1usize..=30, tol in -6.0f64..-1.0) {
            prop_assume!(p1 != p2 && q != p1 && q != p2);
            let sys = system(30);
            let rule = Truncation::EigenRelative(10f64.powf(tol));
            let v = enrich(&build_v0(&sys, rule).unwrap(), &build_vf(&sys, &[q], rule).unwrap()).unwrap();
            let ctx = IndicatorContext::new(&sys, &v).unwrap();
            let t = ctx.terms(&sys, &[p1, p2]).unwrap();
            prop_assert!(t.delta(sys.alpha) >= -1e-8 * t.full_trace);
            let oracle = dense_delta(&sys, &v, &[p1, p2]).unwrap();
            prop_assert!((t.delta(sys.alpha) - oracle).abs() <= 1e-8 * t.full_trace.max(oracle.abs()));
        }
    }
}
