//! Reduced bases for the controllability space and the projected systems
//! they define.
//!
//! The shifted solves of the damped system split as
//! `(s²I + sD̃ + Ω²)⁻¹B̃b = Λ(s)B̃b − Λ(s)F̃ H(s,b)` with the diagonal
//! `Λ(s) = (s²I + 2αsΩ + Ω²)⁻¹`, so the space is covered by a part that does
//! not depend on the dampers (`V₀`), one that depends on positions only
//! (`V_F(c)`) and one that depends on positions and gains (`V_H(c,g)`).

use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gramian::{self, ReducedMatrices, ShuffleDiagonalization};
use crate::kernels::{self, CMat, Mat};
use crate::model::{self, DamperConfig, DamperKind, ModalSystem};
use crate::par;

/// Origin of a block of basis columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasisSource {
    V0,
    VF { positions: Vec<usize> },
    VH { positions: Vec<usize>, gains: Vec<f64> },
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentEvent {
    pub source: BasisSource,
    pub added: usize,
    pub dim: usize,
}

/// Orthonormal basis with a log of how it was assembled.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    v: Mat,
    log: Vec<EnrichmentEvent>,
}

impl OrthoBasis {
    /// Orthonormalize `a`; columns that are numerically dependent are
    /// dropped.
    pub fn from_columns(a: &Mat, source: BasisSource, drop_tol: f64) -> Self {
        let v = kernels::orthonormalize(a, drop_tol);
        let dim = v.ncols();
        Self {
            v,
            log: vec![EnrichmentEvent {
                source,
                added: dim,
                dim,
            }],
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            v: Mat::zeros(n, 0),
            log: Vec::new(),
        }
    }

    pub fn matrix(&self) -> &Mat {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.ncols() == 0
    }

    pub fn log(&self) -> &[EnrichmentEvent] {
        &self.log
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        model::write_matrix(path, &self.v)
    }

    /// Load a basis from the matrix text format, re-orthonormalizing it.
    pub fn read(path: &Path) -> Result<Self> {
        let a = model::read_matrix(path)?;
        Ok(Self::from_columns(&a, BasisSource::Imported, kernels::DEFAULT_DROP_TOL))
    }
}

/// `orth([V, addition])`: the leading columns of `basis` are kept as they
/// are and only the new directions of `addition` are appended.
pub fn enrich(basis: &OrthoBasis, addition: &OrthoBasis) -> Result<OrthoBasis> {
    if basis.n() != addition.n() {
        return Err(Error::Dimension(format!(
            "basis has {} rows, addition has {}",
            basis.n(),
            addition.n()
        )));
    }
    let new = kernels::orthonormalize_against(&basis.v, &addition.v, kernels::DEFAULT_DROP_TOL);
    let added = new.ncols();
    let mut v = basis.v.clone().resize_horizontally(basis.dim() + added, 0.0);
    v.columns_mut(basis.dim(), added).copy_from(&new);
    let mut log = basis.log.clone();
    let source = addition
        .log
        .last()
        .map(|e| e.source.clone())
        .unwrap_or(BasisSource::Imported);
    log.push(EnrichmentEvent {
        source,
        added,
        dim: v.ncols(),
    });
    Ok(OrthoBasis { v, log })
}

/// Truncation rule for Gramian factors before they enter a basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "tol", rename_all = "kebab-case")]
pub enum Truncation {
    /// Keep eigenvalues above `tol` times the largest.
    EigenRelative(f64),
    /// Drop the smallest eigenvalues whose sum stays below `tol` times the
    /// trace.
    TraceFraction(f64),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::EigenRelative(2e-4)
    }
}

impl Truncation {
    /// Same rule with the tolerance multiplied by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        match self {
            Truncation::EigenRelative(t) => Truncation::EigenRelative(t * factor),
            Truncation::TraceFraction(t) => Truncation::TraceFraction(t * factor),
        }
    }
}

/// Orthonormal dominant eigenvectors of a PSD Gramian under `rule`.
pub fn dominant_subspace(x: &Mat, rule: Truncation) -> Mat {
    let n = x.nrows();
    let (vals, vecs) = kernels::sym_eig(x);
    if n == 0 || vals[n - 1] <= 0.0 {
        return Mat::zeros(n, 0);
    }
    let keep = match rule {
        Truncation::EigenRelative(tol) => {
            let cut = tol * vals[n - 1];
            vals.iter().filter(|&&v| v > cut).count()
        }
        Truncation::TraceFraction(tol) => {
            let trace: f64 = vals.iter().map(|v| v.max(0.0)).sum();
            let mut dropped = 0.0;
            let mut k = 0;
            while k < n && dropped + vals[k].max(0.0) <= tol * trace {
                dropped += vals[k].max(0.0);
                k += 1;
            }
            n - k
        }
    };
    vecs.columns(n - keep, keep).into_owned()
}

fn gramian_basis(sys: &ModalSystem, g: &Mat, rule: Truncation, source: BasisSource) -> Result<OrthoBasis> {
    let n = sys.n();
    if g.ncols() == 0 || g.norm() == 0.0 {
        let mut b = OrthoBasis::empty(n);
        b.log.push(EnrichmentEvent { source, added: 0, dim: 0 });
        return Ok(b);
    }
    let diag = ShuffleDiagonalization::for_system(sys)?;
    let x = gramian::structured_lyapunov(&diag, None, g)?;
    let q = dominant_subspace(&x.x11, rule);
    Ok(OrthoBasis::from_columns(&q, source, kernels::DEFAULT_DROP_TOL))
}

/// Basis of the controllability space without external dampers.
pub fn build_v0(sys: &ModalSystem, rule: Truncation) -> Result<OrthoBasis> {
    gramian_basis(sys, &sys.b, rule, BasisSource::V0)
}

/// Basis of the controllability space of `ẍ + 2αΩẋ + Ω²x = F̃(c)u`; it does
/// not depend on the gains.
pub fn build_vf(sys: &ModalSystem, positions: &[usize], rule: Truncation) -> Result<OrthoBasis> {
    let f = sys.damper_columns(positions)?;
    gramian_basis(
        sys,
        &f,
        rule,
        BasisSource::VF {
            positions: positions.to_vec(),
        },
    )
}

/// Interpolation points with matching tangential input directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSet {
    pub shifts: Vec<Complex64>,
    pub directions: Vec<DVector<Complex64>>,
}

impl ShiftSet {
    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    /// Shifts in the open right half-plane and closed under conjugation.
    pub fn validate(&self, inputs: usize) -> Result<()> {
        if self.shifts.len() != self.directions.len() {
            return Err(Error::InvalidParameter("one direction per shift required".into()));
        }
        for (s, b) in self.shifts.iter().zip(&self.directions) {
            if s.re <= 0.0 {
                return Err(Error::InvalidParameter(format!("shift {s} not in the right half-plane")));
            }
            if b.len() != inputs {
                return Err(Error::Dimension(format!("direction of length {}, expected {inputs}", b.len())));
            }
            let scale = s.norm();
            if s.im != 0.0 && !self.shifts.iter().any(|t| (t - s.conj()).norm() <= 1e-12 * scale) {
                return Err(Error::InvalidParameter(format!("shift {s} lacks its conjugate")));
            }
        }
        Ok(())
    }
}

/// `1/(s² + 2αω_j s + ω_j²)` for every mode.
pub fn lambda_diag(sys: &ModalSystem, s: Complex64) -> Result<Vec<Complex64>> {
    sys.omega
        .iter()
        .map(|&w| {
            let den = s * s + s * (2.0 * sys.alpha * w) + w * w;
            if den.norm() <= f64::EPSILON * (s.norm_sqr() + w * w) {
                Err(Error::Singular(format!("s = {s} is a pole of the internally damped system")))
            } else {
                Ok(den.inv())
            }
        })
        .collect()
}

/// `Λ(s)·rhs` by row scaling.
pub fn lambda_solve(sys: &ModalSystem, s: Complex64, rhs: &CMat) -> Result<CMat> {
    if rhs.nrows() != sys.n() {
        return Err(Error::Dimension("right-hand side rows".into()));
    }
    let lam = lambda_diag(sys, s)?;
    let mut out = rhs.clone();
    for (mut row, l) in out.row_iter_mut().zip(lam) {
        row *= l;
    }
    Ok(out)
}

fn complexify(a: &Mat) -> CMat {
    a.map(|x| Complex64::new(x, 0.0))
}

/// `H(s,b) = ((1/s)G⁻¹ + F̃ᵀΛF̃)⁻¹ F̃ᵀΛB̃b` for given damper columns `f`.
fn h_core(
    sys: &ModalSystem,
    f: &Mat,
    gains: &[f64],
    lam: &[Complex64],
    s: Complex64,
    b: &DVector<Complex64>,
) -> Result<DVector<Complex64>> {
    let l = f.ncols();
    let bb = complexify(&sys.b) * b;
    let mut lf = complexify(f);
    for (mut row, &lj) in lf.row_iter_mut().zip(lam) {
        row *= lj;
    }
    let ft = complexify(&f.transpose());
    let mut core = &ft * &lf;
    for j in 0..l {
        core[(j, j)] += (s * gains[j]).inv();
    }
    let lb = DVector::from_iterator(bb.len(), bb.iter().zip(lam).map(|(x, l)| x * l));
    let rhs = &ft * lb;
    let inv = core
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("Woodbury core at s = {s} is singular")))?;
    let cond = core.norm() * inv.norm();
    if !(cond.is_finite() && cond < 1e14) {
        return Err(Error::Singular(format!(
            "Woodbury core at s = {s} has condition number {cond:e}"
        )));
    }
    Ok(inv * rhs)
}

/// Gain-dependent correction `H(s, b; c, g)`.
pub fn h_correction(
    sys: &ModalSystem,
    cfg: &DamperConfig,
    s: Complex64,
    b: &DVector<Complex64>,
) -> Result<DVector<Complex64>> {
    cfg.validate(sys.n())?;
    let f = sys.damper_columns(&cfg.positions)?;
    let lam = lambda_diag(sys, s)?;
    h_core(sys, &f, &cfg.gains, &lam, s, b)
}

/// `(s²I + sD̃(c,g) + Ω²)⁻¹B̃b = Λ(s)B̃b − Λ(s)F̃H` together with the
/// damper part `Λ(s)F̃H`.
pub fn woodbury_solve(
    sys: &ModalSystem,
    f: &Mat,
    gains: &[f64],
    s: Complex64,
    b: &DVector<Complex64>,
) -> Result<(DVector<Complex64>, DVector<Complex64>)> {
    let lam = lambda_diag(sys, s)?;
    let h = h_core(sys, f, gains, &lam, s, b)?;
    let bb = complexify(&sys.b) * b;
    let fh = complexify(f) * h;
    let damper = DVector::from_iterator(fh.len(), fh.iter().zip(&lam).map(|(x, l)| x * l));
    let internal = DVector::from_iterator(bb.len(), bb.iter().zip(&lam).map(|(x, l)| x * l));
    Ok((internal - &damper, damper))
}

/// Real and (for non-real shifts) imaginary parts as separate columns.
pub fn split_real(cols: &[DVector<Complex64>], shifts: &[Complex64]) -> Mat {
    let n = cols.first().map_or(0, |c| c.len());
    let mut parts: Vec<DVector<f64>> = Vec::new();
    for (c, s) in cols.iter().zip(shifts) {
        parts.push(c.map(|z| z.re));
        if s.im != 0.0 {
            parts.push(c.map(|z| z.im));
        }
    }
    let mut m = Mat::zeros(n, parts.len());
    for (j, p) in parts.iter().enumerate() {
        m.set_column(j, p);
    }
    m
}

/// Representatives of a conjugate-closed shift set (`Im s ≥ 0`).
fn upper_half(shifts: &ShiftSet) -> Vec<(Complex64, DVector<Complex64>)> {
    shifts
        .shifts
        .iter()
        .zip(&shifts.directions)
        .filter(|(s, _)| s.im >= 0.0)
        .map(|(s, b)| (*s, b.clone()))
        .collect()
}

/// `orth[Λ(s₁)F̃H(s₁,b₁), …]` at the given shifts.
pub fn build_vh(sys: &ModalSystem, cfg: &DamperConfig, shifts: &ShiftSet) -> Result<OrthoBasis> {
    cfg.validate(sys.n())?;
    shifts.validate(sys.inputs())?;
    let f = sys.damper_columns(&cfg.positions)?;
    let reps = upper_half(shifts);
    let cols = par::try_map(&reps, |(s, b)| {
        woodbury_solve(sys, &f, &cfg.gains, *s, b).map(|(_, damper)| damper)
    })?;
    let s: Vec<Complex64> = reps.iter().map(|(s, _)| *s).collect();
    Ok(OrthoBasis::from_columns(
        &split_real(&cols, &s),
        BasisSource::VH {
            positions: cfg.positions.clone(),
            gains: cfg.gains.clone(),
        },
        kernels::DEFAULT_DROP_TOL,
    ))
}

/// The modal system projected onto a basis `V`, with everything that does
/// not depend on the dampers precomputed.
#[derive(Debug, Clone)]
pub struct ProjectedSystem {
    pub v: Mat,
    /// `ΦV`: damper columns of the projected system are rows of this.
    pub phi_v: Mat,
    /// `VᵀΩ²V`
    pub k: Mat,
    /// `2α VᵀΩV`
    pub d0: Mat,
    pub b: Mat,
    pub c: Mat,
}

/// `Vᵀ diag(d) V`.
pub fn weighted_gram(v: &Mat, d: impl Iterator<Item = f64>) -> Mat {
    let mut dv = v.clone();
    for (mut row, s) in dv.row_iter_mut().zip(d) {
        row *= s;
    }
    let mut g = v.tr_mul(&dv);
    kernels::symmetrize(&mut g);
    g
}

impl ProjectedSystem {
    pub fn new(sys: &ModalSystem, basis: &OrthoBasis) -> Self {
        let v = basis.matrix().clone();
        let a2 = 2.0 * sys.alpha;
        Self {
            phi_v: &sys.phi * &v,
            k: weighted_gram(&v, sys.omega.iter().map(|w| w * w)),
            d0: weighted_gram(&v, sys.omega.iter().map(|w| a2 * w)),
            b: v.tr_mul(&sys.b),
            c: &sys.c * &v,
            v,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    /// `VᵀF̃(c)`.
    pub fn damper_columns(&self, sys: &ModalSystem, positions: &[usize]) -> Result<Mat> {
        match &sys.damper_kind {
            DamperKind::Grounded => {
                let n = sys.n();
                let mut f = Mat::zeros(self.dim(), positions.len());
                for (j, &p) in positions.iter().enumerate() {
                    if p < 1 || p > n || positions[..j].contains(&p) {
                        return Err(Error::InvalidConfig(format!("invalid damper position {p}")));
                    }
                    f.set_column(j, &self.phi_v.row(p - 1).transpose());
                }
                Ok(f)
            }
            DamperKind::Custom(_) => Ok(self.v.tr_mul(&sys.damper_columns(positions)?)),
        }
    }

    /// `VᵀD̃(c,g)V`.
    pub fn damping(&self, sys: &ModalSystem, cfg: &DamperConfig) -> Result<Mat> {
        cfg.validate(sys.n())?;
        let f = self.damper_columns(sys, &cfg.positions)?;
        let g = Mat::from_diagonal(&DVector::from_column_slice(&cfg.gains));
        let mut d = &self.d0 + &f * g * f.transpose();
        kernels::symmetrize(&mut d);
        Ok(d)
    }

    pub fn reduced_matrices(&self, sys: &ModalSystem, cfg: &DamperConfig) -> Result<ReducedMatrices> {
        Ok(ReducedMatrices {
            m: Mat::identity(self.dim(), self.dim()),
            d: self.damping(sys, cfg)?,
            k: self.k.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
        })
    }

    /// Reduced system response `J_r(c,g)`.
    pub fn response(&self, sys: &ModalSystem, cfg: &DamperConfig) -> Result<f64> {
        let d = self.damping(sys, cfg)?;
        gramian::second_order_response(&self.k, &d, &self.b, &self.c)
    }
}
