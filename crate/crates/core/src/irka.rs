//! Symmetry-preserving one-sided IRKA for second-order systems (sym2IRKA).
//!
//! Each iteration projects onto `W = orth[(σᵢ²I + σᵢD̃ + Ω²)⁻¹B̃bᵢ]`, which
//! keeps `K_r`, `D_r` symmetric positive definite, then takes the `r` most
//! dominant poles of the order-`2r` first-order reduced model and uses the
//! mirrored poles as the next shifts. Shifts live in the right half-plane and
//! the reduced model interpolates `G(σᵢ)bᵢ`.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gramian::{self, ReducedMatrices};
use crate::kernels::{self, CMat, Mat};
use crate::model::{DamperConfig, ModalSystem};
use crate::par;
use crate::subspace::{split_real, woodbury_solve, BasisSource, OrthoBasis, ShiftSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrkaOptions {
    pub r: usize,
    pub max_iter: usize,
    pub shift_tol: f64,
    /// Iterations of the inner first-order IRKA that truncates the order-`2r`
    /// model; 0 keeps the dominant poles as they are.
    pub inner_max_iter: usize,
}

impl Default for IrkaOptions {
    fn default() -> Self {
        Self {
            r: 30,
            max_iter: 50,
            shift_tol: 1e-4,
            inner_max_iter: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IrkaState {
    /// Shifts the returned basis interpolates at.
    pub shifts: ShiftSet,
    pub iteration: usize,
    /// Relative distance between `shifts` and the update they produce.
    pub shift_change: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct IrkaResult {
    pub state: IrkaState,
    pub basis: OrthoBasis,
    pub reduced: ReducedMatrices,
}

/// `r` real shifts log-spaced over the modal frequency range, with the
/// dominant right singular vector of `B̃` as direction.
pub fn initial_shifts(sys: &ModalSystem, r: usize) -> ShiftSet {
    let lo = sys.omega.min();
    let hi = sys.omega.max();
    let shifts: Vec<Complex64> = (0..r)
        .map(|i| {
            let t = if r == 1 { 0.5 } else { i as f64 / (r - 1) as f64 };
            Complex64::new(lo * (hi / lo).powf(t), 0.0)
        })
        .collect();
    let svd = kernels::svd(&sys.b);
    let dir = svd.v.column(0).map(|x| Complex64::new(x, 0.0));
    ShiftSet {
        directions: vec![dir; r],
        shifts,
    }
}

/// Projection basis for a shift set: real and imaginary parts of the
/// shifted solves, one solve per conjugate pair.
pub fn interpolation_basis(sys: &ModalSystem, cfg: &DamperConfig, shifts: &ShiftSet) -> Result<OrthoBasis> {
    let f = sys.damper_columns(&cfg.positions)?;
    let reps: Vec<(Complex64, DVector<Complex64>)> = shifts
        .shifts
        .iter()
        .zip(&shifts.directions)
        .filter(|(s, _)| s.im >= 0.0)
        .map(|(s, b)| (*s, b.clone()))
        .collect();
    let cols = par::try_map(&reps, |(s, b)| woodbury_solve(sys, &f, &cfg.gains, *s, b).map(|(x, _)| x))?;
    let s: Vec<Complex64> = reps.iter().map(|(s, _)| *s).collect();
    Ok(OrthoBasis::from_columns(
        &split_real(&cols, &s),
        BasisSource::Imported,
        kernels::DEFAULT_DROP_TOL,
    ))
}

fn eig_with_retry(a: &Mat) -> Result<kernels::ComplexEigen> {
    match kernels::eig_general(a) {
        Ok(e) => Ok(e),
        Err(_) => {
            let n = a.nrows();
            let eps = 1e-10 * a.norm();
            let bumped = a + Mat::from_fn(n, n, |i, j| if i == j { eps * (i + 1) as f64 / n as f64 } else { 0.0 });
            kernels::eig_general(&bumped)
        }
    }
}

/// Poles of a first-order model with their tangential residues.
struct Pole {
    lambda: Complex64,
    /// right direction `(wᴴB)ᴴ`
    b: DVector<Complex64>,
    /// left direction `Cv`
    c: DVector<Complex64>,
    weight: f64,
}

fn poles_of(a: &Mat, b: &Mat, c: &Mat) -> Result<Vec<Pole>> {
    let eig = eig_with_retry(a)?;
    let bc = b.map(|x| Complex64::new(x, 0.0));
    let cc = c.map(|x| Complex64::new(x, 0.0));
    let scale = eig.values.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let tiny = 1e-14 * scale.max(f64::MIN_POSITIVE);
    Ok((0..a.nrows())
        .map(|k| {
            let ct = &cc * eig.right.column(k);
            let bt = eig.left.column(k).adjoint() * &bc;
            Pole {
                lambda: eig.values[k],
                weight: ct.norm() * bt.norm() / eig.values[k].re.abs().max(tiny),
                b: bt.transpose().map(|z| z.conj()),
                c: ct,
            }
        })
        .collect())
}

fn unit(v: &DVector<Complex64>) -> DVector<Complex64> {
    let n = v.norm();
    if n > 0.0 {
        v / Complex64::new(n, 0.0)
    } else {
        v.clone()
    }
}

/// Shifts, right and left directions.
type Tangential = (Vec<Complex64>, Vec<DVector<Complex64>>, Vec<DVector<Complex64>>);

/// Conjugate-closed selection of (at least) `r` poles in the given order,
/// mirrored into the right half-plane.
fn select(poles: &[Pole], r: usize) -> Tangential {
    let scale = poles.iter().map(|p| p.lambda.norm()).fold(0.0, f64::max);
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut out: Tangential = (Vec::new(), Vec::new(), Vec::new());
    let mut push = |lambda: Complex64, b: DVector<Complex64>, c: DVector<Complex64>| {
        let mut s = -lambda;
        if s.re <= 0.0 {
            s.re = s.re.abs().max(tol);
        }
        out.0.push(s);
        out.1.push(unit(&b));
        out.2.push(unit(&c));
    };
    let mut used = vec![false; poles.len()];
    let mut count = 0;
    for i in 0..poles.len() {
        if count >= r {
            break;
        }
        if used[i] {
            continue;
        }
        used[i] = true;
        let p = &poles[i];
        if p.lambda.im.abs() <= tol {
            let re = |v: &DVector<Complex64>| {
                let r = v.map(|z| Complex64::new(z.re, 0.0));
                if r.norm() > 0.0 { r } else { v.clone() }
            };
            push(Complex64::new(p.lambda.re, 0.0), re(&p.b), re(&p.c));
            count += 1;
            continue;
        }
        let target = p.lambda.conj();
        let partner = (0..poles.len())
            .filter(|&j| !used[j])
            .min_by(|&x, &y| (poles[x].lambda - target).norm().total_cmp(&(poles[y].lambda - target).norm()));
        if let Some(j) = partner {
            used[j] = true;
        }
        let conj = |v: &DVector<Complex64>| v.map(|z| z.conj());
        let (lu, bu, cu) = if p.lambda.im > 0.0 {
            (p.lambda, p.b.clone(), p.c.clone())
        } else {
            (p.lambda.conj(), conj(&p.b), conj(&p.c))
        };
        push(lu, bu.clone(), cu.clone());
        push(lu.conj(), conj(&bu), conj(&cu));
        count += 2;
    }
    out
}

fn order_by_dominance(poles: &mut [Pole]) {
    poles.sort_by(|x, y| {
        y.weight
            .total_cmp(&x.weight)
            .then(x.lambda.im.abs().total_cmp(&y.lambda.im.abs()))
            .then(y.lambda.im.total_cmp(&x.lambda.im))
    });
}

/// Real basis of `(σᵢI − A)⁻¹ B dᵢ` over the upper-half representatives.
fn krylov_columns(a: &Mat, b: &Mat, shifts: &[Complex64], dirs: &[DVector<Complex64>]) -> Result<Mat> {
    let n = a.nrows();
    let ac = a.map(|x| Complex64::new(x, 0.0));
    let bc = b.map(|x| Complex64::new(x, 0.0));
    let mut cols = Vec::new();
    let mut reps = Vec::new();
    for (s, d) in shifts.iter().zip(dirs) {
        if s.im < 0.0 {
            continue;
        }
        let pencil = CMat::identity(n, n) * *s - &ac;
        let x = pencil
            .lu()
            .solve(&(&bc * d))
            .ok_or_else(|| Error::Singular(format!("first-order pencil at {s}")))?;
        cols.push(x.column(0).into_owned());
        reps.push(*s);
    }
    Ok(split_real(&cols, &reps))
}

/// Two-sided tangential IRKA on a small dense first-order model, started
/// from `init`. Returns the mirrored poles of the order-`r` model with
/// right directions, or `None` if the projection breaks down.
fn first_order_irka(a: &Mat, b: &Mat, c: &Mat, init: Tangential, max_iter: usize, tol: f64) -> Option<Tangential> {
    let mut cur = init;
    for _ in 0..max_iter {
        let v = krylov_columns(a, b, &cur.0, &cur.1).ok()?;
        let w = krylov_columns(&a.transpose(), &c.transpose(), &cur.0, &cur.2).ok()?;
        if v.ncols() != w.ncols() || v.ncols() == 0 {
            return None;
        }
        let v = kernels::orthonormalize(&v, 1e-12);
        let w = kernels::orthonormalize(&w, 1e-12);
        if v.ncols() != w.ncols() {
            return None;
        }
        let e = w.tr_mul(&v);
        let lu = e.lu();
        let ar = lu.solve(&w.tr_mul(&(a * &v)))?;
        let br = lu.solve(&w.tr_mul(b))?;
        let cr = c * &v;
        let mut poles = poles_of(&ar, &br, &cr).ok()?;
        order_by_dominance(&mut poles);
        let next = select(&poles, poles.len());
        let change = shift_distance(&cur.0, &next.0);
        cur = next;
        if change <= tol {
            return Some(cur);
        }
    }
    Some(cur)
}

/// Next shifts and directions from a reduced second-order model. The
/// order-`2r` first-order model is truncated to order `r` by an inner
/// first-order IRKA, started from its `r` most dominant poles (residue
/// norm over distance to the imaginary axis) and closed under conjugation
/// (an odd `r` may be rounded up by one). The resulting poles, mirrored
/// into the right half-plane, are the new shifts.
pub fn fo_irka_update(
    red: &ReducedMatrices,
    r: usize,
    previous: Option<&[Complex64]>,
    inner_max_iter: usize,
) -> Result<ShiftSet> {
    let q = red.order();
    let a = gramian::first_order_matrix(&red.k, &red.d);
    let mut b1 = Mat::zeros(2 * q, red.b.ncols());
    b1.rows_mut(q, q).copy_from(&red.b);
    let mut c1 = Mat::zeros(red.c.nrows(), 2 * q);
    c1.columns_mut(0, q).copy_from(&red.c);
    let mut poles = poles_of(&a, &b1, &c1)?;
    if let Some(prev) = previous {
        for p in &mut poles {
            let s = -p.lambda;
            if prev.iter().any(|q| (s - q).norm() <= STICKY * q.norm()) {
                p.weight *= STICKY_BOOST;
            }
        }
    }
    order_by_dominance(&mut poles);
    let init = select(&poles, r);
    if init.0.is_empty() {
        return Err(Error::Eigen("no poles available for the shift update".into()));
    }
    let (shifts, directions, _) = if init.0.len() < 2 * q && inner_max_iter > 0 {
        first_order_irka(&a, &b1, &c1, init.clone(), inner_max_iter, INNER_TOL).unwrap_or(init)
    } else {
        init
    };
    Ok(ShiftSet { shifts, directions })
}

const STICKY: f64 = 5e-2;
const STICKY_BOOST: f64 = 100.0;
const INNER_TOL: f64 = 1e-8;

/// Hausdorff distance between two shift sets relative to their largest
/// modulus.
pub fn shift_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let directed = |x: &[Complex64], y: &[Complex64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    let scale = a.iter().chain(b).map(|z| z.norm()).fold(0.0, f64::max);
    directed(a, b).max(directed(b, a)) / scale.max(f64::MIN_POSITIVE)
}

fn check_spd(red: &ReducedMatrices) -> Result<()> {
    for (name, m) in [("K_r", &red.k), ("D_r", &red.d)] {
        if !kernels::is_positive_definite(m) {
            return Err(Error::NotPositiveDefinite(format!("reduced {name}")));
        }
    }
    Ok(())
}

/// Run sym2IRKA at fixed dampers. Hitting `max_iter` is reported through
/// `state.converged`, not as an error.
pub fn sym2irka(sys: &ModalSystem, cfg: &DamperConfig, opts: IrkaOptions) -> Result<IrkaResult> {
    if opts.r == 0 {
        return Err(Error::InvalidParameter("IRKA order must be at least 1".into()));
    }
    if opts.r > sys.n() {
        return Err(Error::RankExceeded {
            requested: opts.r,
            rank: sys.n(),
        });
    }
    cfg.validate(sys.n())?;
    let d_full = sys.full_damping(cfg)?;
    let mut shifts = initial_shifts(sys, opts.r);
    let mut iteration = 0;
    loop {
        iteration += 1;
        let basis = interpolation_basis(sys, cfg, &shifts)?;
        let reduced = ReducedMatrices::galerkin(sys, &d_full, basis.matrix());
        check_spd(&reduced)?;
        let next = fo_irka_update(&reduced, opts.r.min(reduced.order()), Some(&shifts.shifts), opts.inner_max_iter)?;
        let change = shift_distance(&shifts.shifts, &next.shifts);
        let converged = change <= opts.shift_tol;
        if converged || iteration >= opts.max_iter {
            return Ok(IrkaResult {
                state: IrkaState {
                    shifts,
                    iteration,
                    shift_change: change,
                    converged,
                },
                basis,
                reduced,
            });
        }
        shifts = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_example_1;

    fn system(n: usize) -> ModalSystem {
        make_example_1(n).unwrap().to_modal().unwrap()
    }

    #[test]
    fn full_order_projection_is_exact() {
        let sys = system(12);
        let cfg = DamperConfig::new(vec![3], vec![50.0]);
        let res = sym2irka(&sys, &cfg, IrkaOptions { r: 12, max_iter: 3, ..Default::default() }).unwrap();
        assert_eq!(res.basis.dim(), 12);
        for w in [0.0, 0.3, 1.0, 4.0, 20.0] {
            let s = Complex64::new(0.0, w);
            let g = sys.transfer(s, &cfg).unwrap();
            let gr = res.reduced.transfer(s).unwrap();
            assert!((&g - gr).norm() <= 1e-8 * g.norm(), "w = {w}");
        }
    }

    #[test]
    fn interpolates_at_converged_shifts() {
        let sys = system(30);
        let cfg = DamperConfig::new(vec![5], vec![100.0]);
        let res = sym2irka(&sys, &cfg, IrkaOptions { r: 10, max_iter: 100, ..Default::default() }).unwrap();
        assert!(res.state.converged, "change {}", res.state.shift_change);
        res.state.shifts.validate(1).unwrap();
        for (s, b) in res.state.shifts.shifts.iter().zip(&res.state.shifts.directions) {
            let g = sys.transfer(*s, &cfg).unwrap() * b;
            let gr = res.reduced.transfer(*s).unwrap() * b;
            assert!((&g - &gr).norm() <= 1e-6 * g.norm(), "{s}");
        }
        assert!(kernels::is_positive_definite(&res.reduced.k));
        assert!(kernels::is_positive_definite(&res.reduced.d));
    }

    #[test]
    fn fixed_point_after_convergence() {
        let sys = system(30);
        let cfg = DamperConfig::new(vec![5], vec![100.0]);
        let res = sym2irka(&sys, &cfg, IrkaOptions { r: 6, max_iter: 100, ..Default::default() }).unwrap();
        assert!(res.state.converged);
        let again = interpolation_basis(&sys, &cfg, &res.state.shifts).unwrap();
        let red = ReducedMatrices::galerkin(&sys, &sys.full_damping(&cfg).unwrap(), again.matrix());
        let next = fo_irka_update(&red, 6, Some(&res.state.shifts.shifts), 0).unwrap();
        let d = shift_distance(&res.state.shifts.shifts, &next.shifts);
        assert!(d <= 1e-4, "{d}");
    }

    #[test]
    fn single_mode_update_mirrors_its_poles() {
        let red = ReducedMatrices {
            m: Mat::identity(1, 1),
            d: Mat::from_element(1, 1, 0.4),
            k: Mat::from_element(1, 1, 4.0),
            b: Mat::from_element(1, 1, 1.0),
            c: Mat::from_element(1, 1, 1.0),
        };
        let set = fo_irka_update(&red, 2, None, 100).unwrap();
        assert_eq!(set.len(), 2);
        let im = (4.0f64 - 0.04).sqrt();
        let expected = [Complex64::new(0.2, -im), Complex64::new(0.2, im)];
        assert!(shift_distance(&set.shifts, &expected) < 1e-12);
        // exact conjugate pairing
        assert_eq!(set.shifts[0], set.shifts[1].conj());
        assert_eq!(set.directions[0], set.directions[1].map(|z| z.conj()));
    }

    #[test]
    fn shift_sets_are_conjugate_closed_for_odd_order() {
        let sys = system(20);
        let cfg = DamperConfig::new(vec![4, 15], vec![10.0, 300.0]);
        let res = sym2irka(&sys, &cfg, IrkaOptions { r: 5, max_iter: 30, ..Default::default() }).unwrap();
        res.state.shifts.validate(1).unwrap();
        let next = fo_irka_update(&res.reduced, 5, None, 100).unwrap();
        next.validate(1).unwrap();
    }

    #[test]
    fn hausdorff_distance() {
        let a = [Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0)];
        let b = [Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(4.0, 0.0)];
        assert_eq!(shift_distance(&a, &a), 0.0);
        assert!((shift_distance(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_orders() {
        let sys = system(10);
        let cfg = DamperConfig::new(vec![3], vec![1.0]);
        assert!(sym2irka(&sys, &cfg, IrkaOptions { r: 0, ..Default::default() }).is_err());
        assert!(sym2irka(&sys, &cfg, IrkaOptions { r: 11, ..Default::default() }).is_err());
    }
}
