//! Slow, independent reference computations used to validate the fast
//! solvers: vectorized Lyapunov solves, dense shifted solves and adaptive
//! frequency-domain quadrature of the H2 norm.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gramian;
use crate::kernels::{CMat, Mat};
use crate::model::{DamperConfig, ModalSystem};

/// Solve `A X + X Aᵀ = −G Gᵀ` as a linear system in the `N(N+1)/2`
/// independent entries of the symmetric `X`.
pub fn kronecker_lyapunov(a: &Mat, g: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let rhs = -(g * g.transpose());
    let idx = |i: usize, j: usize| {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        hi * (hi + 1) / 2 + lo
    };
    let m = n * (n + 1) / 2;
    let mut sys = Mat::zeros(m, m);
    let mut b = DVector::zeros(m);
    for j in 0..n {
        for i in 0..=j {
            let row = idx(i, j);
            b[row] = rhs[(i, j)];
            for k in 0..n {
                sys[(row, idx(k, j))] += a[(i, k)];
                sys[(row, idx(i, k))] += a[(j, k)];
            }
        }
    }
    let sol = sys
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("vectorized Lyapunov operator".into()))?;
    Ok(Mat::from_fn(n, n, |i, j| sol[idx(i, j)]))
}

/// `(s² I + s D̃(c,g) + Ω²)⁻¹ rhs` by dense LU.
pub fn shifted_solve(sys: &ModalSystem, cfg: &DamperConfig, s: Complex64, rhs: &CMat) -> Result<CMat> {
    let d = sys.full_damping(cfg)?;
    let mut pencil = d.map(|x| Complex64::new(x, 0.0) * s);
    for j in 0..sys.n() {
        pencil[(j, j)] += s * s + sys.omega[j] * sys.omega[j];
    }
    pencil
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Singular(format!("shifted pencil at s = {s}")))
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Gauss–Kronrod 7/15 estimate and error on `[a, b]`.
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    let (val, err) = gk15(f, a, b);
    if err <= tol || depth == 0 {
        return val;
    }
    let m = 0.5 * (a + b);
    adaptive(f, a, m, 0.5 * tol, depth - 1) + adaptive(f, m, b, 0.5 * tol, depth - 1)
}

/// H2 norm `sqrt((1/π) ∫₀^∞ ‖G(iw)‖²_F dw)` by adaptive quadrature in
/// `θ = atan(w)`, with breakpoints clustered at the resonances.
pub fn h2_quadrature(sys: &ModalSystem, cfg: &DamperConfig, rel_tol: f64) -> Result<f64> {
    let d = sys.full_damping(cfg)?;
    let k = Mat::from_diagonal(&sys.omega.map(|w| w * w));
    let a = gramian::first_order_matrix(&k, &d);
    let poles = nalgebra::Schur::try_new(a, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("Schur form of the first-order matrix".into()))?
        .complex_eigenvalues();
    let f = |theta: f64| -> f64 {
        if theta >= std::f64::consts::FRAC_PI_2 {
            return 0.0;
        }
        let w = theta.tan();
        let sec2 = 1.0 + w * w;
        match sys.transfer(Complex64::new(0.0, w), cfg) {
            Ok(g) => g.norm_squared() * sec2,
            Err(_) => f64::NAN,
        }
    };
    let mut breaks = vec![0.0, std::f64::consts::FRAC_PI_2];
    for p in poles.iter().filter(|p| p.im > 0.0) {
        for m in [-10.0, -3.0, -1.0, 0.0, 1.0, 3.0, 10.0] {
            let w = p.im + m * p.re.abs();
            if w > 0.0 {
                breaks.push(w.atan());
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
    let coarse: f64 = breaks.windows(2).map(|w| gk15(&f, w[0], w[1]).0).sum();
    if !coarse.is_finite() {
        return Err(Error::Singular("transfer function on the imaginary axis".into()));
    }
    let tol = rel_tol * coarse.abs();
    let total: f64 = breaks
        .windows(2)
        .map(|w| adaptive(&f, w[0], w[1], tol * (w[1] - w[0]) / std::f64::consts::FRAC_PI_2, 40))
        .sum();
    Ok((total / std::f64::consts::PI).sqrt())
}
