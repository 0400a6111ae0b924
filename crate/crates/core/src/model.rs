//! Vibrational systems `M ẍ + D(c,g) ẋ + K x = B u`, `y = C x`, their modal
//! form and the two built-in benchmark families.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, CMat, Mat};

pub const DEFAULT_ALPHA: f64 = 0.005;
pub const DEFAULT_GAIN_BOUNDS: (f64, f64) = (1e-3, 1e6);

/// Physical layout of an external damper family: maps 1-based positions to
/// the columns of `F(c)` (so that the external damping is `F G Fᵀ`).
pub trait DamperGeometry: Send + Sync + fmt::Debug {
    fn columns(&self, n: usize, positions: &[usize]) -> Result<Mat>;
}

#[derive(Debug, Clone, Default)]
pub enum DamperKind {
    /// Dampers connecting a single mass to the ground: `F(c) = [e_c₁, …]`.
    #[default]
    Grounded,
    Custom(Arc<dyn DamperGeometry>),
}

#[derive(Debug, Clone)]
pub struct PhysicalSystem {
    pub m: Mat,
    pub k: Mat,
    pub b: Mat,
    pub c: Mat,
    pub alpha: f64,
    pub damper_kind: DamperKind,
}

impl PhysicalSystem {
    pub fn new(m: Mat, k: Mat, b: Mat, c: Mat, alpha: f64) -> Result<Self> {
        let n = m.nrows();
        kernels::check_symmetric(&m, "M")?;
        kernels::check_symmetric(&k, "K")?;
        if k.nrows() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension(format!(
                "M is {n}x{n}, K is {:?}, B is {:?}, C is {:?}",
                k.shape(),
                b.shape(),
                c.shape()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        if !kernels::is_positive_definite(&m) {
            return Err(Error::NotPositiveDefinite("M".into()));
        }
        if !kernels::is_positive_definite(&k) {
            return Err(Error::NotPositiveDefinite("K".into()));
        }
        Ok(Self {
            m,
            k,
            b,
            c,
            alpha,
            damper_kind: DamperKind::Grounded,
        })
    }

    pub fn with_damper_kind(mut self, kind: DamperKind) -> Self {
        self.damper_kind = kind;
        self
    }

    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    /// `F(c)` in physical coordinates.
    pub fn damper_matrix(&self, positions: &[usize]) -> Result<Mat> {
        check_positions(self.n(), positions)?;
        match &self.damper_kind {
            DamperKind::Grounded => Ok(unit_columns(self.n(), positions)),
            DamperKind::Custom(geom) => geom.columns(self.n(), positions),
        }
    }

    /// Internal damping `2α M^{1/2} (M^{-1/2} K M^{-1/2})^{1/2} M^{1/2}`,
    /// a multiple of the critical damping.
    pub fn internal_damping(&self) -> Result<Mat> {
        let (mv, mq) = kernels::sym_eig(&self.m);
        let half = &mq * Mat::from_diagonal(&mv.map(f64::sqrt)) * mq.transpose();
        let inv_half = &mq * Mat::from_diagonal(&mv.map(|x| 1.0 / x.sqrt())) * mq.transpose();
        let inner = &inv_half * &self.k * &inv_half;
        let (kv, kq) = kernels::sym_eig(&inner);
        if kv.iter().any(|&x| x <= 0.0) {
            return Err(Error::NotPositiveDefinite("M^{-1/2} K M^{-1/2}".into()));
        }
        let sqrt_inner = &kq * Mat::from_diagonal(&kv.map(f64::sqrt)) * kq.transpose();
        let mut d = &half * sqrt_inner * &half * (2.0 * self.alpha);
        kernels::symmetrize(&mut d);
        Ok(d)
    }

    /// Full damping `D(c,g)` in physical coordinates.
    pub fn damping(&self, cfg: &DamperConfig) -> Result<Mat> {
        cfg.validate(self.n())?;
        let f = self.damper_matrix(&cfg.positions)?;
        let g = Mat::from_diagonal(&DVector::from_column_slice(&cfg.gains));
        Ok(self.internal_damping()? + &f * g * f.transpose())
    }

    /// `C (s² M + s D + K)⁻¹ B` by a dense complex solve.
    pub fn transfer(&self, s: Complex64, cfg: &DamperConfig) -> Result<CMat> {
        let d = self.damping(cfg)?;
        let cplx = |a: &Mat| a.map(|x| Complex64::new(x, 0.0));
        let pencil = cplx(&self.m) * (s * s) + cplx(&d) * s + cplx(&self.k);
        let x = pencil
            .lu()
            .solve(&cplx(&self.b))
            .ok_or_else(|| Error::Singular(format!("s^2 M + s D + K at s = {s}")))?;
        Ok(cplx(&self.c) * x)
    }

    pub fn to_modal(&self) -> Result<ModalSystem> {
        let eig = kernels::generalized_sym_eig(&self.k, &self.m)?;
        let omega = eig.eigenvalues.map(f64::sqrt);
        let phi = eig.vectors;
        Ok(ModalSystem {
            b: phi.tr_mul(&self.b),
            c: &self.c * &phi,
            omega,
            alpha: self.alpha,
            phi,
            damper_kind: self.damper_kind.clone(),
        })
    }
}

/// The system in modal coordinates: `ẍ + (2αΩ + F̃GF̃ᵀ) ẋ + Ω² x = B̃ u`,
/// `y = C̃ x`.
#[derive(Debug, Clone)]
pub struct ModalSystem {
    /// Ascending eigenfrequencies.
    pub omega: DVector<f64>,
    pub alpha: f64,
    pub b: Mat,
    pub c: Mat,
    pub phi: Mat,
    pub damper_kind: DamperKind,
}

impl ModalSystem {
    /// A system that is already modal (`Φ = I`).
    pub fn from_diagonal(omega: DVector<f64>, alpha: f64, b: Mat, c: Mat) -> Result<Self> {
        let n = omega.len();
        if b.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension("B and C must match the number of modes".into()));
        }
        if omega.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("eigenfrequencies must be positive".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            omega,
            alpha,
            b,
            c,
            phi: Mat::identity(n, n),
            damper_kind: DamperKind::Grounded,
        })
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `F̃(c) = Φᵀ F(c)` for 1-based positions.
    pub fn damper_columns(&self, positions: &[usize]) -> Result<Mat> {
        let n = self.n();
        check_positions(n, positions)?;
        match &self.damper_kind {
            DamperKind::Grounded => {
                let mut f = Mat::zeros(n, positions.len());
                for (j, &p) in positions.iter().enumerate() {
                    f.set_column(j, &self.phi.row(p - 1).transpose());
                }
                Ok(f)
            }
            DamperKind::Custom(geom) => {
                let f = geom.columns(n, positions)?;
                if f.shape() != (n, positions.len()) {
                    return Err(Error::Dimension(format!(
                        "damper geometry returned {:?}, expected ({n}, {})",
                        f.shape(),
                        positions.len()
                    )));
                }
                Ok(self.phi.tr_mul(&f))
            }
        }
    }

    /// Internal damping `2αΩ` as a vector of diagonal entries.
    pub fn internal_damping_diag(&self) -> DVector<f64> {
        &self.omega * (2.0 * self.alpha)
    }

    /// `D̃(c,g) = 2αΩ + F̃(c) G(g) F̃(c)ᵀ`.
    pub fn full_damping(&self, cfg: &DamperConfig) -> Result<Mat> {
        cfg.validate(self.n())?;
        let f = self.damper_columns(&cfg.positions)?;
        let g = Mat::from_diagonal(&DVector::from_column_slice(&cfg.gains));
        let mut d = &f * g * f.transpose();
        for (j, v) in self.internal_damping_diag().iter().enumerate() {
            d[(j, j)] += v;
        }
        kernels::symmetrize(&mut d);
        Ok(d)
    }

    /// `C̃ (s² I + s D̃ + Ω²)⁻¹ B̃` by a dense complex solve.
    pub fn transfer(&self, s: Complex64, cfg: &DamperConfig) -> Result<CMat> {
        let d = self.full_damping(cfg)?;
        let mut pencil = d.map(|x| Complex64::new(x, 0.0) * s);
        for j in 0..self.n() {
            pencil[(j, j)] += s * s + self.omega[j] * self.omega[j];
        }
        let rhs = self.b.map(|x| Complex64::new(x, 0.0));
        let x = pencil
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("s^2 I + s D + Omega^2 at s = {s}")))?;
        Ok(self.c.map(|x| Complex64::new(x, 0.0)) * x)
    }
}

/// Damper positions (1-based grid indices) and gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamperConfig {
    pub positions: Vec<usize>,
    pub gains: Vec<f64>,
    pub gain_bounds: Vec<(f64, f64)>,
}

impl DamperConfig {
    pub fn new(positions: Vec<usize>, gains: Vec<f64>) -> Self {
        let gain_bounds = vec![DEFAULT_GAIN_BOUNDS; gains.len()];
        Self {
            positions,
            gains,
            gain_bounds,
        }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.gain_bounds = vec![(lo, hi); self.gains.len()];
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.gains.len() != self.positions.len() || self.gain_bounds.len() != self.gains.len() {
            return Err(Error::InvalidConfig(format!(
                "{} positions, {} gains, {} bounds",
                self.positions.len(),
                self.gains.len(),
                self.gain_bounds.len()
            )));
        }
        check_positions(n, &self.positions)?;
        for (j, (&g, &(lo, hi))) in self.gains.iter().zip(&self.gain_bounds).enumerate() {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidConfig(format!("gain {} must be positive, got {g}", j + 1)));
            }
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidConfig(format!("gain bounds [{lo}, {hi}] invalid")));
            }
            if g < lo || g > hi {
                return Err(Error::InvalidConfig(format!(
                    "gain {} = {g} outside [{lo}, {hi}]",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

fn check_positions(n: usize, positions: &[usize]) -> Result<()> {
    for (i, &p) in positions.iter().enumerate() {
        if p < 1 || p > n {
            return Err(Error::InvalidConfig(format!("position {p} outside 1..={n}")));
        }
        if positions[..i].contains(&p) {
            return Err(Error::InvalidConfig(format!("duplicate damper position {p}")));
        }
    }
    Ok(())
}

fn unit_columns(n: usize, positions: &[usize]) -> Mat {
    let mut f = Mat::zeros(n, positions.len());
    for (j, &p) in positions.iter().enumerate() {
        f[(p - 1, j)] = 1.0;
    }
    f
}

/// MATLAB-style `logspace(a, b, k)`.
fn logspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![10f64.powf(b)],
        _ => (0..k)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (k - 1) as f64))
            .collect(),
    }
}

/// Grid index at `fraction · n`, clamped into `1..=n`.
pub(crate) fn scaled_index(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

fn selector_rows(n: usize, rows: &[usize]) -> Mat {
    let mut c = Mat::zeros(rows.len(), n);
    for (i, &r) in rows.iter().enumerate() {
        c[(i, r - 1)] = 1.0;
    }
    c
}

fn indicator_column(n: usize, rows: &[usize]) -> Mat {
    let mut b = Mat::zeros(n, 1);
    for &r in rows {
        b[(r - 1, 0)] = 1.0;
    }
    b
}

pub fn example_1_input_rows(n: usize) -> Vec<usize> {
    vec![scaled_index(0.001, n), scaled_index(0.5, n), n]
}

pub fn example_1_output_rows(n: usize) -> Vec<usize> {
    vec![scaled_index(0.01, n), scaled_index(0.5, n), scaled_index(0.99, n)]
}

/// Single row of masses joined by consecutive springs. At `n = 1000` the
/// inputs act on masses 1, 500, 1000 and the outputs read 10, 500, 990; other
/// sizes scale these placements proportionally.
pub fn make_example_1(n: usize) -> Result<PhysicalSystem> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "example 1 needs an even n >= 2, got {n}"
        )));
    }
    let half = logspace(-1.0, 1.0, n / 2);
    let masses: Vec<f64> = half.iter().chain(half.iter().rev()).copied().collect();
    let m = Mat::from_diagonal(&DVector::from_vec(masses));
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 40.0;
        if i + 1 < n {
            k[(i, i + 1)] = -20.0;
            k[(i + 1, i)] = -20.0;
        }
    }
    k[(0, 0)] = 24.0;
    k[(n - 1, n - 1)] = 20.0;
    let b = indicator_column(n, &example_1_input_rows(n));
    let c = selector_rows(n, &example_1_output_rows(n));
    PhysicalSystem::new(m, k, b, c, DEFAULT_ALPHA)
}

pub const EXAMPLE_2_SPRINGS: [f64; 4] = [20.0, 10.0, 5.0, 20.0];

pub fn example_2_output_rows(n: usize) -> Vec<usize> {
    [10.0, 450.0, 891.0]
        .iter()
        .map(|&r| scaled_index(r / 901.0, n))
        .collect()
}

/// Three rows of `n_row` masses each, joined at a common final mass, so that
/// `n = 3 n_row + 1`. All masses are driven by the input.
pub fn make_example_2(n_row: usize) -> Result<PhysicalSystem> {
    if n_row < 1 {
        return Err(Error::InvalidParameter("example 2 needs n_row >= 1".into()));
    }
    let n = 3 * n_row + 1;
    let first = logspace(3.0, 5.0, n.div_ceil(2));
    let second = logspace(3.0, 5.0, n / 2);
    let masses: Vec<f64> = first.iter().chain(second.iter().rev()).copied().collect();
    let m = Mat::from_diagonal(&DVector::from_vec(masses));
    let [k1, k2, k3, k4] = EXAMPLE_2_SPRINGS;
    let mut k = Mat::zeros(n, n);
    for (row, &ki) in [k1, k2, k3].iter().enumerate() {
        let off = row * n_row;
        for i in 0..n_row {
            k[(off + i, off + i)] = 2.0 * ki;
            if i + 1 < n_row {
                k[(off + i, off + i + 1)] = -ki;
                k[(off + i + 1, off + i)] = -ki;
            }
        }
        let last = off + n_row - 1;
        k[(last, n - 1)] = ki;
        k[(n - 1, last)] = ki;
    }
    k[(n - 1, n - 1)] = k1 + k2 + k3 + k4;
    let b = Mat::from_element(n, 1, 1.0);
    let c = selector_rows(n, &example_2_output_rows(n));
    PhysicalSystem::new(m, k, b, c, DEFAULT_ALPHA)
}

/// Read a dense matrix: a `rows cols` header followed by the entries in
/// row-major order, all whitespace separated.
pub fn parse_matrix(text: &str) -> Result<Mat> {
    let mut tokens = text.split_whitespace();
    let mut dim = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("missing {what} in matrix header")))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
    };
    let rows = dim("row count")?;
    let cols = dim("column count")?;
    let values: Vec<f64> = tokens
        .map(|t| t.parse().map_err(|e| Error::Parse(format!("bad entry `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    if values.len() != rows * cols {
        return Err(Error::Parse(format!(
            "expected {} entries for a {rows}x{cols} matrix, found {}",
            rows * cols,
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("matrix entries must be finite".into()));
    }
    Ok(Mat::from_row_slice(rows, cols, &values))
}

/// Inverse of [`parse_matrix`]; round-trips bit-exactly.
pub fn format_matrix(a: &Mat) -> String {
    let mut out = format!("{} {}\n", a.nrows(), a.ncols());
    for row in a.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    parse_matrix(&fs::read_to_string(path)?)
}

pub fn write_matrix(path: &Path, a: &Mat) -> Result<()> {
    fs::write(path, format_matrix(a))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    Custom,
}

/// Contents of a system definition file (TOML).
///
/// ```toml
/// example = "1"
/// n = 100
/// damper_count = 2
/// gain_bounds = [1e-3, 1e6]
/// ```
///
/// Custom systems name matrix files for `mass`, `stiffness`, `input` and
/// `output`, resolved relative to the definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub example: ExampleId,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub damper_count: Option<usize>,
    #[serde(default)]
    pub gain_bounds: Option<(f64, f64)>,
    /// 1-based rows driven by a single input column.
    #[serde(default)]
    pub input_rows: Option<Vec<usize>>,
    /// 1-based rows observed, one output each.
    #[serde(default)]
    pub output_rows: Option<Vec<usize>>,
    #[serde(default)]
    pub mass: Option<PathBuf>,
    #[serde(default)]
    pub stiffness: Option<PathBuf>,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl SystemSpec {
    pub fn example(example: ExampleId, n: usize) -> Self {
        Self {
            example,
            n: Some(n),
            alpha: None,
            damper_count: None,
            gain_bounds: None,
            input_rows: None,
            output_rows: None,
            mass: None,
            stiffness: None,
            input: None,
            output: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("system spec serializes")
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let spec = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((spec, base))
    }

    pub fn default_damper_count(&self) -> usize {
        self.damper_count.unwrap_or(match self.example {
            ExampleId::Two => 3,
            _ => 2,
        })
    }

    pub fn gain_bounds(&self) -> (f64, f64) {
        self.gain_bounds.unwrap_or(DEFAULT_GAIN_BOUNDS)
    }

    /// Assemble the physical system; relative matrix paths resolve against
    /// `base`.
    pub fn build(&self, base: &Path) -> Result<PhysicalSystem> {
        let mut sys = match self.example {
            ExampleId::One => make_example_1(self.n.unwrap_or(100))?,
            ExampleId::Two => {
                let n = self.n.unwrap_or(103);
                if n < 4 || (n - 1) % 3 != 0 {
                    return Err(Error::InvalidParameter(format!(
                        "example 2 needs n = 3 n_row + 1, got {n}"
                    )));
                }
                make_example_2((n - 1) / 3)?
            }
            ExampleId::Custom => {
                let load = |p: &Option<PathBuf>, what: &str| -> Result<Mat> {
                    let p = p.as_ref().ok_or_else(|| {
                        Error::InvalidConfig(format!("custom system needs `{what}`"))
                    })?;
                    read_matrix(&base.join(p))
                };
                let m = load(&self.mass, "mass")?;
                let k = load(&self.stiffness, "stiffness")?;
                let n = m.nrows();
                let b = match (&self.input, &self.input_rows) {
                    (Some(_), _) => load(&self.input, "input")?,
                    (None, Some(rows)) => {
                        check_rows(n, rows)?;
                        indicator_column(n, rows)
                    }
                    (None, None) => Mat::from_element(n, 1, 1.0),
                };
                let c = match (&self.output, &self.output_rows) {
                    (Some(_), _) => load(&self.output, "output")?,
                    (None, Some(rows)) => {
                        check_rows(n, rows)?;
                        selector_rows(n, rows)
                    }
                    (None, None) => Mat::identity(n, n),
                };
                if let Some(n_req) = self.n {
                    if n_req != n {
                        return Err(Error::Dimension(format!(
                            "n = {n_req} but mass matrix is {n}x{n}"
                        )));
                    }
                }
                PhysicalSystem::new(m, k, b, c, self.alpha.unwrap_or(DEFAULT_ALPHA))?
            }
        };
        if self.example != ExampleId::Custom {
            let n = sys.n();
            if let Some(rows) = &self.input_rows {
                check_rows(n, rows)?;
                sys.b = indicator_column(n, rows);
            }
            if let Some(rows) = &self.output_rows {
                check_rows(n, rows)?;
                sys.c = selector_rows(n, rows);
            }
            if let Some(alpha) = self.alpha {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
                }
                sys.alpha = alpha;
            }
        }
        Ok(sys)
    }
}

fn check_rows(n: usize, rows: &[usize]) -> Result<()> {
    match rows.iter().find(|&&r| r < 1 || r > n) {
        Some(r) => Err(Error::InvalidConfig(format!("row index {r} outside 1..={n}"))),
        None => Ok(()),
    }
}
