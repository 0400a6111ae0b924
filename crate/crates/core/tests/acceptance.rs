//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every line is printed on a plain
//! `cargo test`. The full-scale check (9) runs only with
//! `DAMPOPT_FULL_SCALE=1` or `-- --ignored`.

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use dampopt::bench::{self, validate, RunConfig};
use dampopt::gramian;
use dampopt::irka::{sym2irka, IrkaOptions};
use dampopt::kernels::{self, Mat};
use dampopt::model::{make_example_1, DamperConfig, ModalSystem};
use dampopt::optimize::{FullModel, Method, Mode, Objective, ObjectiveSpec};
use dampopt::subspace::{build_vf, BasisSource, OrthoBasis, ProjectedSystem, Truncation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn example(n: usize) -> ModalSystem {
    make_example_1(n).unwrap().to_modal().unwrap()
}

fn worst(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget: f64) -> bool {
    elapsed.as_secs_f64() < budget
}

fn lyapunov_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errs = Vec::new();
    for i in 0..50 {
        let n = rng.random_range(1..=20);
        errs.push(validate::lyapunov_error(&mut rng, n, [0.005, 0.1, 0.5][i % 3]).map_err(|e| e.to_string())?);
    }
    let el = t.elapsed();
    let w = worst(&errs);
    check(w <= 1e-10 && within(el, 10.0), format!("50 cases, worst {w:.2e} (tol 1e-10), {:.2}s (budget 10s)", el.as_secs_f64()))
}

fn decomposition() -> Outcome {
    let t = Instant::now();
    let sys = example(40);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut res, mut wood) = (Vec::new(), Vec::new());
    for _ in 0..50 {
        let (r, w) = validate::decomposition_residuals(&sys, &mut rng).map_err(|e| e.to_string())?;
        res.push(r);
        wood.push(w);
    }
    let el = t.elapsed();
    let (r, w) = (worst(&res), worst(&wood));
    check(
        r <= 1e-8 && w <= 1e-10 && within(el, 30.0),
        format!("n = 40, 50 draws, residual {r:.2e} (tol 1e-8), woodbury {w:.2e} (tol 1e-10), {:.2}s (budget 30s)", el.as_secs_f64()),
    )
}

fn positions(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<usize> {
    let mut p = Vec::new();
    while p.len() < l {
        let k = rng.random_range(1..=n);
        if !p.contains(&k) {
            p.push(k);
        }
    }
    p
}

fn delta_oracle() -> Outcome {
    let t = Instant::now();
    let sys = example(40);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut errs = Vec::new();
    for i in 0..20 {
        let basis = if i % 2 == 0 {
            let r = rng.random_range(1..=15);
            let v = Mat::from_fn(40, r, |_, _| rng.random_range(-1.0..1.0));
            OrthoBasis::from_columns(&v, BasisSource::Imported, kernels::DEFAULT_DROP_TOL)
        } else {
            let other = positions(&mut rng, 40, 2);
            build_vf(&sys, &other, Truncation::EigenRelative(1e-3)).map_err(|e| e.to_string())?
        };
        let pos = positions(&mut rng, 40, 2);
        errs.push(validate::delta_error(&sys, &basis, &pos, false).map_err(|e| e.to_string())?);
    }
    let el = t.elapsed();
    let w = worst(&errs);
    check(w <= 1e-8 && within(el, 60.0), format!("n = 40, 20 pairs, worst {w:.2e} (tol 1e-8), {:.2}s (budget 60s)", el.as_secs_f64()))
}

fn block_identities() -> Outcome {
    let mut errs = Vec::new();
    for (n, pos) in [(10, vec![3]), (20, vec![2, 17]), (40, vec![5, 9]), (40, vec![1, 40])] {
        errs.extend(validate::block_identity_residuals(&example(n), &pos).map_err(|e| e.to_string())?);
    }
    let w = worst(&errs);
    check(w <= 1e-8, format!("4 systems up to n = 40, worst {w:.2e} (tol 1e-8)"))
}

fn full_span_exactness() -> Outcome {
    let sys = example(40);
    let cfg = DamperConfig::new(vec![7, 31], vec![1000.0, 1000.0]);
    let d = sys.full_damping(&cfg).map_err(|e| e.to_string())?;
    let k = Mat::from_diagonal(&sys.omega.map(|w| w * w));
    let p = gramian::position_controllability_gramian(&k, &d, &sys.b).map_err(|e| e.to_string())?;
    let r = gramian::psd_factor(&p, gramian::DEFAULT_FACTOR_TOL);
    let basis = OrthoBasis::from_columns(&r, BasisSource::Imported, kernels::DEFAULT_DROP_TOL);
    let jr = ProjectedSystem::new(&sys, &basis).response(&sys, &cfg).map_err(|e| e.to_string())?;
    let j = gramian::system_response(&sys, &cfg).map_err(|e| e.to_string())?;
    let rel = (jr - j).abs() / j;
    check(rel <= 1e-6, format!("n = 40, basis dim {}, |J_r - J|/J = {rel:.2e} (tol 1e-6)", basis.dim()))
}

fn interpolated_objective() -> Outcome {
    let sys = example(12);
    let cfg = DamperConfig::new(vec![3, 9], vec![1000.0, 1000.0]);
    let spec = ObjectiveSpec::new(Mode::Positions);
    let obj = Objective::new(&sys, &spec, &cfg, &FullModel, None).map_err(|e| e.to_string())?;
    let g = [1000.0, 1000.0];
    let (mut grid, mut limit) = (0.0f64, 0.0f64);
    for a in 1..=11usize {
        for b in 1..=11usize {
            if a == b {
                continue;
            }
            let j = obj.at_grid(&[a, b], &g).map_err(|e| e.to_string())?;
            let x = [a as f64, b as f64];
            let jhat = obj.interpolated(&x).map_err(|e| format!("{e:?}"))?;
            grid = grid.max((jhat - j).abs() / j);
            for (i, h) in [(0, 1e-12), (0, -1e-12), (1, 1e-12), (1, -1e-12)] {
                let mut y = x;
                y[i] = (y[i] + h).clamp(1.0, 11.0);
                let side = obj.interpolated(&y).map_err(|e| format!("{e:?}"))?;
                limit = limit.max((side - jhat).abs() / jhat);
            }
        }
    }
    check(
        grid == 0.0 && limit <= 1e-10,
        format!("12 masses, 110 grid points in [1, 11]^2, max grid mismatch {grid:.2e} (exact), max one-sided gap {limit:.2e} (tol 1e-10)"),
    )
}

fn irka_interpolation() -> Outcome {
    let sys = example(30);
    let cfg = DamperConfig::new(vec![2, 3], vec![1000.0, 1000.0]);
    let opts = IrkaOptions { r: 10, ..Default::default() };
    let res = sym2irka(&sys, &cfg, opts).map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    for (s, b) in res.state.shifts.shifts.iter().zip(&res.state.shifts.directions) {
        let g = sys.transfer(*s, &cfg).map_err(|e| e.to_string())? * b;
        let gr = res.reduced.transfer(*s).map_err(|e| e.to_string())? * b;
        err = err.max((&g - &gr).norm() / g.norm());
    }
    let mut spd = true;
    for it in 1..=res.state.iteration {
        let step = sym2irka(&sys, &cfg, IrkaOptions { max_iter: it, ..opts }).map_err(|e| e.to_string())?;
        spd &= kernels::is_positive_definite(&step.reduced.k) && kernels::is_positive_definite(&step.reduced.d);
    }
    check(
        res.state.converged && err <= 1e-6 && spd,
        format!(
            "n = 30, r = 10, converged {} after {} iterations, interpolation {err:.2e} (tol 1e-6), iterates SPD {spd}",
            res.state.converged, res.state.iteration
        ),
    )
}

fn desk_agreement() -> Outcome {
    let base = RunConfig::default();
    let p = base.prepare().map_err(|e| e.to_string())?;
    let n = p.sys.n();
    let run = |m: Method| bench::run_prepared(&p, m, base.seed).map_err(|f| format!("{}: {}", m.as_str(), f.error));
    let t = Instant::now();
    let full = run(Method::Full)?;
    let full_wall = t.elapsed();
    let c = &full.summary.positions;
    let mut lines = vec![format!(
        "n = {n}, full {:?} in {:.2}s (budget 600s)",
        c,
        full.timing.total()
    )];
    let mut ok = within(full_wall, 600.0);
    for m in [Method::Vf, Method::VfDelta, Method::Vh, Method::VhDelta] {
        let t = Instant::now();
        let rec = run(m)?;
        let wall = t.elapsed();
        let s = &rec.summary;
        let near = s.positions.len() == c.len() && s.positions.iter().zip(c).all(|(a, b)| a.abs_diff(*b) <= 2);
        let acc = full.timing.total() / rec.timing.total();
        let this = near && acc >= 3.0 && s.dim < n / 2 && within(wall, 180.0);
        ok &= this;
        lines.push(format!(
            "{} {} {:?} dim {} (< {}) acceleration {acc:.1}x (>= 3) {:.2}s (budget 180s)",
            if this { "ok" } else { "MISS" },
            m.as_str(),
            s.positions,
            s.dim,
            n / 2,
            wall.as_secs_f64()
        ));
    }
    check(ok, lines.join("; "))
}

fn full_scale() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let pos = RunConfig {
        full_scale: true,
        ..Default::default()
    };
    let p = pos.prepare().map_err(|e| e.to_string())?;
    for (m, want) in [
        (Method::Full, vec![vec![500, 990]]),
        (Method::Vf, vec![vec![501, 990], vec![500, 990]]),
    ] {
        let rec = bench::run_prepared(&p, m, 0).map_err(|f| f.error.to_string())?;
        let hit = want.contains(&rec.summary.positions);
        ok &= hit;
        lines.push(format!("positions {} {:?} (want {:?})", m.as_str(), rec.summary.positions, want));
    }
    let joint = RunConfig {
        full_scale: true,
        mode: Mode::PositionsAndGains,
        ..Default::default()
    };
    let p = joint.prepare().map_err(|e| e.to_string())?;
    let gains = [1.4234e3, 3.3809];
    for m in [Method::Full, Method::Vf, Method::VfDelta] {
        let rec = bench::run_prepared(&p, m, 0).map_err(|f| f.error.to_string())?;
        let s = &rec.summary;
        let hit = s.positions == [35, 395]
            && (m == Method::Full || s.gains.iter().zip(gains).all(|(g, w)| (g - w).abs() <= 1e-2 * w));
        ok &= hit;
        lines.push(format!("joint {} {:?} {:?}", m.as_str(), s.positions, s.gains));
    }
    check(ok, lines.join("; "))
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("dampopt-acceptance-{}", std::process::id()));
    let stems: Vec<PathBuf> = (0..2).map(|i| dir.join(format!("run{i}"))).collect();
    let mut files = Vec::new();
    for stem in &stems {
        let cfg = RunConfig {
            method: Method::VhDelta,
            n: Some(40),
            positions: Some(vec![3, 7]),
            output: Some(stem.clone()),
            ..Default::default()
        };
        let rec = bench::run(&cfg).map_err(|f| f.error.to_string())?;
        let paths = bench::write_outputs(stem, &rec).map_err(|e| e.to_string())?;
        let read = |p: &PathBuf| std::fs::read(p).map_err(|e| e.to_string());
        files.push([read(&paths.results)?, read(&paths.trace)?, read(&paths.deltas)?]);
    }
    let _ = std::fs::remove_dir_all(&dir);
    let same = files[0] == files[1];
    let bytes: usize = files[0].iter().map(Vec::len).sum();
    check(same, format!("two vh-delta runs at n = 40, {bytes} bytes of results, trace and deltas, identical {same}"))
}

fn main() {
    let full_scale_on = std::env::var("DAMPOPT_FULL_SCALE").is_ok_and(|v| v == "1")
        || std::env::args().any(|a| a == "--ignored" || a == "--include-ignored");
    let listing = std::env::args().any(|a| a == "--list");
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, lyapunov_oracle),
        (2, decomposition),
        (3, delta_oracle),
        (4, block_identities),
        (5, full_span_exactness),
        (6, interpolated_objective),
        (7, irka_interpolation),
        (8, desk_agreement),
        (9, full_scale),
        (10, determinism),
    ];
    if listing {
        for (k, _) in &criteria {
            println!("criterion_{k}: test");
        }
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, f) in criteria {
        if k == 9 && !full_scale_on {
            println!("criterion 9: SKIP full-scale run, set DAMPOPT_FULL_SCALE=1 to enable");
            continue;
        }
        let t = Instant::now();
        let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {k}: PASS {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {k}: FAIL {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
