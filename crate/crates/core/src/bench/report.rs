use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optimize::{DeltaRecord, Method, Mode, TraceEntry};

use super::{RunSummary, Timing};

const RESULT_HEADER: [&str; 16] = [
    "system",
    "n",
    "method",
    "mode",
    "positions",
    "gains",
    "objective",
    "full_response",
    "dimension",
    "runs",
    "enrichments",
    "full_solves",
    "reduced_solves",
    "indicator_solves",
    "termination",
    "seed",
];

const TIMING_HEADER: [&str; 6] = ["system", "method", "mode", "basis_s", "optimization_s", "total_s"];

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

fn split<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad {what} entry `{t}`"))))
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    rec.get(i)
        .ok_or_else(|| Error::Parse(format!("missing column `{what}`")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad value for `{what}`")))
}

fn check_header(rdr: &mut csv::Reader<std::fs::File>, expected: &[&str], path: &Path) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    Ok(())
}

pub(super) fn write_results(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record([
            r.system.clone(),
            r.n.to_string(),
            r.method.as_str().into(),
            r.mode.as_str().into(),
            join(&r.positions),
            join(&r.gains),
            r.objective.to_string(),
            r.full_response.to_string(),
            r.dim.to_string(),
            r.runs.to_string(),
            r.enrichments.to_string(),
            r.full_solves.to_string(),
            r.reduced_solves.to_string(),
            r.indicator_solves.to_string(),
            r.termination.clone(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<RunSummary>> {
    let mut rdr = csv::Reader::from_path(path)?;
    check_header(&mut rdr, &RESULT_HEADER, path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let text = |i: usize| rec.get(i).unwrap_or_default().to_string();
        out.push(RunSummary {
            system: text(0),
            n: field(&rec, 1, "n")?,
            method: text(2).parse()?,
            mode: text(3).parse()?,
            positions: split(&text(4), "position")?,
            gains: split(&text(5), "gain")?,
            objective: field(&rec, 6, "objective")?,
            full_response: field(&rec, 7, "full_response")?,
            dim: field(&rec, 8, "dimension")?,
            runs: field(&rec, 9, "runs")?,
            enrichments: field(&rec, 10, "enrichments")?,
            full_solves: field(&rec, 11, "full_solves")?,
            reduced_solves: field(&rec, 12, "reduced_solves")?,
            indicator_solves: field(&rec, 13, "indicator_solves")?,
            termination: text(14),
            seed: field(&rec, 15, "seed")?,
        });
    }
    Ok(out)
}

pub(super) fn write_timings(path: &Path, rows: &[Timing]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TIMING_HEADER)?;
    for t in rows {
        w.write_record([
            t.system.clone(),
            t.method.as_str().into(),
            t.mode.as_str().into(),
            t.basis.to_string(),
            t.optimization.to_string(),
            t.total().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timings(path: &Path) -> Result<Vec<Timing>> {
    let mut rdr = csv::Reader::from_path(path)?;
    check_header(&mut rdr, &TIMING_HEADER, path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let text = |i: usize| rec.get(i).unwrap_or_default().to_string();
        out.push(Timing {
            system: text(0),
            method: text(1).parse()?,
            mode: text(2).parse()?,
            basis: field(&rec, 3, "basis_s")?,
            optimization: field(&rec, 4, "optimization_s")?,
        });
    }
    Ok(out)
}

pub(super) fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "iteration", "evaluations", "best_f", "best_x", "dimension"])?;
    for t in trace {
        w.write_record([
            t.run.to_string(),
            t.iteration.to_string(),
            t.evaluations.to_string(),
            t.best_f.to_string(),
            join(&t.best_x),
            t.dim.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub(super) fn write_deltas(path: &Path, deltas: &[DeltaRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["positions", "delta", "relative", "triggered"])?;
    for d in deltas {
        w.write_record([
            join(&d.positions),
            d.delta.to_string(),
            d.relative.to_string(),
            d.triggered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One method's column in a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub summary: RunSummary,
    pub time: Option<f64>,
    pub position_error: Option<f64>,
    pub gain_error: Option<f64>,
    pub acceleration: Option<f64>,
}

/// Runs on the same system and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub system: String,
    pub mode: Mode,
    pub columns: Vec<Column>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub groups: Vec<Group>,
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Join runs on system and mode and measure each against the full-order
/// run of its group: relative position and gain errors, and the ratio of
/// full to reduced time. Groups without a full-order run omit these with a
/// notice.
pub fn compare(runs: &[(RunSummary, Option<Timing>)]) -> Comparison {
    let mut groups: Vec<Group> = Vec::new();
    for (s, t) in runs {
        let col = Column {
            summary: s.clone(),
            time: t.as_ref().map(Timing::total),
            position_error: None,
            gain_error: None,
            acceleration: None,
        };
        match groups.iter_mut().find(|g| g.system == s.system && g.mode == s.mode) {
            Some(g) => g.columns.push(col),
            None => groups.push(Group {
                system: s.system.clone(),
                mode: s.mode,
                columns: vec![col],
                notice: None,
            }),
        }
    }
    for g in &mut groups {
        g.columns
            .sort_by_key(|c| Method::ALL.iter().position(|m| *m == c.summary.method));
        let Some(base) = g.columns.iter().find(|c| c.summary.method == Method::Full).cloned() else {
            g.notice = Some(format!(
                "no full-order run for {} ({}); errors and acceleration omitted",
                g.system,
                g.mode.as_str()
            ));
            continue;
        };
        let pos = |s: &RunSummary| s.positions.iter().map(|&p| p as f64).collect::<Vec<_>>();
        for c in &mut g.columns {
            if c.summary.method == Method::Full {
                continue;
            }
            c.position_error = Some(relative_error(&pos(&c.summary), &pos(&base.summary)));
            if g.mode == Mode::PositionsAndGains {
                c.gain_error = Some(relative_error(&c.summary.gains, &base.summary.gains));
            }
            c.acceleration = match (base.time, c.time) {
                (Some(tf), Some(tr)) if tr > 0.0 => Some(tf / tr),
                _ => None,
            };
        }
        if base.time.is_none() {
            g.notice = Some("full-order timing missing; acceleration omitted".into());
        }
    }
    Comparison { groups }
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Full => "Original",
        Method::Vf => "V_F",
        Method::VfDelta => "V_F with Delta",
        Method::Vh => "V_H",
        Method::VhDelta => "V_H with Delta",
    }
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

impl Comparison {
    /// Tables with rows Time / Dimension / Position / Gain / Error /
    /// Acceleration, one column per method.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let _ = writeln!(out, "{} ({})", g.system, g.mode.as_str());
            let mut rows: Vec<(String, Vec<String>)> = vec![
                ("".into(), g.columns.iter().map(|c| method_label(c.summary.method).into()).collect()),
                ("Time [s]".into(), g.columns.iter().map(|c| opt(c.time, |t| format!("{t:.2e}"))).collect()),
                ("Dimension".into(), g.columns.iter().map(|c| c.summary.dim.to_string()).collect()),
                (
                    "Position".into(),
                    g.columns
                        .iter()
                        .map(|c| c.summary.positions.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", "))
                        .collect(),
                ),
                (
                    "Gain".into(),
                    g.columns
                        .iter()
                        .map(|c| c.summary.gains.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(", "))
                        .collect(),
                ),
            ];
            let err = |v: Option<f64>| opt(v, |e| format!("{e:.1e}"));
            if g.mode == Mode::PositionsAndGains {
                rows.push(("Error position".into(), g.columns.iter().map(|c| err(c.position_error)).collect()));
                rows.push(("Error gain".into(), g.columns.iter().map(|c| err(c.gain_error)).collect()));
            } else {
                rows.push(("Error".into(), g.columns.iter().map(|c| err(c.position_error)).collect()));
            }
            rows.push((
                "Acceleration".into(),
                g.columns.iter().map(|c| opt(c.acceleration, |a| format!("{a:.1}"))).collect(),
            ));
            let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
            let widths: Vec<usize> = (0..g.columns.len())
                .map(|j| rows.iter().map(|r| r.1[j].chars().count()).max().unwrap_or(0))
                .collect();
            for (name, cells) in &rows {
                let _ = write!(out, "{name:<w0$}");
                for (cell, w) in cells.iter().zip(&widths) {
                    let _ = write!(out, " | {cell:>w$}");
                }
                out.push('\n');
            }
            if let Some(n) = &g.notice {
                let _ = writeln!(out, "note: {n}");
            }
            out.push('\n');
        }
        out
    }

    /// Machine-readable form of [`Comparison::render`], full precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "system",
            "mode",
            "method",
            "time_s",
            "dimension",
            "positions",
            "gains",
            "position_error",
            "gain_error",
            "acceleration",
        ])?;
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for g in &self.groups {
            for c in &g.columns {
                w.write_record([
                    g.system.clone(),
                    g.mode.as_str().into(),
                    c.summary.method.as_str().into(),
                    o(c.time),
                    c.summary.dim.to_string(),
                    join(&c.summary.positions),
                    join(&c.summary.gains),
                    o(c.position_error),
                    o(c.gain_error),
                    o(c.acceleration),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(method: Method, positions: Vec<usize>, gains: Vec<f64>) -> RunSummary {
        RunSummary {
            system: "example-1 n=100".into(),
            n: 100,
            method,
            mode: Mode::PositionsAndGains,
            positions,
            gains,
            objective: 3.25,
            full_response: 3.5,
            dim: 40,
            runs: 2,
            enrichments: 1,
            full_solves: 0,
            reduced_solves: 10,
            indicator_solves: 0,
            termination: "outer-converged".into(),
            seed: 7,
        }
    }

    fn timing(method: Method, t: f64) -> Timing {
        Timing {
            system: "example-1 n=100".into(),
            method,
            mode: Mode::PositionsAndGains,
            basis: 0.0,
            optimization: t,
        }
    }

    #[test]
    fn identical_runs_compare_to_zero_error() {
        let full = summary(Method::Full, vec![5, 9], vec![1e3, 2.0]);
        let mut vf = full.clone();
        vf.method = Method::Vf;
        let c = compare(&[(vf, Some(timing(Method::Vf, 2.0))), (full, Some(timing(Method::Full, 2.0)))]);
        let g = &c.groups[0];
        assert_eq!(g.columns[0].summary.method, Method::Full);
        assert_eq!(g.columns[1].position_error, Some(0.0));
        assert_eq!(g.columns[1].gain_error, Some(0.0));
        assert_eq!(g.columns[1].acceleration, Some(1.0));
        assert!(g.notice.is_none());
    }

    #[test]
    fn errors_and_acceleration() {
        let full = summary(Method::Full, vec![3, 4], vec![3.0, 4.0]);
        let red = summary(Method::VhDelta, vec![3, 5], vec![3.0, 4.5]);
        let c = compare(&[(full, Some(timing(Method::Full, 10.0))), (red, Some(timing(Method::VhDelta, 2.5)))]);
        let col = &c.groups[0].columns[1];
        assert!((col.position_error.unwrap() - 0.2).abs() < 1e-15);
        assert!((col.gain_error.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(col.acceleration, Some(4.0));
        let text = c.render();
        for row in ["Time", "Dimension", "Position", "Gain", "Error position", "Error gain", "Acceleration"] {
            assert!(text.contains(row), "{row}");
        }
        assert!(text.contains("4.0"));
    }

    #[test]
    fn missing_baseline_is_noted() {
        let red = summary(Method::Vf, vec![3, 5], vec![3.0, 4.5]);
        let c = compare(&[(red, None)]);
        assert!(c.groups[0].columns[0].acceleration.is_none());
        assert!(c.groups[0].notice.as_ref().unwrap().contains("no full-order run"));
        assert!(c.render().contains("note: no full-order run"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("dampopt-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let rows = vec![
            summary(Method::Full, vec![1, 50], vec![1000.0, 0.1 + 0.2]),
            summary(Method::VfDelta, vec![2, 50], vec![1e-3, 1e6]),
        ];
        let p = dir.join("r.csv");
        write_results(&p, &rows).unwrap();
        assert_eq!(read_results(&p).unwrap(), rows);
        let ts = vec![timing(Method::Full, 1.25)];
        let q = dir.join("t.csv");
        write_timings(&q, &ts).unwrap();
        assert_eq!(read_timings(&q).unwrap(), ts);
        std::fs::write(&q, "a,b\n1,2\n").unwrap();
        assert!(read_timings(&q).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
