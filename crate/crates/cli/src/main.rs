use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dampopt::bench::{self, validate, BatchFile, RunConfig, RunRecord};
use dampopt::indicator::Normalization;
use dampopt::model::{write_matrix, ExampleId, SystemSpec};
use dampopt::optimize::{Method, Mode, PositionObjective};
use dampopt::subspace::Truncation;
use dampopt::{par, Error};

const THREADS_VAR: &str = "DAMPOPT_THREADS";

#[derive(Parser)]
#[command(name = "dampopt", version, about = "Damper position and gain optimization with reduced bases")]
#[command(after_help = "Set DAMPOPT_THREADS to fix the number of worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one configuration, or a batch of them.
    Run(RunArgs),
    /// Tabulate result files against their full-order runs.
    Compare(CompareArgs),
    /// Check the solvers against dense oracles on small instances.
    Validate(ValidateArgs),
    /// Write a benchmark system as matrix files plus a definition file.
    MakeSystem(MakeSystemArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

impl From<ExampleArg> for ExampleId {
    fn from(e: ExampleArg) -> Self {
        match e {
            ExampleArg::One => ExampleId::One,
            ExampleArg::Two => ExampleId::Two,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Full,
    Vf,
    VfDelta,
    Vh,
    VhDelta,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Full => Method::Full,
            MethodArg::Vf => Method::Vf,
            MethodArg::VfDelta => Method::VfDelta,
            MethodArg::Vh => Method::Vh,
            MethodArg::VhDelta => Method::VhDelta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Positions,
    #[value(name = "positions+gains")]
    PositionsGains,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    ReducedTrace,
    FullTrace,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Rounded,
    Interpolated,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    EigenRelative,
    TraceFraction,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    /// Base configuration (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Batch file with `[[run]]` entries, run on parallel workers.
    #[arg(long, conflicts_with = "config")]
    batch: Option<PathBuf>,
    #[arg(long, value_enum)]
    example: Option<ExampleArg>,
    #[arg(short, long)]
    n: Option<usize>,
    /// System definition file instead of a built-in example.
    #[arg(long)]
    system: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Initial positions, comma separated (1-based).
    #[arg(long, value_delimiter = ',')]
    positions: Option<Vec<usize>>,
    /// Initial gains, comma separated.
    #[arg(long, value_delimiter = ',')]
    gains: Option<Vec<f64>>,
    #[arg(long)]
    tol_opt: Option<f64>,
    #[arg(long)]
    tol_err1: Option<f64>,
    #[arg(long)]
    tol_err2: Option<f64>,
    #[arg(long, value_enum)]
    truncation_rule: Option<RuleArg>,
    #[arg(long)]
    truncation_tol: Option<f64>,
    #[arg(long)]
    irka_order: Option<usize>,
    #[arg(long)]
    irka_max_iter: Option<usize>,
    #[arg(long, value_enum)]
    normalization: Option<NormArg>,
    #[arg(long, value_enum)]
    position_objective: Option<ObjectiveArg>,
    #[arg(long)]
    max_eval: Option<usize>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file stem; results go to `<stem>.results.csv` and siblings.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Use the full benchmark dimensions (n = 1000 and 901). Slow.
    #[arg(long)]
    full_scale: bool,
}

impl RunArgs {
    fn apply(&self, mut c: RunConfig) -> RunConfig {
        if let Some(e) = self.example {
            c.example = e.into();
        }
        if self.n.is_some() {
            c.n = self.n;
        }
        if self.system.is_some() {
            c.system_file = self.system.clone();
        }
        if let Some(m) = self.method {
            c.method = m.into();
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Positions => Mode::Positions,
                ModeArg::PositionsGains => Mode::PositionsAndGains,
            };
        }
        if self.positions.is_some() {
            c.positions = self.positions.clone();
        }
        if self.gains.is_some() {
            c.gains = self.gains.clone();
        }
        if let Some(t) = self.tol_opt {
            c.tol_opt = t;
        }
        if let Some(t) = self.tol_err1 {
            c.tol_err1 = t;
        }
        if self.tol_err2.is_some() {
            c.tol_err2 = self.tol_err2;
        }
        let (rule, tol) = match c.truncation {
            Truncation::EigenRelative(t) => (RuleArg::EigenRelative, t),
            Truncation::TraceFraction(t) => (RuleArg::TraceFraction, t),
        };
        let tol = self.truncation_tol.unwrap_or(tol);
        c.truncation = match self.truncation_rule.unwrap_or(rule) {
            RuleArg::EigenRelative => Truncation::EigenRelative(tol),
            RuleArg::TraceFraction => Truncation::TraceFraction(tol),
        };
        if self.irka_order.is_some() {
            c.irka_order = self.irka_order;
        }
        if let Some(k) = self.irka_max_iter {
            c.irka_max_iter = k;
        }
        if let Some(nm) = self.normalization {
            c.normalization = match nm {
                NormArg::ReducedTrace => Normalization::ReducedTrace,
                NormArg::FullTrace => Normalization::FullTrace,
            };
        }
        if let Some(p) = self.position_objective {
            c.position_objective = Some(match p {
                ObjectiveArg::Rounded => PositionObjective::Rounded,
                ObjectiveArg::Interpolated => PositionObjective::Interpolated,
            });
        }
        if let Some(k) = self.max_eval {
            c.max_eval = k;
        }
        if let Some(k) = self.max_outer {
            c.max_outer = k;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        c.full_scale |= self.full_scale;
        c
    }
}

#[derive(Args)]
struct CompareArgs {
    /// `<stem>.results.csv` files; timings are read from the sibling
    /// `<stem>.timings.csv` when present.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Also write the comparison as CSV.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(short, long, default_value_t = validate::MAX_N)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Flip the sign of the damper term in the indicator.
    #[arg(long, hide = true)]
    mutate_delta: bool,
}

#[derive(Args)]
struct MakeSystemArgs {
    #[arg(long, value_enum, default_value = "1")]
    example: ExampleArg,
    #[arg(short, long)]
    n: Option<usize>,
    #[arg(long)]
    full_scale: bool,
    /// Directory for `mass.txt`, `stiffness.txt`, `input.txt`,
    /// `output.txt` and `system.toml`.
    #[arg(short, long)]
    output: PathBuf,
}

/// Usage problems exit with 2, failures during a run with 1.
enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidParameter(_) | Error::Parse(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn warn_scale(cfg: &RunConfig) {
    let big = cfg.full_scale || cfg.n.is_some_and(|n| n >= 900);
    if big && cfg.system_file.is_none() {
        eprintln!("warning: full benchmark scale; full-order runs can take many hours");
    }
}

fn emit(rec: &RunRecord, output: Option<&Path>) -> Result<(), Failure> {
    print!("{}", bench::single_table(rec));
    for w in &rec.report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(stem) = output {
        let paths = bench::write_outputs(stem, rec)?;
        eprintln!("wrote {}", paths.results.display());
    }
    Ok(())
}

fn fail_run(cfg: &RunConfig, f: bench::RunFailure) -> Failure {
    if let Some(stem) = &cfg.output {
        match bench::write_partial_trace(stem, &f.trace) {
            Ok(p) => eprintln!("partial trace written to {}", p.display()),
            Err(e) => eprintln!("could not write partial trace: {e}"),
        }
    }
    Failure::from(f.error)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    if let Some(path) = &args.batch {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let batch = BatchFile::from_toml(&text)?;
        let cfgs: Vec<RunConfig> = batch.run.into_iter().map(|c| args.apply(c)).collect();
        for c in &cfgs {
            warn_scale(c);
            c.prepare()?;
        }
        let mut rows = Vec::new();
        let mut failed = None;
        for (cfg, res) in cfgs.iter().zip(bench::run_batch(&cfgs)) {
            match res {
                Ok(rec) => {
                    if let Some(stem) = &cfg.output {
                        bench::write_outputs(stem, &rec)?;
                    }
                    rows.push((rec.summary, Some(rec.timing)));
                }
                Err(f) => {
                    let msg = f.error.to_string();
                    eprintln!("error: {} run failed: {msg}", cfg.method.as_str());
                    failed = Some(fail_run(cfg, f));
                }
            }
        }
        print!("{}", bench::compare(&rows).render());
        return failed.map_or(Ok(()), Err);
    }
    let base = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    let cfg = args.apply(base);
    warn_scale(&cfg);
    cfg.prepare()?;
    match bench::run(&cfg) {
        Ok(rec) => emit(&rec, cfg.output.as_deref()),
        Err(f) => Err(fail_run(&cfg, f)),
    }
}

fn results_sibling(path: &Path) -> Option<PathBuf> {
    let s = path.to_str()?;
    s.strip_suffix(".results.csv").map(|stem| PathBuf::from(format!("{stem}.timings.csv")))
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for path in &args.results {
        let summaries = bench::read_results(path)?;
        let timings = match results_sibling(path).filter(|p| p.exists()) {
            Some(t) => bench::read_timings(&t)?,
            None => Vec::new(),
        };
        for s in summaries {
            let t = timings
                .iter()
                .find(|t| t.system == s.system && t.method == s.method && t.mode == s.mode)
                .cloned();
            rows.push((s, t));
        }
    }
    let cmp = bench::compare(&rows);
    print!("{}", cmp.render());
    if let Some(out) = &args.output {
        cmp.write_csv(out)?;
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    let results = validate::validate(&validate::ValidateOptions {
        n: args.n,
        seed: args.seed,
        mutate_delta: args.mutate_delta,
    })?;
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Run("validation failed".into()))
    }
}

fn cmd_make_system(args: MakeSystemArgs) -> Result<(), Failure> {
    let id: ExampleId = args.example.into();
    let n = args.n.unwrap_or(if args.full_scale {
        bench::full_dimension(id)
    } else {
        bench::desk_dimension(id)
    });
    let sys = SystemSpec::example(id, n).build(Path::new(""))?;
    std::fs::create_dir_all(&args.output).map_err(Error::from)?;
    let names = ["mass.txt", "stiffness.txt", "input.txt", "output.txt"];
    for (name, m) in names.iter().zip([&sys.m, &sys.k, &sys.b, &sys.c]) {
        write_matrix(&args.output.join(name), m)?;
    }
    let mut spec = SystemSpec::example(ExampleId::Custom, n);
    spec.alpha = Some(sys.alpha);
    spec.damper_count = Some(SystemSpec::example(id, n).default_damper_count());
    spec.mass = Some(names[0].into());
    spec.stiffness = Some(names[1].into());
    spec.input = Some(names[2].into());
    spec.output = Some(names[3].into());
    let def = args.output.join("system.toml");
    std::fs::write(&def, spec.to_toml()).map_err(Error::from)?;
    println!("{}", def.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        match v.parse::<usize>() {
            Ok(0) | Err(_) => {
                eprintln!("error: {THREADS_VAR} must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
            Ok(1) => par::set_enabled(false),
            Ok(k) => par::init_threads(k),
        }
    }
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Validate(a) => cmd_validate(a),
        Command::MakeSystem(a) => cmd_make_system(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
