use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cocreg::baseline::{fit_cpca_reg, DEFAULT_FRACTION};
use cocreg::components::{dfd, select_k, DEFAULT_THRESHOLD};
use cocreg::inference::{bootstrap_pairs, BootstrapResult};
use cocreg::io::{read_dataset, read_json, write_dataset, write_gz_csv, write_json, write_table_csv, Cell};
use cocreg::simgen::{generate_cohort, run_grid, run_monte_carlo, BootstrapSettings, MethodConfig, MetricsReport, SimScenario};
use cocreg::solver::Selection;
use cocreg::{estimate_covariances, fit_sequence_pairs, CocregError, ConstraintMode, FitSequence, SolverConfig};
use serde::{Deserialize, Serialize};

mod loadings;

#[derive(Parser, Debug)]
#[command(name = "cocreg", version, about = "Covariance-on-covariance regression")]
struct Cli {
    /// Worker threads for restarts and replicates (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a sequence of components and select their number by DfD.
    Fit(FitArgs),
    /// Subject-level bootstrap intervals for (alpha, beta) of fitted components.
    Bootstrap(BootstrapArgs),
    /// Monte-Carlo study on a preset or scenario file.
    Simulate(SimulateArgs),
    /// Evaluate DfD for a loadings file against a dataset.
    Dfd(DfdArgs),
    /// Common-PCA regression baseline.
    Baseline(BaselineArgs),
    /// Write one simulated cohort in the dataset layout.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConstraintArg {
    Identity,
    Pooled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectionArg {
    RSquared,
    Objective,
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// JSON solver configuration; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "COCREG_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    constraint: Option<ConstraintArg>,
    /// Random restarts per component.
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Skip the pooled-eigenvector starts.
    #[arg(long)]
    no_eigen_init: bool,
    /// Rule for choosing among restarts.
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
}

impl SolverArgs {
    fn resolve(&self) -> Result<SolverConfig, CocregError> {
        let mut c: SolverConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => SolverConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.constraint {
            c.constraint_mode = match m {
                ConstraintArg::Identity => ConstraintMode::Identity,
                ConstraintArg::Pooled => ConstraintMode::Pooled,
            };
        }
        if let Some(r) = self.restarts {
            c.n_restarts = r;
        }
        if let Some(t) = self.tol {
            c.tol = t;
        }
        if let Some(m) = self.max_iter {
            c.max_iter = m;
        }
        if self.no_eigen_init {
            c.eigen_init = false;
        }
        if let Some(s) = self.selection {
            c.selection = match s {
                SelectionArg::RSquared => Selection::RSquared,
                SelectionArg::Objective => Selection::Objective,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    max_k: usize,
    /// DfD threshold.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    rho: f64,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[arg(long)]
    data: PathBuf,
    /// fit.json written by `cocreg fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "replicates", short = 'B', default_value_t = 500)]
    replicates: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, env = "COCREG_SEED", default_value_t = 0)]
    seed: u64,
    /// Components to bootstrap, 1-based (default: all fitted).
    #[arg(long, value_delimiter = ',')]
    components: Vec<usize>,
    /// Also write draws.csv.gz.
    #[arg(long)]
    draws: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum BaselineKind {
    CpcaReg,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    preset: Option<String>,
    /// JSON scenario file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    #[arg(long, env = "COCREG_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Sample-size grid, e.g. `n=50,100,200` (n = u = v) or `50x40x30,100x80x60`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineKind>,
    /// Bootstrap replicates per fitted component (0 = none).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 3)]
    max_k: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    rho: f64,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
}

#[derive(Args, Debug)]
struct DfdArgs {
    #[arg(long)]
    data: PathBuf,
    /// loadings.csv written by `cocreg fit`.
    #[arg(long)]
    loadings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    rho: f64,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Variance share the retained common components must exceed.
    #[arg(long, default_value_t = DEFAULT_FRACTION)]
    fraction: f64,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, env = "COCREG_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct CoefficientInterval {
    coefficient: String,
    estimate: f64,
    lower: f64,
    upper: f64,
    se: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentIntervals {
    component: usize,
    replicates: usize,
    failed: usize,
    redraws: usize,
    coefficients: Vec<CoefficientInterval>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CiReport {
    level: f64,
    seed: u64,
    components: Vec<ComponentIntervals>,
}

#[derive(Debug, Serialize)]
struct DfdReport {
    threshold: f64,
    selected_k: usize,
    trace: Vec<cocreg::components::DfdValue>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Dfd(a) => cmd_dfd(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

fn prepare_out(dir: &Path) -> Result<(), CocregError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn table_file(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), CocregError> {
    let f = fs::File::create(path)?;
    write_table_csv(std::io::BufWriter::new(f), header, rows)
}

fn cmd_fit(a: &FitArgs) -> Result<(), CocregError> {
    let config = a.solver.resolve()?;
    let cohort = read_dataset(&a.data)?;
    let pairs = estimate_covariances(&cohort)?;
    let seq = fit_sequence_pairs(&pairs, &cohort.covariates(), &config, a.max_k, a.rho)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("fit.json"), &seq)?;
    table_file(&a.out.join("loadings.csv"), &loadings::HEADER, &loadings::rows(&seq))?;
    let names = BootstrapResult::coefficient_names(cohort.r());
    let mut rows = Vec::new();
    for (k, c) in seq.components.iter().enumerate() {
        for (j, name) in names.iter().enumerate() {
            let v = if j == 0 { c.alpha } else { c.beta[j - 1] };
            rows.push(vec![Cell::from(k + 1), Cell::from(name.as_str()), Cell::from(v)]);
        }
    }
    table_file(&a.out.join("coefficients.csv"), &["component", "coefficient", "estimate"], &rows)?;
    log::info!("fitted {} components, selected k = {}", seq.components.len(), seq.selected_k);
    Ok(())
}

fn cmd_bootstrap(a: &BootstrapArgs) -> Result<(), CocregError> {
    let seq: FitSequence = read_json(&a.fit)?;
    let cohort = read_dataset(&a.data)?;
    let pairs = estimate_covariances(&cohort)?;
    let covs = cohort.covariates();
    let wanted: Vec<usize> = if a.components.is_empty() {
        (1..=seq.components.len()).collect()
    } else {
        a.components.clone()
    };
    let mut report = CiReport { level: a.level, seed: a.seed, components: Vec::new() };
    let mut draw_rows: Vec<Vec<f64>> = Vec::new();
    let names = BootstrapResult::coefficient_names(cohort.r());
    for &k in &wanted {
        let fit = seq.components.get(k.wrapping_sub(1)).ok_or_else(|| {
            CocregError::Validation(format!("component {k} not in fit file ({} components)", seq.components.len()))
        })?;
        if fit.gamma.len() != cohort.q() || fit.theta.len() != cohort.p() || fit.beta.len() != cohort.r() {
            return Err(CocregError::Validation(format!("component {k} does not match the dataset dimensions")));
        }
        let seed = cocreg::simgen::derive_seed(a.seed, k as u64);
        let b = bootstrap_pairs(&pairs, &covs, fit, a.replicates, a.level, seed)?;
        let se = b.standard_errors();
        report.components.push(ComponentIntervals {
            component: k,
            replicates: b.draws.nrows(),
            failed: b.failed,
            redraws: b.redraws,
            coefficients: names
                .iter()
                .enumerate()
                .map(|(j, name)| CoefficientInterval {
                    coefficient: name.clone(),
                    estimate: b.estimate[j],
                    lower: b.intervals[j].0,
                    upper: b.intervals[j].1,
                    se: se[j],
                })
                .collect(),
        });
        for row in b.draws.row_iter() {
            draw_rows.push(std::iter::once(k as f64).chain(row.iter().copied()).collect());
        }
    }
    prepare_out(&a.out)?;
    write_json(&a.out.join("ci.json"), &report)?;
    if a.draws {
        let header: Vec<String> = std::iter::once("component".to_string()).chain(names).collect();
        let m = nalgebra::DMatrix::from_fn(draw_rows.len(), header.len(), |i, j| draw_rows[i][j]);
        write_gz_csv(&a.out.join("draws.csv.gz"), &header, &m)?;
    }
    Ok(())
}

/// Parses `n=50,100,200` (n = u = v) or `50x40x30,...` triples.
fn parse_grid(spec: &str) -> Result<Vec<(usize, usize, usize)>, CocregError> {
    let body = spec.trim().strip_prefix("n=").unwrap_or(spec.trim());
    let bad = || CocregError::Validation(format!("cannot parse grid `{spec}`"));
    let mut out = Vec::new();
    for item in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<usize> = item.split('x').map(|s| s.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        out.push(match parts.as_slice() {
            [k] => (*k, *k, *k),
            [n, u, v] => (*n, *u, *v),
            _ => return Err(bad()),
        });
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CocregError> {
    let scenario = match (&a.preset, &a.scenario) {
        (Some(name), _) => SimScenario::preset(name)?,
        (None, Some(path)) => read_json(path)?,
        (None, None) => return Err(CocregError::Validation("either --preset or --scenario is required".into())),
    };
    scenario.validate()?;
    let mut solver = SolverConfig::default();
    if let Some(r) = a.restarts {
        solver.n_restarts = r;
    }
    if let Some(s) = a.selection {
        solver.selection = match s {
            SelectionArg::RSquared => Selection::RSquared,
            SelectionArg::Objective => Selection::Objective,
        };
    }
    let method = MethodConfig {
        solver,
        max_k: a.max_k,
        threshold: a.rho,
        bootstrap: (a.bootstrap > 0).then_some(BootstrapSettings { replicates: a.bootstrap, level: a.level }),
        baseline: a.baseline == Some(BaselineKind::CpcaReg),
        ..MethodConfig::default()
    };
    let reports: Vec<MetricsReport> = match &a.grid {
        Some(g) => run_grid(&scenario, &method, &parse_grid(g)?, a.replicates, a.seed)?,
        None => vec![run_monte_carlo(&scenario, &method, a.replicates, a.seed)?],
    };
    prepare_out(&a.out)?;
    let rows: Vec<Vec<Cell>> = reports.iter().flat_map(|r| r.csv_rows()).collect();
    table_file(&a.out.join("metrics.csv"), &MetricsReport::CSV_HEADER, &rows)?;
    if reports.len() == 1 {
        write_json(&a.out.join("metrics.json"), &reports[0])?;
    } else {
        write_json(&a.out.join("metrics.json"), &reports)?;
    }
    for r in &reports {
        if r.failed_replicates > 0 {
            log::warn!("{} of {} replicates failed at n = {}", r.failed_replicates, r.replicates, r.scenario.n);
        }
    }
    Ok(())
}

fn cmd_dfd(a: &DfdArgs) -> Result<(), CocregError> {
    let cohort = read_dataset(&a.data)?;
    let pairs = estimate_covariances(&cohort)?;
    let (g, t) = loadings::read(&a.loadings, cohort.q(), cohort.p())?;
    let mut trace = Vec::new();
    for k in 1..=g.ncols() {
        trace.push(dfd(k, &g, &t, &pairs)?);
    }
    let pairs_trace: Vec<(usize, f64)> = trace.iter().enumerate().map(|(i, d)| (i + 1, d.value)).collect();
    let report = DfdReport { threshold: a.rho, selected_k: select_k(&pairs_trace, a.rho), trace };
    prepare_out(&a.out)?;
    write_json(&a.out.join("dfd.json"), &report)?;
    let rows: Vec<Vec<Cell>> = report
        .trace
        .iter()
        .enumerate()
        .map(|(i, d)| vec![Cell::from(i + 1), Cell::from(d.value), Cell::from(d.gamma_side), Cell::from(d.theta_side)])
        .collect();
    table_file(&a.out.join("dfd.csv"), &["k", "dfd", "gamma_side", "theta_side"], &rows)
}

fn cmd_baseline(a: &BaselineArgs) -> Result<(), CocregError> {
    let cohort = read_dataset(&a.data)?;
    let pairs = estimate_covariances(&cohort)?;
    let model = fit_cpca_reg(&pairs, &cohort.covariates(), a.fraction)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("baseline.json"), &model)?;
    let names = BootstrapResult::coefficient_names(cohort.r());
    let mut header = vec!["x_index", "y_index"];
    header.extend(names.iter().map(String::as_str));
    header.push("r_squared");
    let rows: Vec<Vec<Cell>> = model
        .regressions
        .iter()
        .map(|r| {
            let mut row = vec![Cell::from(r.x_index + 1), Cell::from(r.y_index + 1), Cell::from(r.alpha)];
            for j in 0..cohort.r() {
                row.push(Cell::from(r.beta.as_ref().map(|b| b[j])));
            }
            row.push(Cell::from(r.r_squared));
            row
        })
        .collect();
    table_file(&a.out.join("baseline.csv"), &header, &rows)
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CocregError> {
    let s = SimScenario::preset(&a.preset)?;
    let (cohort, g) = generate_cohort(&s, a.seed)?;
    write_dataset(&a.out, &cohort)?;
    write_json(&a.out.join("truth.json"), &g.truth)?;
    Ok(())
}
