//! Argument parsing and subcommand dispatch for the `statedchoice` binary.
//!
//! Exit codes: 0 on success, 1 for invalid input or arguments, 2 when an
//! estimation stage fails. Every failure prints exactly one line to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use statedchoice::config::{format_f64_list, parse_f64_list};
use statedchoice::dimtest::{quantile_spread_test, rank_invariance_test};
use statedchoice::estimands::{build_report, ReportRequest};
use statedchoice::harness::{emit_density, run_study, KChoice, DEFAULT_DENSITY_BINS};
use statedchoice::io;
use statedchoice::model::validate_panel;
use statedchoice::{
    estimate_individual_moments, fit_grouped_probit, kmeans_partition, select_k, simulate_dataset, DgpConfig, Error,
    EstimationSettings, LinkFunction, ModelSpec, PseudoPanel, Result,
};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "statedchoice", version = env!("CARGO_PKG_VERSION"), about = "Demand estimation from stated and actual choices")]
pub struct Cli {
    /// Log verbosity.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic pseudo-panel and write stated.csv and actual.csv.
    Simulate(SimulateArgs),
    /// Classify persons, fit the grouped probit and report estimands.
    Estimate(EstimateArgs),
    /// Repeat simulate + estimate and summarize treatment-effect estimators.
    Montecarlo(MonteCarloArgs),
    /// Test the dimension of unobserved heterogeneity on a stated panel.
    Dimtest(DimTestArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// key=value design file; the built-in design when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write latent.csv with the latent draws.
    #[arg(long)]
    pub emit_latent: bool,
}

#[derive(Debug, Args)]
pub struct KArgs {
    /// Fixed number of groups.
    #[arg(long, conflicts_with = "k_select")]
    pub k: Option<usize>,
    /// Data-driven K as `min,max,gamma` (default 2,20,1).
    #[arg(long, value_name = "MIN,MAX,GAMMA")]
    pub k_select: Option<String>,
    /// k-means restarts.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Evaluation points of the first-step moments.
    #[arg(long, default_value = "0,1", value_name = "A,B,...")]
    pub eval_points: String,
    /// Clamp bound applied to stated probabilities before the logit.
    #[arg(long, default_value_t = 0.01)]
    pub clamp_eps: f64,
    /// Common slope on x across groups instead of group-specific slopes.
    #[arg(long)]
    pub common_slope: bool,
    /// Treatment-effect evaluation points `x1,x0`.
    #[arg(long, default_value = "1,0", value_name = "X1,X0")]
    pub te_points: String,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub stated: PathBuf,
    #[arg(long)]
    pub actual: PathBuf,
    /// Optional `person_id,population` file for counterfactual rows.
    #[arg(long)]
    pub membership: Option<PathBuf>,
    #[command(flatten)]
    pub k: KArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid for ASF and MSB rows; the scenario grid found in the data by default.
    #[arg(long, value_name = "A,B,...")]
    pub x_grid: Option<String>,
    /// Kernel bandwidth for scenario-0 smoothing; Silverman's rule by default.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    /// key=value design file; the built-in design when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of replications.
    #[arg(long, default_value_t = 100)]
    pub s: usize,
    /// Hypothetical scenarios per person (overrides the config).
    #[arg(long)]
    pub t: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; all cores by default. Results do not depend on it.
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub k: KArgs,
    /// Latent draws for the oracle treatment effect.
    #[arg(long, default_value_t = 1_000_000)]
    pub oracle_draws: usize,
    /// Density bins.
    #[arg(long, default_value_t = DEFAULT_DENSITY_BINS)]
    pub bins: usize,
    /// Density range `lo,hi`.
    #[arg(long, default_value = "0,0.8", value_name = "LO,HI")]
    pub range: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Ks,
    Spread,
}

#[derive(Debug, Args)]
pub struct DimTestArgs {
    #[arg(long)]
    pub stated: PathBuf,
    #[arg(long, value_enum, default_value_t = Variant::Ks)]
    pub variant: Variant,
    /// Scenario pair `t1,t2`.
    #[arg(long, default_value = "1,2", value_name = "T1,T2")]
    pub scenarios: String,
    /// Quantile levels `a,b` of the spread variant.
    #[arg(long, default_value = "0.25,0.75", value_name = "A,B")]
    pub taus: String,
    /// Permutations (ks) or bootstrap draws (spread).
    #[arg(long, default_value_t = 199)]
    pub perms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let line = first_line(&e.to_string());
            report(&format!("usage: {}", line.trim_start_matches("error: ")), 1);
            return 1;
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level.filter()).format_timestamp(None).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            report(&e.to_string(), code);
            code
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn first_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

fn report(message: &str, code: i32) {
    eprintln!("{}", error_line(message, code));
}

/// One `key=value` line: `error code=<n> message=<text>`.
pub fn error_line(message: &str, code: i32) -> String {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error code={code} message={flat}")
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Dimtest(a) => dimtest(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<DgpConfig> {
    match path {
        None => Ok(DgpConfig::baseline()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io { path: p.display().to_string(), source })?;
            DgpConfig::from_kv(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })
}

fn pair(s: &str, what: &str) -> Result<(f64, f64)> {
    match parse_f64_list(s).map_err(|e| Error::Argument(format!("{what}: {e}")))?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Argument(format!("{what}: expected two comma-separated numbers, got {s:?}"))),
    }
}

fn meta_header(command: &str) -> String {
    format!("version={VERSION}\ncommand={command}\n")
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (panel, truth) = simulate_dataset(&cfg, a.seed)?;
    ensure_dir(&a.out)?;
    let meta = format!("{}seed={}\n{}", meta_header("simulate"), a.seed, cfg.to_kv());
    io::write_with_meta(&io::stated_table(&panel.stated), &a.out.join("stated.csv"), &meta)?;
    io::write_with_meta(&io::actual_table(&panel.actual), &a.out.join("actual.csv"), &meta)?;
    if a.emit_latent {
        io::write_with_meta(&io::latent_table(&truth), &a.out.join("latent.csv"), &meta)?;
    }
    info!("simulate: {} persons, {} scenarios written to {}", cfg.n, panel.t_count, a.out.display());
    Ok(())
}

fn settings_from(k: &KArgs) -> Result<EstimationSettings> {
    let mut s = EstimationSettings::default();
    s.eval_points = parse_f64_list(&k.eval_points)?;
    s.restarts = k.restarts;
    s.link = LinkFunction::logit(k.clamp_eps)?;
    s.model = ModelSpec { per_group_slope: !k.common_slope, ..ModelSpec::default() };
    s.te_points = pair(&k.te_points, "--te-points")?;
    if let Some(k) = k.k {
        s.k = KChoice::Fixed(k);
    } else if let Some(spec) = &k.k_select {
        match parse_f64_list(spec)?.as_slice() {
            &[lo, hi, gamma] if lo >= 1.0 && hi >= lo && lo.fract() == 0.0 && hi.fract() == 0.0 => {
                s.k = KChoice::Select { k_min: lo as usize, k_max: hi as usize, gamma };
            }
            _ => return Err(Error::Argument(format!("--k-select: expected min,max,gamma, got {spec:?}"))),
        }
    }
    s.validate()?;
    Ok(s)
}

fn settings_meta(s: &EstimationSettings) -> String {
    s.to_kv()
}

fn load_panel(stated: &Path, actual: &Path) -> Result<PseudoPanel> {
    let stated = io::read_stated(stated)?;
    let actual = io::read_actual(actual)?;
    let t_count = stated.iter().map(|r| r.scenario_id + 1).max().unwrap_or(0);
    let panel = PseudoPanel { stated, actual, t_count };
    validate_panel(&panel).into_result()?;
    Ok(panel)
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let settings = settings_from(&a.k)?;
    let panel = load_panel(&a.stated, &a.actual)?;
    let membership = a.membership.as_deref().map(io::read_membership).transpose()?;
    let x_grid = match &a.x_grid {
        Some(s) => parse_f64_list(s)?,
        None => {
            let mut xs: Vec<f64> = panel.stated.iter().filter(|r| r.scenario_id >= 1).map(|r| r.x).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            xs
        }
    };
    ensure_dir(&a.out)?;

    let moments = estimate_individual_moments(&panel, &settings.eval_points, &settings.link)?;
    let k = match settings.k {
        KChoice::Fixed(k) => k,
        KChoice::Select { k_min, k_max, gamma } => {
            let sel = select_k(&moments, k_min, k_max, gamma, settings.restarts, a.seed)?;
            info!("estimate: selected K = {} (hit max: {})", sel.k, sel.hit_max);
            sel.k
        }
    };
    let grouping = kmeans_partition(&moments, k, settings.restarts, a.seed)?;
    let fit = fit_grouped_probit(&panel.actual, &grouping, &settings.model)?;
    let req = ReportRequest { x_grid, te_points: settings.te_points, bandwidth: a.bandwidth, membership };
    let report = build_report(&panel, &grouping, &fit, &settings.model, &req)?;

    let meta = format!(
        "{}seed={}\nstated={}\nactual={}\nmembership={}\nk_used={k}\nx_grid={}\nbandwidth={}\n{}",
        meta_header("estimate"),
        a.seed,
        a.stated.display(),
        a.actual.display(),
        a.membership.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        format_f64_list(&req.x_grid),
        report.bandwidth,
        settings_meta(&settings),
    );
    io::write_with_meta(&io::groups_table(&grouping, &moments), &a.out.join("groups.csv"), &meta)?;
    io::write_with_meta(&io::fit_table(&fit), &a.out.join("fit.csv"), &meta)?;
    io::write_with_meta(&io::estimands_table(&report), &a.out.join("estimands.csv"), &meta)?;
    info!("estimate: TE = {} with K = {k}", report.te);
    Ok(())
}

fn montecarlo(a: MonteCarloArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(t) = a.t {
        if t == 0 {
            return Err(Error::Argument("--t must be >= 1".into()));
        }
        cfg.t_scenarios = t;
    }
    let mut settings = settings_from(&a.k)?;
    settings.oracle_draws = a.oracle_draws;
    let range = pair(&a.range, "--range")?;
    let parallelism = match a.parallelism {
        Some(p) => p,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    ensure_dir(&a.out)?;
    let summary = run_study(&cfg, &settings, a.s, a.seed, parallelism)?;
    let density = emit_density(&summary, a.bins, range)?;

    // parallelism is deliberately absent: outputs do not depend on it
    let meta = format!(
        "{}seed={}\ns={}\nbins={}\nrange={},{}\ns_completed={}\n{}{}",
        meta_header("montecarlo"),
        a.seed,
        a.s,
        a.bins,
        range.0,
        range.1,
        summary.s_completed,
        cfg.to_kv(),
        settings_meta(&settings),
    );
    io::write_with_meta(&io::replications_table(&summary), &a.out.join("replications.csv"), &meta)?;
    io::write_with_meta(&io::summary_table(&summary), &a.out.join("summary.csv"), &meta)?;
    let density_name = format!("density_T{}.csv", cfg.t_scenarios);
    let density_meta = format!("{meta}all_out_of_range={}\n", density.all_out_of_range);
    io::write_with_meta(&io::density_table(&density), &a.out.join(density_name), &density_meta)?;
    info!(
        "montecarlo: {} of {} replications completed, oracle TE {}",
        summary.s_completed, summary.s_requested, summary.oracle_te
    );
    Ok(())
}

fn dimtest(a: DimTestArgs) -> Result<()> {
    let (t1, t2) = pair(&a.scenarios, "--scenarios")?;
    if t1 < 0.0 || t2 < 0.0 || t1.fract() != 0.0 || t2.fract() != 0.0 {
        return Err(Error::Argument(format!("--scenarios: expected two scenario ids, got {:?}", a.scenarios)));
    }
    let (t1, t2) = (t1 as u32, t2 as u32);
    let stated = io::read_stated(&a.stated)?;
    let t_count = stated.iter().map(|r| r.scenario_id + 1).max().unwrap_or(0);
    let panel = PseudoPanel { stated, actual: Vec::new(), t_count };
    let (result, cells) = match a.variant {
        Variant::Ks => (rank_invariance_test(&panel, t1, t2, a.perms, a.seed)?, "x grid values per scenario"),
        Variant::Spread => (
            quantile_spread_test(&panel, t1, t2, pair(&a.taus, "--taus")?, a.perms, a.seed)?,
            "(x2, x1) grid pairs, monotone (isotonic) conditioning on P1 instead of P1 deciles",
        ),
    };
    ensure_dir(&a.out)?;
    let meta = format!(
        "{}seed={}\nstated={}\nvariant={}\nscenarios={t1},{t2}\ntaus={}\nperms={}\ncells={cells}\ncells_used={}\n\
         cells_excluded={}\nreject_at_05={}\nnote={}\n",
        meta_header("dimtest"),
        a.seed,
        a.stated.display(),
        result.variant.name(),
        a.taus,
        a.perms,
        result.cells_used,
        result.cells_excluded,
        result.reject_at_05,
        result.note.unwrap_or(""),
    );
    io::write_with_meta(&io::dimtest_table(&result), &a.out.join("dimtest.csv"), &meta)?;
    Ok(())
}
