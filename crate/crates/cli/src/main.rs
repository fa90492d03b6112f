use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stackcast::dgp::{self, derive_seed};
use stackcast::harness::{self, CandidateGrid, ExperimentConfig, Spacing};
use stackcast::stacking::fit_stack;
use stackcast::{plot, spectral};
use stackcast::{CandidateSpec, CvScheme, Family, Prior, StackError, StackModel, TScale};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "stackcast",
    version,
    about = "Bayesian stacking of regression candidates"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo study with Gaussian outcomes.
    SimulateLinear(SimArgs),
    /// Monte Carlo study with binary outcomes.
    SimulateLogistic(SimArgs),
    /// Fit a stack on a CSV file and save the model.
    StackFit(FitArgs),
    /// Predict from a saved model.
    Predict(PredictArgs),
    /// Check hat-matrix eigenvalue bounds on random instances.
    #[command(name = "verify-lemma1")]
    VerifyLemma1(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    G,
    Gamma,
    Lambda,
    T,
}

#[derive(Args)]
struct SimArgs {
    /// TOML file; its keys override the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Replace the candidate grid with the default grid of this kind.
    #[arg(long, value_enum)]
    grid: Option<GridKind>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Comma-separated R² values.
    #[arg(long, value_delimiter = ',')]
    r2: Option<Vec<f64>>,
    /// Write wall_seconds as 0 so repeated runs are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorKind {
    G,
    Iso,
    T,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long, value_enum)]
    prior: PriorKind,
    /// `MIN:MAX:COUNT[:log]` or a comma-separated list. Degrees of freedom for `t`.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Known error variance for linear candidates.
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Scale of the T prior.
    #[arg(long, default_value_t = 1.0)]
    t_scale: f64,
    /// CV folds for binary outcomes.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

enum Failure {
    Usage(String),
    Runtime(StackError),
    Verify(String),
}

impl From<StackError> for Failure {
    fn from(e: StackError) -> Self {
        match e {
            StackError::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let missing = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            );
            return if e.use_stderr() || missing {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::SimulateLinear(a) => simulate(Family::Linear, a),
        Command::SimulateLogistic(a) => simulate(Family::Logistic, a),
        Command::StackFit(a) => stack_fit(a),
        Command::Predict(a) => predict(a),
        Command::VerifyLemma1(a) => verify(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `stackcast help` for usage");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn simulate(family: Family, a: SimArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p, family)?,
        None => ExperimentConfig::default_for(family),
    };
    if cfg.family != family {
        return Err(Failure::Usage(format!(
            "config file declares family '{}' but the subcommand runs '{family}'",
            cfg.family
        )));
    }
    if let Some(g) = a.grid {
        cfg.candidate_grid = match g {
            GridKind::G => CandidateGrid::g_default(),
            GridKind::Gamma => CandidateGrid::gamma_default(),
            GridKind::Lambda => CandidateGrid::lambda_default(),
            GridKind::T => CandidateGrid::t_default(family),
        };
    }
    if let Some(r) = a.reps {
        cfg.replications = r;
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    if a.threads.is_some() {
        cfg.parallelism = a.threads;
    }
    if let Some(n) = a.n {
        cfg.n_values = n;
    }
    if let Some(r2) = a.r2 {
        cfg.r2_grid = r2;
    }
    if a.no_timing {
        cfg.record_timing = false;
    }
    cfg.validate()?;

    let result = harness::run_experiment(&cfg)?;
    for (row, d) in result.rows.iter().zip(&result.diagnostics) {
        for e in &d.errors {
            eprintln!("warning: n={} r2={}: {e}", row.n, row.r2);
        }
    }
    match &a.out_csv {
        Some(p) => harness::emit_csv(&result, p)?,
        None => print!("{}", harness::csv_string(&result.rows)),
    }
    if let Some(p) = &a.out_svg {
        plot::emit_plot(&result, p)?;
    }
    let violations = result.oracle_violations();
    eprintln!(
        "cv oracle inequality: {} of {} replications satisfied",
        result.replications_run() - violations,
        result.replications_run()
    );
    if violations > 0 {
        return Err(Failure::Verify(format!(
            "{violations} replications had a stacked CV error above the best candidate's"
        )));
    }
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::Usage(format!("cannot parse grid '{spec}'"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let spacing = match parts.get(3).map(|s| s.trim()) {
            None | Some("lin") | Some("linear") => Spacing::Linear,
            Some("log") => Spacing::Log,
            Some(_) => return Err(bad()),
        };
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        let (lo, hi) = (num(parts[0])?, num(parts[1])?);
        if count == 0 || !(lo > 0.0 && hi >= lo) {
            return Err(bad());
        }
        Ok(harness::grid_points(lo, hi, count, spacing))
    } else {
        let v = spec.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
        if v.is_empty() {
            return Err(bad());
        }
        Ok(v)
    }
}

fn build_specs(a: &FitArgs, family: Family) -> Result<Vec<CandidateSpec>, Failure> {
    let values = parse_grid(&a.grid)?;
    values
        .iter()
        .map(|&v| {
            let (prior, label) = match (a.prior, family) {
                (PriorKind::G, Family::Logistic) => {
                    return Err(Failure::Usage(
                        "the g prior needs a continuous outcome".into(),
                    ))
                }
                (PriorKind::G, Family::Linear) => (Prior::GPrior { g: v }, format!("g={v}")),
                (PriorKind::Iso, Family::Linear) => {
                    (Prior::IsotropicNormal { gamma2: v }, format!("gamma2={v}"))
                }
                (PriorKind::Iso, Family::Logistic) => (
                    Prior::IsoNormalLogistic { lambda: v },
                    format!("lambda={v}"),
                ),
                (PriorKind::T, Family::Linear) => (
                    Prior::MultiT {
                        nu: v,
                        scale: TScale::Zellner { lambda: a.t_scale },
                    },
                    format!("nu={v}"),
                ),
                (PriorKind::T, Family::Logistic) => (
                    Prior::MultiT {
                        nu: v,
                        scale: TScale::Identity { lambda: a.t_scale },
                    },
                    format!("nu={v}"),
                ),
            };
            let spec = match family {
                Family::Linear => CandidateSpec::linear(prior, a.sigma2, label),
                Family::Logistic => CandidateSpec::logistic(prior, label),
            };
            spec.map_err(|e| Failure::Usage(e.to_string()))
        })
        .collect()
}

fn stack_fit(a: FitArgs) -> Result<(), Failure> {
    let data = dgp::load_csv(&a.data, &a.outcome)?;
    let specs = build_specs(&a, data.family())?;
    let scheme = match data.family() {
        Family::Logistic => CvScheme::Kfold {
            folds: a.folds.min(data.n()),
            seed: a.seed,
        },
        Family::Linear if matches!(a.prior, PriorKind::T) => CvScheme::LooRefit,
        Family::Linear => CvScheme::LooClosedForm,
    };
    let model = fit_stack(&data, &specs, scheme)?;
    model.save(&a.out)?;

    println!(
        "family: {}  n: {}  p: {}",
        data.family(),
        data.n(),
        data.p()
    );
    println!("{:<24} {:>14} {:>16}", "candidate", "weight", "cv_error");
    for (k, spec) in model.specs.iter().enumerate() {
        let mark = if k == model.best_index { " *" } else { "" };
        println!(
            "{:<24} {:>14.8} {:>16.8}{mark}",
            spec.label(),
            model.weights.w[k],
            model.cv_errors[k]
        );
    }
    println!("stacked cv_error: {:.8}", model.stacked_cv_error());
    println!("weight sum: {:.12}", model.weights.w.sum());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    let model = StackModel::load(&a.model)?;
    let x = dgp::load_design(&a.data, &model.columns)?;
    let p = model.predict(&x)?;
    let mut out = String::with_capacity(p.len() * 20);
    out.push_str("prediction\n");
    for v in p.iter() {
        out.push_str(&format!("{v}\n"));
    }
    print!("{out}");
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let s = spectral::run_trials(a.trials, a.seed, a.tol)?;

    // g-prior hat matrices are scaled projections with top eigenvalue g / (g + sigma2).
    let mut g_worst: f64 = 0.0;
    let g_trials = a.trials.min(100);
    for i in 0..g_trials {
        let inst = spectral::random_instance(derive_seed(a.seed, &[u64::MAX, i as u64]));
        for (g, s2) in [(0.01, 1.0), (1.0, 1.0), (1000.0, 0.5)] {
            let (got, want) = spectral::g_prior_max_eig(&inst.x, g, s2)?;
            g_worst = g_worst.max((got - want).abs());
        }
    }

    println!("{:<36} {:>16}", "check", "value");
    println!("{:<36} {:>16}", "trials", s.trials);
    println!("{:<36} {:>16}", "failures", s.failures);
    println!(
        "{:<36} {:>16.12}",
        "max eig P_k (worst)", s.worst_candidate_max
    );
    println!(
        "{:<36} {:>16.12}",
        "max eig P(w) (worst)", s.worst_combined_max
    );
    println!(
        "{:<36} {:>16.3e}",
        "min eig P(w) (worst)", s.worst_combined_min
    );
    println!("{:<36} {:>16.3e}", "g-prior |max eig - g/(g+s2)|", g_worst);
    println!("{:<36} {:>16.1e}", "tolerance", a.tol);

    if s.failures > 0 || g_worst > a.tol {
        return Err(Failure::Verify(format!(
            "{} of {} instances out of bounds; g-prior deviation {g_worst:e}",
            s.failures, s.trials
        )));
    }
    println!("all checks passed");
    Ok(())
}
