//! Command-line front end: `estimate`, `simulate`, and `oracle`.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 degenerate
//! assay. `simulate` also exits 2 when any grid cell had to be skipped as
//! infeasible, after finishing the remaining cells.

pub mod io;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::estimators::{self, EstimationOptions};
use crate::model::{MainStudy, StratumTable, ValidationStudy};
use crate::simulation::{self, SimulationConfig};
use crate::stacks;
use crate::variance;
use report::{EstimateReport, InputSummary};

#[derive(Debug, Parser)]
#[command(
    name = "seroprev",
    version,
    about = "Prevalence estimation corrected for test misclassification and selection bias"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate prevalence from CSV inputs
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study from a TOML config
    Simulate(SimulateArgs),
    /// Cross-check an analytic variance against the numeric sandwich
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Validation-study counts CSV (role,n,correct)
    #[arg(long)]
    pub validation: PathBuf,
    /// Main-study results CSV (x,stratum)
    #[arg(long = "main")]
    pub main_study: PathBuf,
    /// Target-population stratum proportions CSV (stratum,gamma);
    /// enables the standardized estimator
    #[arg(long)]
    pub strata: Option<PathBuf>,
    /// Model config TOML (link, components, terms); enables the
    /// model-standardized estimator (requires --strata)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Plug the raw (untruncated) point estimate into the variance formulas
    #[arg(long)]
    pub no_truncate_plugin: bool,
    /// Stdout format
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    pub format: OutputFormat,
    /// Directory receiving report.json and report.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config TOML
    pub config: PathBuf,
    /// Override the config's master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Directory receiving results.csv (default: current directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stdout format for the summary
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StackKind {
    Rg,
    Srg,
    Srgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleDesign {
    /// The data-generating design itself
    Correct,
    /// Intercept-only model (reduces to the unstandardized path)
    Intercept,
    /// Rank-deficient design, to exercise the failure path
    Singular,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Which estimating-function stack to check
    #[arg(value_enum)]
    pub stack: StackKind,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Main-study size
    #[arg(long, default_value_t = 100_000)]
    pub n: u64,
    /// Design for the srgm stack
    #[arg(long, value_enum, default_value_t = OracleDesign::Correct)]
    pub design: OracleDesign,
    /// Maximum tolerated relative discrepancy
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

pub fn build_estimate_report(
    v: &ValidationStudy,
    m: &MainStudy,
    strata: Option<&StratumTable>,
    model: Option<&crate::design::DesignConfig>,
    opts: &EstimationOptions,
) -> Result<EstimateReport> {
    let (sigma_e_hat, sigma_p_hat) = estimators::estimate_assay(v);
    let mut estimates = vec![
        estimators::naive_prevalence(m, opts.level),
        estimators::rg_analysis(v, m, opts)?,
    ];
    let mut dropped = Vec::new();
    if let Some(t) = strata {
        let est = estimators::srg_analysis(v, m, t, opts)?;
        dropped = est.flags.nonpositivity_strata.clone();
        estimates.push(est);
        if let Some(cfg) = model {
            let spec = cfg.build(t)?;
            estimates.push(estimators::srgm_analysis(v, m, t, &spec, opts)?);
        }
    } else if model.is_some() {
        return Err(Error::Input("--model requires --strata".into()));
    }
    Ok(EstimateReport {
        inputs: InputSummary {
            n_sens: v.n_sens(),
            x_sens_pos: v.x_sens_pos(),
            n_spec: v.n_spec(),
            x_spec_neg: v.x_spec_neg(),
            n_main: m.n(),
            positives: m.positives(),
            sigma_e_hat,
            sigma_p_hat,
            k_strata: strata.map(StratumTable::len),
            level: opts.level,
            truncated_plugin: opts.truncated_plugin,
        },
        estimates,
        dropped_strata: dropped,
    })
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<String> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::Input("--level must be in (0,1)".into()));
    }
    let v = io::load_validation(&args.validation)?;
    let m = io::load_main(&args.main_study)?;
    let strata = args.strata.as_deref().map(io::load_strata).transpose()?;
    let model = args.model.as_deref().map(io::load_model_config).transpose()?;
    let opts =
        EstimationOptions { level: args.level, truncated_plugin: !args.no_truncate_plugin };
    let report = build_estimate_report(&v, &m, strata.as_ref(), model.as_ref(), &opts)?;

    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), report.to_json()?)?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
    }
    Ok(match args.format {
        OutputFormat::Table => report.to_table(),
        OutputFormat::Json => report.to_json()?,
        OutputFormat::Csv => report.to_csv(),
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Runs the study; the boolean is true when every scenario completed.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<(String, bool)> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Input(format!("{}: {e}", args.config.display())))?;
    let mut config = SimulationConfig::from_toml(&text)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    // Resolve a table file relative to the config's directory.
    if let (Some(table), Some(dir)) = (&config.table_file, args.config.parent()) {
        if table.is_relative() {
            config.table_file = Some(dir.join(table));
        }
    }

    let results = match args.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Input(format!("--threads: {e}")))?;
            pool.install(|| simulation::run(&config))?
        }
        None => simulation::run(&config)?,
    };

    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("results.csv");
    let mut buf = Vec::new();
    simulation::write_results_csv(&results, &mut buf)?;
    std::fs::write(&csv_path, &buf)?;

    let all_complete = results.iter().all(|r| r.skipped.is_none());
    let summary = match args.format {
        OutputFormat::Table => {
            let mut s = report::simulation_table(&results);
            s.push_str(&format!("\nresults written to {}\n", csv_path.display()));
            s
        }
        OutputFormat::Json => serde_json::to_string_pretty(&results)
            .map_err(|e| Error::Input(e.to_string()))?,
        OutputFormat::Csv => String::from_utf8_lossy(&buf).into_owned(),
    };
    Ok((summary, all_complete))
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

pub fn cmd_oracle(args: &OracleArgs) -> Result<String> {
    use crate::model::{Link, RegressionSpec, SampleFractions};
    use crate::simulation::{generate, replicate_rng, Dgp, GenParams};

    let n3 = args.n.max(100);
    let params = GenParams {
        pi: 0.10,
        sigma_e: 0.97,
        sigma_p: 0.94,
        n1: (n3 / 20).max(50),
        n2: (n3 / 10).max(100),
        n3,
    };
    let mut rng = replicate_rng(args.seed, 0, 0);

    let mut out = String::new();
    let (analytic, numeric) = match args.stack {
        StackKind::Rg => {
            let (v, m, _, _) = generate(Dgp::Dgp1, params, &mut rng)?;
            let stack = stacks::rg_stack(&v, &m)?;
            let parts = variance::numeric_sandwich(&stack)?;
            let (se, sp) = estimators::estimate_assay(&v);
            let rho = m.positives() as f64 / m.n() as f64;
            let f = SampleFractions::from_counts(v.n_sens(), v.n_spec(), m.n())?;
            let analytic = variance::var_rg(stack.theta_hat[3], se, sp, rho, &f)?;
            out.push_str(&format!(
                "stack: rg  n1={} n2={} n3={}\n",
                v.n_sens(),
                v.n_spec(),
                m.n()
            ));
            (analytic, parts.bottom_right_asymptotic())
        }
        StackKind::Srg => {
            let (v, m, t, _) = generate(Dgp::Dgp2, params, &mut rng)?;
            let stack = stacks::srg_stack(&v, &m, &t)?;
            let parts = variance::numeric_sandwich(&stack)?;
            let (se, sp) = estimators::estimate_assay(&v);
            let counts = m.stratum_counts(&t)?;
            let n3f = m.n() as f64;
            let means: Vec<f64> =
                counts.iter().map(|(pos, n_z)| *pos as f64 / *n_z as f64).collect();
            let fracs: Vec<f64> = counts.iter().map(|(_, n_z)| *n_z as f64 / n3f).collect();
            let f = SampleFractions::from_counts(v.n_sens(), v.n_spec(), m.n())?;
            let analytic = variance::var_srg(
                stack.theta_hat[t.len() + 3],
                se,
                sp,
                &means,
                &fracs,
                &t.gammas(),
                &f,
            )?;
            out.push_str(&format!(
                "stack: srg  n1={} n2={} n3={} k={}\n",
                v.n_sens(),
                v.n_spec(),
                m.n(),
                t.len()
            ));
            (analytic, parts.bottom_right_asymptotic())
        }
        StackKind::Srgm => {
            let (v, m, t, _) = generate(Dgp::Dgp3, params, &mut rng)?;
            let base = crate::simulation::build_population(Dgp::Dgp3, params, None)?;
            let spec = match args.design {
                OracleDesign::Correct => base.spec().clone(),
                OracleDesign::Intercept => RegressionSpec::intercept_only(Link::Logit),
                OracleDesign::Singular => {
                    // Duplicate the last column: rank-deficient by construction.
                    let inner = base.spec().clone();
                    let p = inner.p();
                    RegressionSpec::new(Link::Logit, p + 1, move |label| {
                        let mut h = inner.design_vector(label).ok()?;
                        h.push(h[p - 1]);
                        Some(h)
                    })
                }
            };
            let fit = crate::glm::fit(&m, &spec)?;
            let stack = stacks::srgm_stack(&v, &m, &t, &spec, &fit)?;
            let parts = variance::numeric_sandwich(&stack)?;
            let (se, sp) = estimators::estimate_assay(&v);
            let pi_raw = stack.theta_hat[spec.p() + 3];
            let analytic = variance::var_srgm(&fit, &m, &t, &spec, &v, pi_raw)?;
            out.push_str(&format!(
                "stack: srgm ({:?} design, p={})  n1={} n2={} n3={} k={}\n",
                args.design,
                spec.p(),
                v.n_sens(),
                v.n_spec(),
                m.n(),
                t.len()
            ));
            if args.design == OracleDesign::Intercept {
                let rho = m.positives() as f64 / m.n() as f64;
                let f = SampleFractions::from_counts(v.n_sens(), v.n_spec(), m.n())?;
                let rg = variance::var_rg(pi_raw, se, sp, rho, &f)?;
                out.push_str(&format!(
                    "closed-form unstandardized variance = {rg:.10e} (same path)\n"
                ));
            }
            (analytic, parts.bottom_right_asymptotic())
        }
    };

    let rel = (analytic - numeric).abs() / analytic.abs().max(1e-300);
    out.push_str(&format!("analytic V = {analytic:.10e}\n"));
    out.push_str(&format!("numeric  V = {numeric:.10e}\n"));
    out.push_str(&format!(
        "relative discrepancy = {rel:.3e} (tolerance {:.1e})\n",
        args.tolerance
    ));
    if rel > args.tolerance {
        return Err(Error::Singular(format!(
            "analytic/numeric discrepancy {rel:.3e} exceeds tolerance {:.1e}",
            args.tolerance
        )));
    }
    Ok(out)
}
