//! Monte Carlo engine: data-generating processes, bias and coverage
//! accumulation over factorial parameter grids, and long-format CSV output.
//!
//! Six processes are supported: no selection bias (`dgp1`), two-stratum
//! selection bias (`dgp2`), 40- and 80-stratum selection bias with the test
//! result generated directly from a logistic model (`dgp3`, `dgp4`), and
//! misspecified variants (`dgp3_mis`, `dgp4_mis`) where the logistic model
//! holds for the latent status and misclassification is applied on top.
//!
//! Reproducibility contract: every replicate draws from its own stream keyed
//! by (master_seed, scenario index, replicate index), and per-replicate
//! outcomes are reduced in replicate order, so results are bit-identical
//! regardless of how many worker threads run.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Binomial, Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, EstimationOptions};
use crate::model::{
    expit, Link, MainStudy, Method, RegressionSpec, StratumTable, TestRecord, ValidationStudy,
};

/// Data-generating process identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dgp {
    #[serde(rename = "dgp1")]
    Dgp1,
    #[serde(rename = "dgp2")]
    Dgp2,
    #[serde(rename = "dgp3")]
    Dgp3,
    #[serde(rename = "dgp4")]
    Dgp4,
    #[serde(rename = "dgp3_mis")]
    Dgp3Mis,
    #[serde(rename = "dgp4_mis")]
    Dgp4Mis,
}

impl fmt::Display for Dgp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dgp::Dgp1 => "dgp1",
            Dgp::Dgp2 => "dgp2",
            Dgp::Dgp3 => "dgp3",
            Dgp::Dgp4 => "dgp4",
            Dgp::Dgp3Mis => "dgp3_mis",
            Dgp::Dgp4Mis => "dgp4_mis",
        };
        f.write_str(s)
    }
}

/// Scenario-level generation parameters.
#[derive(Debug, Clone, Copy)]
pub struct GenParams {
    pub pi: f64,
    pub sigma_e: f64,
    pub sigma_p: f64,
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
}

/// Simulation configuration, usually parsed from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dgp: Dgp,
    pub pi_grid: Vec<f64>,
    pub sigma_e_grid: Vec<f64>,
    pub sigma_p_grid: Vec<f64>,
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
    pub replicates: u64,
    pub master_seed: u64,
    pub estimators: Vec<Method>,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Plug the truncated point estimate into the variance formulas.
    #[serde(default = "default_true")]
    pub truncate_plugin: bool,
    /// Optional CSV (`stratum,gamma,s`) replacing the built-in gamma/s table
    /// for dgp3/dgp4 and their misspecified variants.
    #[serde(default)]
    pub table_file: Option<PathBuf>,
}

fn default_level() -> f64 {
    0.95
}
fn default_true() -> bool {
    true
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pi_grid.is_empty() || self.sigma_e_grid.is_empty() || self.sigma_p_grid.is_empty()
        {
            return Err(Error::Input("parameter grids must be nonempty".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Input("replicates must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Input("no estimators requested".into()));
        }
        if self.estimators.contains(&Method::Naive) {
            return Err(Error::Input(
                "the naive estimator is not simulated; use rg, srg, or srgm".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Input("level must be in (0,1)".into()));
        }
        for &pi in &self.pi_grid {
            if !(0.0..=1.0).contains(&pi) {
                return Err(Error::Input(format!("pi {pi} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimulationConfig =
            toml::from_str(text).map_err(|e| Error::Input(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-estimator scenario summary.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub method: Method,
    pub mean_bias: f64,
    pub coverage: f64,
    pub heywood_count: u64,
    pub nonpositivity_fraction: f64,
    pub truncation_count: u64,
    pub failures: u64,
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub dgp: Dgp,
    pub pi: f64,
    pub sigma_e: f64,
    pub sigma_p: f64,
    pub replicates: u64,
    /// Reason this scenario was skipped, if it was infeasible.
    pub skipped: Option<String>,
    pub estimators: Vec<EstimatorSummary>,
}

// ---------------------------------------------------------------------------
// Populations
// ---------------------------------------------------------------------------

/// A fully resolved scenario population: strata, sampling probabilities, the
/// per-stratum event probability, and the correctly specified model.
pub(crate) struct Population {
    table: StratumTable,
    labels: Vec<String>,
    picker: WeightedIndex<f64>,
    /// P(X=1 | z) when `model_on_x`, else P(Y=1 | z).
    event_prob: Vec<f64>,
    model_on_x: bool,
    spec: RegressionSpec,
    true_pi: f64,
    params: GenParams,
}

impl Population {
    pub(crate) fn spec(&self) -> &RegressionSpec {
        &self.spec
    }

    pub(crate) fn table(&self) -> &StratumTable {
        &self.table
    }

    pub(crate) fn true_pi(&self) -> f64 {
        self.true_pi
    }

    pub(crate) fn draw(&self, rng: &mut ChaCha12Rng) -> Result<(ValidationStudy, MainStudy)> {
        let p = self.params;
        let x_sens = Binomial::new(p.n1, p.sigma_e)
            .map_err(|e| Error::Input(e.to_string()))?
            .sample(rng);
        let false_pos = Binomial::new(p.n2, 1.0 - p.sigma_p)
            .map_err(|e| Error::Input(e.to_string()))?
            .sample(rng);
        let v = ValidationStudy::from_counts(p.n1, x_sens, p.n2, p.n2 - false_pos)?;

        let n3 = p.n3 as usize;
        let mut records = Vec::with_capacity(n3);
        for _ in 0..n3 {
            let z = self.picker.sample(rng);
            let x = if self.model_on_x {
                rng.random::<f64>() < self.event_prob[z]
            } else {
                let y = rng.random::<f64>() < self.event_prob[z];
                if y {
                    rng.random::<f64>() < p.sigma_e
                } else {
                    rng.random::<f64>() < 1.0 - p.sigma_p
                }
            };
            records.push(TestRecord { positive: x, stratum: Some(self.labels[z].clone()) });
        }
        Ok((v, MainStudy::new(records)?))
    }
}

/// Choose the intercept by bisection so the implied prevalence hits
/// `target_pi`.
///
/// `etas` are the slope-only linear predictors per stratum. When the model
/// generates the test result directly (`model_on_x`), prevalence is read from
/// the standardized apparent prevalence through the misclassification
/// identity; otherwise the model is on the latent status and prevalence is
/// the standardized mean itself.
pub fn balance_intercept(
    model_on_x: bool,
    etas: &[f64],
    gammas: &[f64],
    target_pi: f64,
    sigma_e: f64,
    sigma_p: f64,
) -> Result<f64> {
    let denom = sigma_e + sigma_p - 1.0;
    if model_on_x && denom <= 0.0 {
        return Err(Error::DegenerateAssay);
    }
    let implied = |b0: f64| -> f64 {
        let mean: f64 = etas.iter().zip(gammas).map(|(eta, g)| g * expit(b0 + eta)).sum();
        if model_on_x {
            (mean + sigma_p - 1.0) / denom
        } else {
            mean
        }
    };
    let (mut lo, mut hi) = (-20.0_f64, 20.0_f64);
    if !(implied(lo) <= target_pi && target_pi <= implied(hi)) {
        return Err(Error::Infeasible(format!(
            "target prevalence {target_pi} unreachable on the intercept bracket [-20, 20]"
        )));
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if implied(mid) < target_pi {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Built-in factorial strata for dgp3/dgp4
// ---------------------------------------------------------------------------

/// Stratum proportions and sampling probabilities for the large DGPs.
#[derive(Debug, Clone)]
pub struct SelectionTable {
    pub labels: Vec<String>,
    pub gammas: Vec<f64>,
    pub sampling: Vec<f64>,
}

const DGP3_COEFS: [f64; 5] = [-1.0, -0.6, 0.8, 0.6, 0.4];
const DGP4_COEFS: [f64; 6] = [-1.0, 3.25, 0.8, 0.6, 0.4, 0.1];

/// Seeds and shapes for the one-time table draws; calibrated so that dgp3
/// shows roughly 89% full positivity at n3 = 2500 and dgp4 almost always
/// shows nonpositivity with material population mass in the unsampled strata.
const DGP3_TABLE_SEED: u64 = 66;
const DGP4_TABLE_SEED: u64 = 3;
const DGP3_DIRICHLET_ALPHA: f64 = 1.2;
const DGP4_DIRICHLET_ALPHA: f64 = 0.8;
/// Undersampling factor for three common high-prevalence strata in dgp4;
/// drives near-certain nonpositivity.
const DGP4_UNDERSAMPLE: f64 = 1.0 / 400.0;

/// Factorial covariate grid: Z1 x Z2 x Z3 (x Z4 for the 80-stratum design).
/// Returns labels and slope design vectors (no intercept).
fn factorial_strata(with_z4: bool) -> (Vec<String>, Vec<Vec<f64>>) {
    let z4_levels = if with_z4 { 2 } else { 1 };
    let mut labels = Vec::new();
    let mut slopes = Vec::new();
    for a in 0..2 {
        for b in 0..4 {
            for c in 0..5 {
                for d in 0..z4_levels {
                    let label = if with_z4 {
                        format!("z1{a}|z2{b}|z3{c}|z4{d}")
                    } else {
                        format!("z1{a}|z2{b}|z3{c}")
                    };
                    let mut h = vec![
                        f64::from(u8::from(a == 1)),
                        f64::from(u8::from(b == 0)),
                        f64::from(u8::from(b == 1)),
                        f64::from(u8::from(c == 0)),
                        f64::from(u8::from(c == 1)),
                    ];
                    if with_z4 {
                        h.push(f64::from(u8::from(d == 1)));
                    }
                    labels.push(label);
                    slopes.push(h);
                }
            }
        }
    }
    (labels, slopes)
}

fn slope_etas(slopes: &[Vec<f64>], coefs: &[f64]) -> Vec<f64> {
    slopes.iter().map(|h| h.iter().zip(coefs).map(|(a, b)| a * b).sum()).collect()
}

/// Build the default gamma/s table for dgp3 or dgp4.
///
/// Construction, fixed once: stratum proportions are a seeded Dirichlet draw.
/// Among the ten strata with the lowest slope-only linear predictor, the two
/// most common are oversampled at twice their population share; for the
/// 80-stratum design, among the ten strata with the highest linear predictor
/// the three most common are additionally undersampled by
/// [`DGP4_UNDERSAMPLE`]. Weights renormalize into sampling probabilities.
pub fn default_selection_table(dgp: Dgp) -> SelectionTable {
    let with_z4 = matches!(dgp, Dgp::Dgp4 | Dgp::Dgp4Mis);
    let (labels, slopes) = factorial_strata(with_z4);
    let coefs: &[f64] = if with_z4 { &DGP4_COEFS } else { &DGP3_COEFS };
    let etas = slope_etas(&slopes, coefs);
    let (seed, alpha) = if with_z4 {
        (DGP4_TABLE_SEED, DGP4_DIRICHLET_ALPHA)
    } else {
        (DGP3_TABLE_SEED, DGP3_DIRICHLET_ALPHA)
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gamma_dist = Gamma::new(alpha, 1.0).expect("valid gamma shape");
    let draws: Vec<f64> = (0..labels.len()).map(|_| gamma_dist.sample(&mut rng)).collect();
    let total: f64 = draws.iter().sum();
    let gammas: Vec<f64> = draws.iter().map(|d| d / total).collect();

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&i, &j| etas[i].total_cmp(&etas[j]));

    let pick_most_common = |candidates: &[usize], count: usize| -> Vec<usize> {
        let mut sorted = candidates.to_vec();
        sorted.sort_by(|&i, &j| gammas[j].total_cmp(&gammas[i]));
        sorted.truncate(count);
        sorted
    };
    let mut weights = gammas.clone();
    for &i in &pick_most_common(&order[..10], 2) {
        weights[i] = 2.0 * gammas[i];
    }
    if with_z4 {
        let high: Vec<usize> = order[order.len() - 10..].to_vec();
        for &i in &pick_most_common(&high, 3) {
            weights[i] = gammas[i] * DGP4_UNDERSAMPLE;
        }
    }
    let wsum: f64 = weights.iter().sum();
    let sampling: Vec<f64> = weights.iter().map(|w| w / wsum).collect();

    SelectionTable { labels, gammas, sampling }
}

/// Parse a `stratum,gamma,s` CSV replacing the built-in table; labels must
/// cover exactly the factorial strata of the chosen DGP.
pub fn selection_table_from_csv(dgp: Dgp, text: &str) -> Result<SelectionTable> {
    let with_z4 = matches!(dgp, Dgp::Dgp4 | Dgp::Dgp4Mis);
    let (expected_labels, _) = factorial_strata(with_z4);
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Input(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["stratum", "gamma", "s"] {
        return Err(Error::Input(format!(
            "table file header must be `stratum,gamma,s`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut by_label = std::collections::HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Input(format!("table file line {}: {e}", i + 2)))?;
        let label = row.get(0).unwrap_or("").to_string();
        let gamma: f64 = row
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Input(format!("table file line {}: bad gamma", i + 2)))?;
        let s: f64 = row
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Input(format!("table file line {}: bad s", i + 2)))?;
        if by_label.insert(label.clone(), (gamma, s)).is_some() {
            return Err(Error::Input(format!("table file: duplicate stratum `{label}`")));
        }
    }
    let mut gammas = Vec::with_capacity(expected_labels.len());
    let mut sampling = Vec::with_capacity(expected_labels.len());
    for label in &expected_labels {
        let (g, s) = by_label
            .remove(label)
            .ok_or_else(|| Error::Input(format!("table file: missing stratum `{label}`")))?;
        gammas.push(g);
        sampling.push(s);
    }
    if let Some(extra) = by_label.keys().next() {
        return Err(Error::Input(format!("table file: unexpected stratum `{extra}`")));
    }
    let gsum: f64 = gammas.iter().sum();
    let ssum: f64 = sampling.iter().sum();
    if (gsum - 1.0).abs() > 1e-8 || (ssum - 1.0).abs() > 1e-8 {
        return Err(Error::Input(format!(
            "table file: gamma and s must each sum to 1 (got {gsum} and {ssum})"
        )));
    }
    Ok(SelectionTable { labels: expected_labels, gammas, sampling })
}

pub(crate) fn build_population(
    dgp: Dgp,
    params: GenParams,
    table_override: Option<&SelectionTable>,
) -> Result<Population> {
    let GenParams { pi, sigma_e, sigma_p, .. } = params;
    match dgp {
        Dgp::Dgp1 => {
            let labels = vec!["all".to_string()];
            let table = StratumTable::new(vec![("all".into(), 1.0)])?;
            Population::assemble(
                table,
                labels,
                vec![1.0],
                vec![pi],
                false,
                RegressionSpec::intercept_only(Link::Logit),
                pi,
                params,
            )
        }
        Dgp::Dgp2 => {
            if 1.5 * pi > 1.0 {
                return Err(Error::Infeasible(format!(
                    "dgp2 needs 1.5 * pi <= 1, got pi = {pi}"
                )));
            }
            let labels = vec!["z1".to_string(), "z2".to_string()];
            let table = StratumTable::new(vec![("z1".into(), 0.5), ("z2".into(), 0.5)])?;
            let spec = RegressionSpec::saturated(Link::Logit, &labels);
            Population::assemble(
                table,
                labels,
                vec![0.2, 0.8],
                vec![1.5 * pi, 0.5 * pi],
                false,
                spec,
                pi,
                params,
            )
        }
        Dgp::Dgp3 | Dgp::Dgp4 | Dgp::Dgp3Mis | Dgp::Dgp4Mis => {
            let with_z4 = matches!(dgp, Dgp::Dgp4 | Dgp::Dgp4Mis);
            let model_on_x = matches!(dgp, Dgp::Dgp3 | Dgp::Dgp4);
            let built;
            let sel = match table_override {
                Some(t) => t,
                None => {
                    built = default_selection_table(dgp);
                    &built
                }
            };
            let (labels, slopes) = factorial_strata(with_z4);
            let coefs: &[f64] = if with_z4 { &DGP4_COEFS } else { &DGP3_COEFS };
            let etas = slope_etas(&slopes, coefs);
            let b0 = balance_intercept(model_on_x, &etas, &sel.gammas, pi, sigma_e, sigma_p)?;
            let event_prob: Vec<f64> = etas.iter().map(|eta| expit(b0 + eta)).collect();

            let table = StratumTable::new(
                labels.iter().cloned().zip(sel.gammas.iter().copied()).collect(),
            )?;
            let design: std::collections::HashMap<String, Vec<f64>> = labels
                .iter()
                .zip(&slopes)
                .map(|(l, h)| {
                    let mut full = Vec::with_capacity(h.len() + 1);
                    full.push(1.0);
                    full.extend_from_slice(h);
                    (l.clone(), full)
                })
                .collect();
            let p = coefs.len() + 1;
            let spec =
                RegressionSpec::new(Link::Logit, p, move |label: &str| design.get(label).cloned());
            Population::assemble(
                table,
                labels,
                sel.sampling.clone(),
                event_prob,
                model_on_x,
                spec,
                pi,
                params,
            )
        }
    }
}

impl Population {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        table: StratumTable,
        labels: Vec<String>,
        sampling: Vec<f64>,
        event_prob: Vec<f64>,
        model_on_x: bool,
        spec: RegressionSpec,
        true_pi: f64,
        params: GenParams,
    ) -> Result<Population> {
        let picker = WeightedIndex::new(&sampling)
            .map_err(|e| Error::Input(format!("sampling probabilities: {e}")))?;
        Ok(Population { table, labels, picker, event_prob, model_on_x, spec, true_pi, params })
    }
}

// ---------------------------------------------------------------------------
// Replicate streams and the main loop
// ---------------------------------------------------------------------------

/// Independent, scheduling-free stream for one replicate: the ChaCha key is
/// the (master, scenario, replicate) coordinate plus a fixed domain tag.
pub fn replicate_rng(master_seed: u64, scenario: u64, replicate: u64) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&scenario.to_le_bytes());
    seed[16..24].copy_from_slice(&replicate.to_le_bytes());
    seed[24..32].copy_from_slice(&0x5345_524f_5052_4556_u64.to_le_bytes());
    ChaCha12Rng::from_seed(seed)
}

/// Generate one dataset for a DGP at the given parameters.
pub fn generate(
    dgp: Dgp,
    params: GenParams,
    rng: &mut ChaCha12Rng,
) -> Result<(ValidationStudy, MainStudy, StratumTable, f64)> {
    let pop = build_population(dgp, params, None)?;
    let (v, m) = pop.draw(rng)?;
    Ok((v, m, pop.table.clone(), pop.true_pi))
}

#[derive(Clone, Copy, Default)]
struct EstOutcome {
    bias: Option<f64>,
    covered: Option<bool>,
    heywood: bool,
    truncated: bool,
    failed: bool,
}

struct RepOutcome {
    nonpositive: bool,
    per_estimator: Vec<EstOutcome>,
}

fn run_estimator(
    method: Method,
    v: &ValidationStudy,
    m: &MainStudy,
    pop: &Population,
    opts: &EstimationOptions,
) -> EstOutcome {
    let result = match method {
        Method::Rg => estimators::rg_analysis(v, m, opts),
        Method::Srg => estimators::srg_analysis(v, m, pop.table(), opts),
        Method::Srgm => estimators::srgm_analysis(v, m, pop.table(), pop.spec(), opts),
        Method::Naive => unreachable!("rejected by config validation"),
    };
    match result {
        Ok(est) => {
            let heywood = est.flags.heywood;
            let covered = if heywood {
                None
            } else {
                est.ci().map(|(lo, hi)| lo <= pop.true_pi() && pop.true_pi() <= hi)
            };
            EstOutcome {
                bias: Some(est.point - pop.true_pi()),
                covered,
                heywood,
                truncated: est.flags.truncated_point,
                failed: false,
            }
        }
        Err(_) => EstOutcome { failed: true, ..EstOutcome::default() },
    }
}

/// Run the full factorial grid. Scenario order is pi (outer) x sigma_e x
/// sigma_p (inner); replicates parallelize; reduction is sequential.
pub fn run(config: &SimulationConfig) -> Result<Vec<ScenarioResult>> {
    config.validate()?;
    let table_override = match (&config.table_file, config.dgp) {
        (Some(path), Dgp::Dgp3 | Dgp::Dgp4 | Dgp::Dgp3Mis | Dgp::Dgp4Mis) => {
            let text = std::fs::read_to_string(path)?;
            Some(selection_table_from_csv(config.dgp, &text)?)
        }
        (Some(_), _) => {
            return Err(Error::Input(
                "table_file applies only to dgp3/dgp4 and their misspecified variants".into(),
            ))
        }
        (None, _) => None,
    };
    let opts = EstimationOptions { level: config.level, truncated_plugin: config.truncate_plugin };

    let mut results = Vec::new();
    let mut scenario_id: u64 = 0;
    for &pi in &config.pi_grid {
        for &sigma_e in &config.sigma_e_grid {
            for &sigma_p in &config.sigma_p_grid {
                let params = GenParams {
                    pi,
                    sigma_e,
                    sigma_p,
                    n1: config.n1,
                    n2: config.n2,
                    n3: config.n3,
                };
                results.push(run_scenario(
                    config,
                    scenario_id,
                    params,
                    table_override.as_ref(),
                    &opts,
                ));
                scenario_id += 1;
            }
        }
    }
    Ok(results)
}

fn run_scenario(
    config: &SimulationConfig,
    scenario_id: u64,
    params: GenParams,
    table_override: Option<&SelectionTable>,
    opts: &EstimationOptions,
) -> ScenarioResult {
    let base = ScenarioResult {
        dgp: config.dgp,
        pi: params.pi,
        sigma_e: params.sigma_e,
        sigma_p: params.sigma_p,
        replicates: config.replicates,
        skipped: None,
        estimators: Vec::new(),
    };
    let pop = match build_population(config.dgp, params, table_override) {
        Ok(pop) => pop,
        Err(e) => return ScenarioResult { skipped: Some(e.to_string()), ..base },
    };

    let outcomes: Vec<Result<RepOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(config.master_seed, scenario_id, rep);
            let (v, m) = pop.draw(&mut rng)?;
            let counts = m.stratum_counts(pop.table())?;
            let nonpositive = counts.iter().any(|(_, n_z)| *n_z == 0);
            let per_estimator = config
                .estimators
                .iter()
                .map(|&method| run_estimator(method, &v, &m, &pop, opts))
                .collect();
            Ok(RepOutcome { nonpositive, per_estimator })
        })
        .collect();

    // Sequential reduction in replicate order keeps results independent of
    // the worker-thread count.
    let n_est = config.estimators.len();
    let mut bias_sum = vec![0.0_f64; n_est];
    let mut bias_n = vec![0u64; n_est];
    let mut covered = vec![0u64; n_est];
    let mut covered_n = vec![0u64; n_est];
    let mut heywood = vec![0u64; n_est];
    let mut truncated = vec![0u64; n_est];
    let mut failures = vec![0u64; n_est];
    let mut nonpos_count = 0u64;
    for outcome in outcomes {
        let Ok(rep) = outcome else {
            for f in failures.iter_mut() {
                *f += 1;
            }
            continue;
        };
        if rep.nonpositive {
            nonpos_count += 1;
        }
        for (e, out) in rep.per_estimator.iter().enumerate() {
            if out.failed {
                failures[e] += 1;
                continue;
            }
            if let Some(b) = out.bias {
                bias_sum[e] += b;
                bias_n[e] += 1;
            }
            if out.heywood {
                heywood[e] += 1;
            }
            if let Some(c) = out.covered {
                covered_n[e] += 1;
                if c {
                    covered[e] += 1;
                }
            }
            if out.truncated {
                truncated[e] += 1;
            }
        }
    }

    let nonpositivity_fraction = nonpos_count as f64 / config.replicates as f64;
    let estimators = config
        .estimators
        .iter()
        .enumerate()
        .map(|(e, &method)| EstimatorSummary {
            method,
            mean_bias: if bias_n[e] > 0 { bias_sum[e] / bias_n[e] as f64 } else { f64::NAN },
            coverage: if covered_n[e] > 0 {
                covered[e] as f64 / covered_n[e] as f64
            } else {
                f64::NAN
            },
            heywood_count: heywood[e],
            nonpositivity_fraction,
            truncation_count: truncated[e],
            failures: failures[e],
        })
        .collect();

    ScenarioResult { estimators, ..base }
}

/// Long-format results CSV, one row per scenario x estimator.
pub fn write_results_csv<W: Write>(results: &[ScenarioResult], mut w: W) -> Result<()> {
    writeln!(
        w,
        "dgp,pi,sigma_e,sigma_p,estimator,mean_bias,coverage,heywood_count,\
         nonpositivity_fraction,truncation_count"
    )?;
    for r in results {
        if r.skipped.is_some() {
            continue;
        }
        for e in &r.estimators {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.dgp,
                r.pi,
                r.sigma_e,
                r.sigma_p,
                e.method,
                e.mean_bias,
                e.coverage,
                e.heywood_count,
                e.nonpositivity_fraction,
                e.truncation_count
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::logit;
    use approx::assert_abs_diff_eq;

    fn params(pi: f64, se: f64, sp: f64) -> GenParams {
        GenParams { pi, sigma_e: se, sigma_p: sp, n1: 40, n2: 250, n3: 2500 }
    }

    #[test]
    fn identical_streams_give_identical_datasets() {
        let p = params(0.1, 0.99, 0.95);
        let mut r1 = replicate_rng(42, 3, 7);
        let mut r2 = replicate_rng(42, 3, 7);
        let (v1, m1, t1, pi1) = generate(Dgp::Dgp2, p, &mut r1).unwrap();
        let (v2, m2, t2, pi2) = generate(Dgp::Dgp2, p, &mut r2).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        assert_eq!(pi1, pi2);
        // Different replicate id: almost surely different data.
        let mut r3 = replicate_rng(42, 3, 8);
        let (_, m3, _, _) = generate(Dgp::Dgp2, p, &mut r3).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn dgp2_infeasible_when_stratum_probability_exceeds_one() {
        let p = params(0.7, 0.99, 0.95);
        let mut rng = replicate_rng(1, 0, 0);
        match generate(Dgp::Dgp2, p, &mut rng) {
            Err(Error::Infeasible(_)) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn balance_intercept_single_stratum_closed_form() {
        let b0 = balance_intercept(true, &[0.0], &[1.0], 0.10, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(b0, logit(0.10), epsilon = 1e-9);
    }

    #[test]
    fn balance_intercept_monotone_in_target() {
        let (_, slopes) = factorial_strata(false);
        let etas = slope_etas(&slopes, &DGP3_COEFS);
        let gammas = vec![1.0 / etas.len() as f64; etas.len()];
        let mut prev = f64::NEG_INFINITY;
        for &target in &[0.02, 0.05, 0.1, 0.15, 0.2] {
            let b0 = balance_intercept(true, &etas, &gammas, target, 0.99, 0.95).unwrap();
            assert!(b0 > prev);
            prev = b0;
        }
    }

    #[test]
    fn balance_intercept_monte_carlo_check() {
        // Large-sample draw from the balanced dgp3 population stays near the
        // target prevalence.
        let sel = default_selection_table(Dgp::Dgp3);
        let (_, slopes) = factorial_strata(false);
        let etas = slope_etas(&slopes, &DGP3_COEFS);
        let (se, sp, target) = (0.99, 0.95, 0.05);
        let b0 = balance_intercept(true, &etas, &sel.gammas, target, se, sp).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let picker = WeightedIndex::new(&sel.gammas).unwrap(); // population shares
        let n = 1_000_000;
        let mut positives = 0u64;
        for _ in 0..n {
            let z = picker.sample(&mut rng);
            if rng.random::<f64>() < expit(b0 + etas[z]) {
                positives += 1;
            }
        }
        let rho = positives as f64 / n as f64;
        let pi_mc = (rho + sp - 1.0) / (se + sp - 1.0);
        assert!(
            (pi_mc - target).abs() < 0.002,
            "monte carlo prevalence {pi_mc} vs target {target}"
        );
    }

    #[test]
    fn selection_tables_are_valid_distributions() {
        for dgp in [Dgp::Dgp3, Dgp::Dgp4] {
            let t = default_selection_table(dgp);
            assert_abs_diff_eq!(t.gammas.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(t.sampling.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(t.gammas.iter().all(|&g| g > 0.0));
            assert!(t.sampling.iter().all(|&s| s > 0.0));
        }
        assert_eq!(default_selection_table(Dgp::Dgp3).labels.len(), 40);
        assert_eq!(default_selection_table(Dgp::Dgp4).labels.len(), 80);
    }

    #[test]
    fn run_single_replicate_coverage_is_zero_or_one() {
        let cfg = SimulationConfig {
            dgp: Dgp::Dgp1,
            pi_grid: vec![0.1],
            sigma_e_grid: vec![0.99],
            sigma_p_grid: vec![0.95],
            n1: 40,
            n2: 250,
            n3: 500,
            replicates: 1,
            master_seed: 5,
            estimators: vec![Method::Rg],
            level: 0.95,
            truncate_plugin: true,
            table_file: None,
        };
        let results = run(&cfg).unwrap();
        assert_eq!(results.len(), 1);
        let cov = results[0].estimators[0].coverage;
        assert!(cov == 0.0 || cov == 1.0);
    }

    #[test]
    fn coverage_denominator_is_integral() {
        let cfg = SimulationConfig {
            dgp: Dgp::Dgp2,
            pi_grid: vec![0.1],
            sigma_e_grid: vec![0.99],
            sigma_p_grid: vec![0.95],
            n1: 40,
            n2: 250,
            n3: 1000,
            replicates: 60,
            master_seed: 11,
            estimators: vec![Method::Rg, Method::Srg],
            level: 0.95,
            truncate_plugin: true,
            table_file: None,
        };
        let results = run(&cfg).unwrap();
        for e in &results[0].estimators {
            let denom = (cfg.replicates - e.heywood_count - e.failures) as f64;
            let product = e.coverage * denom;
            assert!((product - product.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
dgp = "dgp3_mis"
pi_grid = [0.05, 0.1]
sigma_e_grid = [0.99]
sigma_p_grid = [0.95]
n1 = 40
n2 = 250
n3 = 2500
replicates = 10
master_seed = 7
estimators = ["srg", "srgm"]
"#;
        let cfg = SimulationConfig::from_toml(text).unwrap();
        assert_eq!(cfg.dgp, Dgp::Dgp3Mis);
        assert_eq!(cfg.estimators, vec![Method::Srg, Method::Srgm]);
        assert_eq!(cfg.level, 0.95);
        assert!(SimulationConfig::from_toml("dgp = \"dgp9\"").is_err());
    }
}
