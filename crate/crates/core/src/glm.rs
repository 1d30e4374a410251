//! Maximum-likelihood binary regression on grouped stratum data.
//!
//! Records are grouped by stratum label before fitting, so a Newton iteration
//! costs O(k p^2) regardless of the number of individual records. The logit
//! link uses full Newton-Raphson (observed = expected information); probit
//! uses Fisher scoring with the expected information.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{MainStudy, RegressionSpec};

/// Score max-norm below which the fit is declared converged.
pub const SCORE_TOL: f64 = 1e-8;
/// Relative coefficient-change tolerance.
pub const COEF_TOL: f64 = 1e-10;
/// Iteration cap.
pub const MAX_ITER: usize = 100;
/// |linear predictor| beyond which an unconverged fit is called separated.
const SEPARATION_ETA: f64 = 30.0;
/// Maximum step halvings per iteration.
const MAX_HALVINGS: usize = 20;

/// A converged fit: coefficients plus per-stratum fitted probabilities.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    /// Observed strata in first-appearance order with fitted means in (0,1).
    pub fitted: Vec<(String, f64)>,
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn fitted_for(&self, label: &str) -> Option<f64> {
        self.fitted.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }
}

/// Records grouped by stratum: successes and trials per observed label.
#[derive(Debug, Clone)]
pub(crate) struct GroupedData {
    pub labels: Vec<String>,
    pub design: Vec<DVector<f64>>,
    pub successes: Vec<f64>,
    pub trials: Vec<f64>,
}

impl GroupedData {
    pub(crate) fn etas(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.design.iter().map(|h| h.dot(beta)).collect()
    }
}

pub(crate) fn group(m: &MainStudy, spec: &RegressionSpec) -> Result<GroupedData> {
    let mut labels: Vec<String> = Vec::new();
    let mut successes: Vec<f64> = Vec::new();
    let mut trials: Vec<f64> = Vec::new();
    for (i, rec) in m.records().iter().enumerate() {
        let label = rec.stratum.as_deref().ok_or_else(|| {
            Error::Input(format!(
                "record {} has no stratum label; model fitting requires one",
                i + 1
            ))
        })?;
        let idx = match labels.iter().position(|l| l == label) {
            Some(idx) => idx,
            None => {
                labels.push(label.to_string());
                successes.push(0.0);
                trials.push(0.0);
                labels.len() - 1
            }
        };
        trials[idx] += 1.0;
        if rec.positive {
            successes[idx] += 1.0;
        }
    }
    let design = labels
        .iter()
        .map(|l| Ok(DVector::from_vec(spec.design_vector(l)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupedData { labels, design, successes, trials })
}

fn check_rank(g: &GroupedData, p: usize) -> Result<()> {
    let k = g.labels.len();
    if p > k {
        return Err(Error::Design(format!(
            "model has {p} coefficients but only {k} sampled strata"
        )));
    }
    let x = DMatrix::from_fn(k, p, |i, j| g.design[i][j]);
    let svd = x.svd(false, false);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (k.max(p) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p {
        return Err(Error::Design(format!(
            "design matrix over sampled strata has rank {rank} < {p} columns"
        )));
    }
    Ok(())
}

fn grouped_score(g: &GroupedData, spec: &RegressionSpec, etas: &[f64]) -> DVector<f64> {
    let p = spec.p();
    let link = spec.link();
    let mut s = DVector::zeros(p);
    for j in 0..g.labels.len() {
        let mu = link.inverse(etas[j]);
        let w = (g.successes[j] - g.trials[j] * mu) * link.score_weight(etas[j]);
        s.axpy(w, &g.design[j], 1.0);
    }
    s
}

fn grouped_information(g: &GroupedData, spec: &RegressionSpec, etas: &[f64]) -> DMatrix<f64> {
    let p = spec.p();
    let link = spec.link();
    let mut info = DMatrix::zeros(p, p);
    for j in 0..g.labels.len() {
        let w = g.trials[j] * link.info_weight(etas[j]);
        info.syger(w, &g.design[j], &g.design[j], 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for r in 0..p {
        for c in (r + 1)..p {
            info[(r, c)] = info[(c, r)];
        }
    }
    info
}

fn grouped_log_likelihood(g: &GroupedData, spec: &RegressionSpec, etas: &[f64]) -> f64 {
    let link = spec.link();
    let mut ll = 0.0;
    for j in 0..g.labels.len() {
        match link {
            crate::model::Link::Logit => {
                // y*eta - n*log(1 + e^eta), stable for large |eta|.
                let eta = etas[j];
                let softplus = if eta > 30.0 {
                    eta
                } else if eta < -30.0 {
                    eta.exp()
                } else {
                    eta.exp().ln_1p()
                };
                ll += g.successes[j] * eta - g.trials[j] * softplus;
            }
            crate::model::Link::Probit => {
                let mu = link.inverse(etas[j]).clamp(1e-300, 1.0 - 1e-16);
                ll += g.successes[j] * mu.ln()
                    + (g.trials[j] - g.successes[j]) * (1.0 - mu).ln();
            }
        }
    }
    ll
}

/// Fit the binary regression by Newton-Raphson with step-halving.
pub fn fit(m: &MainStudy, spec: &RegressionSpec) -> Result<FitResult> {
    let g = group(m, spec)?;
    check_rank(&g, spec.p())?;
    fit_grouped(&g, spec)
}

pub(crate) fn fit_grouped(g: &GroupedData, spec: &RegressionSpec) -> Result<FitResult> {
    let p = spec.p();
    let mut beta = DVector::zeros(p);
    let mut etas = g.etas(&beta);
    let mut ll = grouped_log_likelihood(g, spec, &etas);
    let mut score = grouped_score(g, spec, &etas);
    let mut iterations = 0;

    loop {
        let score_norm = score.amax();
        if score_norm < SCORE_TOL {
            // One last full Newton step sharpens beta to machine precision.
            let info = grouped_information(g, spec, &etas);
            if let Some(step) = info.lu().solve(&score) {
                let cand = &beta + &step;
                let cand_score = grouped_score(g, spec, &g.etas(&cand));
                if cand_score.amax() <= score_norm {
                    return finish(g, spec, cand, cand_score.amax(), iterations);
                }
            }
            return finish(g, spec, beta, score_norm, iterations);
        }
        if iterations >= MAX_ITER {
            return Err(Error::NonConvergence { iterations, score_norm });
        }
        if etas.iter().any(|e| e.abs() > SEPARATION_ETA) {
            return Err(Error::Separation(format!(
                "a linear predictor exceeded {SEPARATION_ETA} in magnitude before convergence \
                 (often caused by a stratum with all-identical outcomes)"
            )));
        }

        let info = grouped_information(g, spec, &etas);
        let step = info
            .clone()
            .lu()
            .solve(&score)
            .ok_or_else(|| Error::Singular("information matrix in regression fit".into()))?;

        // Step-halving keeps the log-likelihood non-decreasing.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + t * &step;
            let cand_etas = g.etas(&cand);
            let cand_ll = grouped_log_likelihood(g, spec, &cand_etas);
            if cand_ll >= ll || cand_ll.is_finite() && (cand_ll - ll).abs() < 1e-14 * ll.abs() {
                let rel_change = (0..p)
                    .map(|i| (t * step[i]).abs() / beta[i].abs().max(1.0))
                    .fold(0.0_f64, f64::max);
                beta = cand;
                etas = cand_etas;
                ll = cand_ll;
                score = grouped_score(g, spec, &etas);
                iterations += 1;
                accepted = true;
                if rel_change < COEF_TOL {
                    let score_norm = score.amax();
                    return finish(g, spec, beta, score_norm, iterations);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence { iterations, score_norm: score.amax() });
        }
    }
}

fn finish(
    g: &GroupedData,
    spec: &RegressionSpec,
    beta: DVector<f64>,
    score_norm: f64,
    iterations: usize,
) -> Result<FitResult> {
    let link = spec.link();
    let fitted = g
        .labels
        .iter()
        .zip(g.etas(&beta))
        .map(|(l, eta)| (l.clone(), link.inverse(eta.clamp(-36.0, 36.0))))
        .collect();
    Ok(FitResult { beta_hat: beta, fitted, score_norm, iterations, converged: true })
}

/// Analytic score (gradient of the grouped log-likelihood) at `beta`.
pub fn score(beta: &DVector<f64>, m: &MainStudy, spec: &RegressionSpec) -> Result<DVector<f64>> {
    let g = group(m, spec)?;
    Ok(grouped_score(&g, spec, &g.etas(beta)))
}

/// Negative expected-information matrix at `beta` (the Hessian of the
/// grouped log-likelihood for the canonical logit link).
pub fn hessian(beta: &DVector<f64>, m: &MainStudy, spec: &RegressionSpec) -> Result<DMatrix<f64>> {
    let g = group(m, spec)?;
    Ok(-grouped_information(&g, spec, &g.etas(beta)))
}

/// Grouped log-likelihood at `beta`; exposed for diagnostics and testing.
pub fn log_likelihood(beta: &DVector<f64>, m: &MainStudy, spec: &RegressionSpec) -> Result<f64> {
    let g = group(m, spec)?;
    Ok(grouped_log_likelihood(&g, spec, &g.etas(beta)))
}
