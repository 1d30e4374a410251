//! Per-observation estimating-function stacks for the three estimators.
//!
//! Each stack pairs the observed data with the parameter vector solving the
//! stacked equations, in the form [`numeric_sandwich`](crate::variance::numeric_sandwich)
//! consumes. Constraint components (the standardization and correction
//! equations) are replicated across observations, so the mean estimating
//! function matches the analytic bread row for row.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimators;
use crate::glm::FitResult;
use crate::model::{MainStudy, RegressionSpec, StratumTable, ValidationStudy};
use crate::variance::PsiStack;

#[derive(Clone, Copy, PartialEq)]
enum Study {
    Sens,
    Spec,
    Main,
}

struct Obs {
    study: Study,
    x: f64,
    stratum: usize,
}

fn flatten(v: &ValidationStudy, m: &MainStudy, stratum_of: impl Fn(&str) -> Result<usize>) -> Result<Vec<Obs>> {
    let mut obs = Vec::with_capacity((v.n_sens() + v.n_spec() + m.n()) as usize);
    for i in 0..v.n_sens() {
        obs.push(Obs {
            study: Study::Sens,
            x: if i < v.x_sens_pos() { 1.0 } else { 0.0 },
            stratum: usize::MAX,
        });
    }
    for i in 0..v.n_spec() {
        obs.push(Obs {
            study: Study::Spec,
            x: if i < v.x_spec_neg() { 0.0 } else { 1.0 },
            stratum: usize::MAX,
        });
    }
    for (i, rec) in m.records().iter().enumerate() {
        let label = rec.stratum.as_deref().ok_or_else(|| {
            Error::Input(format!("record {} has no stratum label", i + 1))
        })?;
        obs.push(Obs {
            study: Study::Main,
            x: if rec.positive { 1.0 } else { 0.0 },
            stratum: stratum_of(label)?,
        });
    }
    Ok(obs)
}

/// Stack for the unstandardized estimator: theta = (sigma_e, sigma_p, rho, pi).
pub fn rg_stack(v: &ValidationStudy, m: &MainStudy) -> Result<PsiStack> {
    let (se, sp) = estimators::estimate_assay(v);
    let rho = m.positives() as f64 / m.n() as f64;
    let pi_raw = estimators::rogan_gladen(rho, se, sp)?.point_raw;

    let mut obs = Vec::with_capacity((v.n_sens() + v.n_spec() + m.n()) as usize);
    for i in 0..v.n_sens() {
        obs.push(Obs {
            study: Study::Sens,
            x: if i < v.x_sens_pos() { 1.0 } else { 0.0 },
            stratum: usize::MAX,
        });
    }
    for i in 0..v.n_spec() {
        obs.push(Obs {
            study: Study::Spec,
            x: if i < v.x_spec_neg() { 0.0 } else { 1.0 },
            stratum: usize::MAX,
        });
    }
    for rec in m.records() {
        obs.push(Obs {
            study: Study::Main,
            x: if rec.positive { 1.0 } else { 0.0 },
            stratum: usize::MAX,
        });
    }

    let theta = DVector::from_vec(vec![se, sp, rho, pi_raw]);
    Ok(PsiStack::new(obs.len(), theta, move |i, th| {
        let o = &obs[i];
        let mut out = DVector::zeros(4);
        match o.study {
            Study::Sens => out[0] = o.x - th[0],
            Study::Spec => out[1] = (1.0 - o.x) - th[1],
            Study::Main => out[2] = o.x - th[2],
        }
        out[3] = (th[2] + th[1] - 1.0) - th[3] * (th[0] + th[1] - 1.0);
        out
    }))
}

/// Stack for the nonparametric standardized estimator:
/// theta = (sigma_e, sigma_p, rho_1..rho_k, rho, pi). Requires positivity.
pub fn srg_stack(v: &ValidationStudy, m: &MainStudy, t: &StratumTable) -> Result<PsiStack> {
    let (se, sp) = estimators::estimate_assay(v);
    let counts = m.stratum_counts(t)?;
    if counts.iter().any(|(_, n_z)| *n_z == 0) {
        return Err(Error::NoData(
            "the standardized stack requires every stratum to be sampled".into(),
        ));
    }
    let k = t.len();
    let gammas = Arc::new(t.gammas());
    let means: Vec<f64> = counts.iter().map(|(pos, n_z)| *pos as f64 / *n_z as f64).collect();
    let rho_srg: f64 = gammas.iter().zip(&means).map(|(g, r)| g * r).sum();
    let pi_raw = estimators::rogan_gladen(rho_srg, se, sp)?.point_raw;

    let table = t.clone();
    let obs = flatten(v, m, |label| {
        table
            .index_of(label)
            .ok_or_else(|| Error::Input(format!("unknown stratum label `{label}`")))
    })?;

    let mut theta = vec![se, sp];
    theta.extend_from_slice(&means);
    theta.push(rho_srg);
    theta.push(pi_raw);
    let theta = DVector::from_vec(theta);

    Ok(PsiStack::new(obs.len(), theta, move |i, th| {
        let o = &obs[i];
        let mut out = DVector::zeros(k + 4);
        match o.study {
            Study::Sens => out[0] = o.x - th[0],
            Study::Spec => out[1] = (1.0 - o.x) - th[1],
            Study::Main => out[2 + o.stratum] = o.x - th[2 + o.stratum],
        }
        let mut rho_std = 0.0;
        for (j, g) in gammas.iter().enumerate() {
            rho_std += g * th[2 + j];
        }
        out[k + 2] = rho_std - th[k + 2];
        out[k + 3] = (th[k + 2] + th[1] - 1.0) - th[k + 3] * (th[0] + th[1] - 1.0);
        out
    }))
}

/// Stack for the model-standardized estimator:
/// theta = (sigma_e, sigma_p, beta_1..beta_p, rho, pi).
pub fn srgm_stack(
    v: &ValidationStudy,
    m: &MainStudy,
    t: &StratumTable,
    spec: &RegressionSpec,
    fit: &FitResult,
) -> Result<PsiStack> {
    let (se, sp) = estimators::estimate_assay(v);
    let p = spec.p();
    let link = spec.link();
    let rho_srgm = estimators::standardized_mean(fit, t, spec)?;
    let pi_raw = estimators::rogan_gladen(rho_srgm, se, sp)?.point_raw;

    // Distinct design vectors, indexed per record and per table stratum.
    let mut designs: Vec<DVector<f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut index_of = |label: &str, spec: &RegressionSpec| -> Result<usize> {
        if let Some(i) = labels.iter().position(|l| l == label) {
            return Ok(i);
        }
        designs.push(DVector::from_vec(spec.design_vector(label)?));
        labels.push(label.to_string());
        Ok(labels.len() - 1)
    };

    let mut table_rows: Vec<(usize, f64)> = Vec::with_capacity(t.len());
    for (label, gamma) in t.iter() {
        table_rows.push((index_of(label, spec)?, gamma));
    }
    let obs = {
        let mut obs = Vec::with_capacity((v.n_sens() + v.n_spec() + m.n()) as usize);
        for i in 0..v.n_sens() {
            obs.push(Obs {
                study: Study::Sens,
                x: if i < v.x_sens_pos() { 1.0 } else { 0.0 },
                stratum: usize::MAX,
            });
        }
        for i in 0..v.n_spec() {
            obs.push(Obs {
                study: Study::Spec,
                x: if i < v.x_spec_neg() { 0.0 } else { 1.0 },
                stratum: usize::MAX,
            });
        }
        for (i, rec) in m.records().iter().enumerate() {
            let label = rec.stratum.as_deref().ok_or_else(|| {
                Error::Input(format!("record {} has no stratum label", i + 1))
            })?;
            obs.push(Obs {
                study: Study::Main,
                x: if rec.positive { 1.0 } else { 0.0 },
                stratum: index_of(label, spec)?,
            });
        }
        obs
    };
    let designs = Arc::new(designs);

    let mut theta = vec![se, sp];
    theta.extend(fit.beta_hat.iter().copied());
    theta.push(rho_srgm);
    theta.push(pi_raw);
    let theta = DVector::from_vec(theta);

    Ok(PsiStack::new(obs.len(), theta, move |i, th| {
        let o = &obs[i];
        let mut out = DVector::zeros(p + 4);
        match o.study {
            Study::Sens => out[0] = o.x - th[0],
            Study::Spec => out[1] = (1.0 - o.x) - th[1],
            Study::Main => {
                let h = &designs[o.stratum];
                let mut eta = 0.0;
                for l in 0..p {
                    eta += h[l] * th[2 + l];
                }
                let w = (o.x - link.inverse(eta)) * link.score_weight(eta);
                for l in 0..p {
                    out[2 + l] = w * h[l];
                }
            }
        }
        let mut rho_std = 0.0;
        for &(idx, gamma) in &table_rows {
            let h = &designs[idx];
            let mut eta = 0.0;
            for l in 0..p {
                eta += h[l] * th[2 + l];
            }
            rho_std += gamma * link.inverse(eta);
        }
        out[p + 2] = rho_std - th[p + 2];
        out[p + 3] = (th[p + 2] + th[1] - 1.0) - th[p + 3] * (th[0] + th[1] - 1.0);
        out
    }))
}
