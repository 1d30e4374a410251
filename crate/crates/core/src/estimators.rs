//! Point estimators and full estimator-plus-interval pipelines.
//!
//! `naive_prevalence`, `rogan_gladen`, `srg`, and `srgm` return point
//! estimates only; the `*_analysis` functions attach the matching variance
//! estimator and a truncated Wald interval.

use crate::error::{Error, Result};
use crate::glm::{self, FitResult};
use crate::model::{
    MainStudy, Method, PrevalenceEstimate, RegressionSpec, SampleFractions, StratumTable,
    ValidationStudy,
};
use crate::variance;

/// Estimated sensitivity and specificity from validation counts.
pub fn estimate_assay(v: &ValidationStudy) -> (f64, f64) {
    let sigma_e = v.x_sens_pos() as f64 / v.n_sens() as f64;
    let sigma_p = v.x_spec_neg() as f64 / v.n_spec() as f64;
    (sigma_e, sigma_p)
}

/// Sample proportion of positive tests, with an exact Clopper-Pearson CI.
pub fn naive_prevalence(m: &MainStudy, level: f64) -> PrevalenceEstimate {
    let point = m.positives() as f64 / m.n() as f64;
    let (lo, hi) = variance::clopper_pearson(m.positives(), m.n(), level);
    PrevalenceEstimate::from_point(Method::Naive, point).with_ci(lo, hi)
}

/// Rogan-Gladen correction of an apparent prevalence (point only).
pub fn rogan_gladen(rho_hat: f64, sigma_e_hat: f64, sigma_p_hat: f64) -> Result<PrevalenceEstimate> {
    let denom = sigma_e_hat + sigma_p_hat - 1.0;
    if denom == 0.0 {
        return Err(Error::DegenerateAssay);
    }
    let point_raw = (rho_hat + sigma_p_hat - 1.0) / denom;
    let mut est = PrevalenceEstimate::from_point(Method::Rg, point_raw);
    est.flags.inverted_assay = denom < 0.0;
    Ok(est)
}

/// Drop unsampled strata and renormalize the remaining proportions.
/// Returns the restricted table and the dropped labels.
pub fn restrict(m: &MainStudy, t: &StratumTable) -> Result<(StratumTable, Vec<String>)> {
    let counts = m.stratum_counts(t)?;
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for ((label, gamma), (_, n_z)) in t.iter().zip(&counts) {
        if *n_z == 0 {
            dropped.push(label.to_string());
        } else {
            retained.push((label.to_string(), gamma));
        }
    }
    if retained.is_empty() {
        return Err(Error::NoData("no stratum in the table was sampled".into()));
    }
    let total: f64 = retained.iter().map(|(_, g)| *g).sum();
    let renorm: Vec<(String, f64)> =
        retained.into_iter().map(|(l, g)| (l, g / total)).collect();
    Ok((StratumTable::new(renorm)?, dropped))
}

/// Standardized Rogan-Gladen estimator (point only). Applies restriction
/// when some strata are unsampled and records the dropped labels.
pub fn srg(
    m: &MainStudy,
    t: &StratumTable,
    sigma_e_hat: f64,
    sigma_p_hat: f64,
) -> Result<PrevalenceEstimate> {
    let (restricted, dropped) = restrict(m, t)?;
    let counts = m.stratum_counts(&restricted)?;
    let mut rho_srg = 0.0;
    for ((_, gamma), (pos, n_z)) in restricted.iter().zip(&counts) {
        rho_srg += gamma * (*pos as f64 / *n_z as f64);
    }
    let mut est = rogan_gladen(rho_srg, sigma_e_hat, sigma_p_hat)?;
    est.method = Method::Srg;
    est.flags.restricted = !dropped.is_empty();
    est.flags.nonpositivity_strata = dropped;
    Ok(est)
}

/// Model-standardized Rogan-Gladen estimator (point only), standardizing the
/// fitted stratum means over every stratum of the original table.
pub fn srgm(
    m: &MainStudy,
    t: &StratumTable,
    spec: &RegressionSpec,
    sigma_e_hat: f64,
    sigma_p_hat: f64,
) -> Result<PrevalenceEstimate> {
    let fit = glm::fit(m, spec)?;
    srgm_from_fit(&fit, t, spec, sigma_e_hat, sigma_p_hat)
}

/// As [`srgm`], reusing an existing fit.
pub fn srgm_from_fit(
    fit: &FitResult,
    t: &StratumTable,
    spec: &RegressionSpec,
    sigma_e_hat: f64,
    sigma_p_hat: f64,
) -> Result<PrevalenceEstimate> {
    let rho_srgm = standardized_mean(fit, t, spec)?;
    let mut est = rogan_gladen(rho_srgm, sigma_e_hat, sigma_p_hat)?;
    est.method = Method::Srgm;
    Ok(est)
}

/// Fitted apparent prevalence standardized over the full table.
pub fn standardized_mean(
    fit: &FitResult,
    t: &StratumTable,
    spec: &RegressionSpec,
) -> Result<f64> {
    let link = spec.link();
    let mut acc = 0.0;
    for (label, gamma) in t.iter() {
        let h = spec.design_vector(label)?;
        let eta: f64 = h.iter().zip(fit.beta_hat.iter()).map(|(a, b)| a * b).sum();
        acc += gamma * link.inverse(eta);
    }
    Ok(acc)
}

/// Options shared by the full analysis pipelines.
#[derive(Debug, Clone, Copy)]
pub struct EstimationOptions {
    /// Confidence level for intervals.
    pub level: f64,
    /// Plug the truncated (rather than raw) point estimate into the
    /// variance formulas.
    pub truncated_plugin: bool,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self { level: 0.95, truncated_plugin: true }
    }
}

impl EstimationOptions {
    fn plugin(&self, est: &PrevalenceEstimate) -> f64 {
        if self.truncated_plugin {
            est.point
        } else {
            est.point_raw
        }
    }
}

/// Rogan-Gladen estimate with plug-in variance and truncated Wald CI.
pub fn rg_analysis(
    v: &ValidationStudy,
    m: &MainStudy,
    opts: &EstimationOptions,
) -> Result<PrevalenceEstimate> {
    let (se, sp) = estimate_assay(v);
    let rho_hat = m.positives() as f64 / m.n() as f64;
    let est = rogan_gladen(rho_hat, se, sp)?;
    let fractions = SampleFractions::from_counts(v.n_sens(), v.n_spec(), m.n())?;
    let n = SampleFractions::total(v.n_sens(), v.n_spec(), m.n()) as f64;
    let var = variance::var_rg(opts.plugin(&est), se, sp, rho_hat, &fractions)?;
    Ok(est.with_variance(var / n, opts.level))
}

/// Standardized estimate with plug-in variance and truncated Wald CI.
/// Restriction, when needed, applies to both the point and the variance.
pub fn srg_analysis(
    v: &ValidationStudy,
    m: &MainStudy,
    t: &StratumTable,
    opts: &EstimationOptions,
) -> Result<PrevalenceEstimate> {
    let (se, sp) = estimate_assay(v);
    let est = srg(m, t, se, sp)?;

    let (restricted, _) = restrict(m, t)?;
    let counts = m.stratum_counts(&restricted)?;
    let n3 = m.n() as f64;
    let means: Vec<f64> = counts.iter().map(|(pos, n_z)| *pos as f64 / *n_z as f64).collect();
    let fracs: Vec<f64> = counts.iter().map(|(_, n_z)| *n_z as f64 / n3).collect();
    let gammas = restricted.gammas();

    let fractions = SampleFractions::from_counts(v.n_sens(), v.n_spec(), m.n())?;
    let n = SampleFractions::total(v.n_sens(), v.n_spec(), m.n()) as f64;
    let var =
        variance::var_srg(opts.plugin(&est), se, sp, &means, &fracs, &gammas, &fractions)?;
    Ok(est.with_variance(var / n, opts.level))
}

/// Model-standardized estimate with empirical sandwich variance and
/// truncated Wald CI.
pub fn srgm_analysis(
    v: &ValidationStudy,
    m: &MainStudy,
    t: &StratumTable,
    spec: &RegressionSpec,
    opts: &EstimationOptions,
) -> Result<PrevalenceEstimate> {
    let (se, sp) = estimate_assay(v);
    let fit = glm::fit(m, spec)?;
    let est = srgm_from_fit(&fit, t, spec, se, sp)?;
    let n = SampleFractions::total(v.n_sens(), v.n_spec(), m.n()) as f64;
    let var = variance::var_srgm(&fit, m, t, spec, v, opts.plugin(&est))?;
    Ok(est.with_variance(var / n, opts.level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Link;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn study_from_counts(counts: &[(&str, u64, u64)]) -> MainStudy {
        let mut pos = Vec::new();
        let mut strat = Vec::new();
        for &(label, y, n) in counts {
            for i in 0..n {
                pos.push(i < y);
                strat.push(Some(label.to_string()));
            }
        }
        MainStudy::from_parts(pos, strat).unwrap()
    }

    #[test]
    fn assay_rates_from_counts() {
        let v = ValidationStudy::from_counts(40, 40, 277, 274).unwrap();
        let (se, sp) = estimate_assay(&v);
        assert_eq!(se, 1.0);
        assert_abs_diff_eq!(sp, 0.989_169_675_090_252_7, epsilon = 1e-15);
        // Reported rates round as published (0.989 for 274/277).
        assert_eq!((sp * 1000.0).round() / 1000.0, 0.989);

        let v2 = ValidationStudy::from_counts(181, 154, 326, 322).unwrap();
        let (se2, sp2) = estimate_assay(&v2);
        assert_eq!((se2 * 1000.0).round() / 1000.0, 0.851);
        assert_eq!((sp2 * 1000.0).round() / 1000.0, 0.988);

        let v3 = ValidationStudy::from_counts(10, 0, 10, 10).unwrap();
        assert_eq!(estimate_assay(&v3), (0.0, 1.0));
    }

    #[test]
    fn naive_prevalence_examples() {
        let m = study_from_counts(&[("all", 24, 2973)]);
        let est = naive_prevalence(&m, 0.95);
        assert_abs_diff_eq!(est.point, 24.0 / 2973.0, epsilon = 1e-15);
        let (lo, hi) = est.ci().unwrap();
        assert!(lo > 0.0 && hi < 1.0);

        let zero = naive_prevalence(&study_from_counts(&[("all", 0, 100)]), 0.95);
        assert_eq!(zero.point, 0.0);
        assert_eq!(zero.ci().unwrap().0, 0.0);

        let all = naive_prevalence(&study_from_counts(&[("all", 100, 100)]), 0.95);
        assert_eq!(all.point, 1.0);
        assert_eq!(all.ci().unwrap().1, 1.0);
    }

    #[test]
    fn rogan_gladen_examples() {
        let est = rogan_gladen(0.0199, 1.0, 0.99).unwrap();
        assert_abs_diff_eq!(est.point, 0.01, epsilon = 1e-12);
        assert!(!est.flags.truncated_point);

        let identity = rogan_gladen(0.137, 1.0, 1.0).unwrap();
        assert_eq!(identity.point, 0.137);

        let truncated = rogan_gladen(24.0 / 2973.0, 1.0, 0.989).unwrap();
        assert!(truncated.point_raw < 0.0 && truncated.point_raw > -0.004);
        assert_eq!(truncated.point, 0.0);
        assert!(truncated.flags.truncated_point);
    }

    #[test]
    fn degenerate_assay_rejected() {
        assert!(matches!(rogan_gladen(0.3, 0.5, 0.5), Err(Error::DegenerateAssay)));
    }

    #[test]
    fn worse_than_chance_assay_flagged_not_fatal() {
        let est = rogan_gladen(0.4, 0.4, 0.4).unwrap();
        assert!(est.flags.inverted_assay);
        assert!(est.point_raw.is_finite());
    }

    #[test]
    fn restrict_examples() {
        let t = StratumTable::new(vec![
            ("z1".into(), 0.5),
            ("z2".into(), 0.3),
            ("z3".into(), 0.2),
        ])
        .unwrap();
        // All sampled: identity.
        let m_full = study_from_counts(&[("z1", 1, 5), ("z2", 1, 5), ("z3", 0, 5)]);
        let (table, dropped) = restrict(&m_full, &t).unwrap();
        assert!(dropped.is_empty());
        assert_eq!(table, t);

        // Third stratum unsampled.
        let m_partial = study_from_counts(&[("z1", 1, 5), ("z2", 1, 5)]);
        let (table, dropped) = restrict(&m_partial, &t).unwrap();
        assert_eq!(dropped, vec!["z3".to_string()]);
        assert_abs_diff_eq!(table.gamma("z1").unwrap(), 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(table.gamma("z2").unwrap(), 0.375, epsilon = 1e-15);
    }

    #[test]
    fn srg_single_stratum_equals_rogan_gladen() {
        let t = StratumTable::new(vec![("all".into(), 1.0)]).unwrap();
        let m = study_from_counts(&[("all", 37, 500)]);
        let a = srg(&m, &t, 0.99, 0.95).unwrap();
        let b = rogan_gladen(37.0 / 500.0, 0.99, 0.95).unwrap();
        assert_abs_diff_eq!(a.point_raw, b.point_raw, epsilon = 1e-15);
    }

    #[test]
    fn srg_two_strata_arithmetic() {
        let t = StratumTable::new(vec![("a".into(), 0.5), ("b".into(), 0.5)]).unwrap();
        let m = study_from_counts(&[("a", 3, 100), ("b", 1, 100)]);
        let est = srg(&m, &t, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(est.point, 0.02, epsilon = 1e-15);
    }

    #[test]
    fn srg_seeded_draw_matches_direct_recomputation() {
        // Two-stratum draw; the oracle recomputes from raw tallies.
        let mut rng = ChaCha12Rng::seed_from_u64(20_260_809);
        let (pi, se, sp) = (0.10, 0.99, 0.95);
        let gammas = [0.5, 0.5];
        let sampling = [0.2, 0.8];
        let p_y = [1.5 * pi, 0.5 * pi];
        let n3 = 2500;
        let mut pos = Vec::with_capacity(n3);
        let mut strat = Vec::with_capacity(n3);
        let mut tallies = [[0u64; 2]; 2]; // [stratum][pos]
        for _ in 0..n3 {
            let z = if rng.random::<f64>() < sampling[0] { 0 } else { 1 };
            let y = rng.random::<f64>() < p_y[z];
            let x = if y { rng.random::<f64>() < se } else { rng.random::<f64>() < 1.0 - sp };
            tallies[z][usize::from(x)] += 1;
            pos.push(x);
            strat.push(Some(if z == 0 { "z1".to_string() } else { "z2".to_string() }));
        }
        let m = MainStudy::from_parts(pos, strat).unwrap();
        let t = StratumTable::new(vec![("z1".into(), gammas[0]), ("z2".into(), gammas[1])])
            .unwrap();
        let est = srg(&m, &t, se, sp).unwrap();

        // Direct recomputation outside the library path.
        let rho1 = tallies[0][1] as f64 / (tallies[0][0] + tallies[0][1]) as f64;
        let rho2 = tallies[1][1] as f64 / (tallies[1][0] + tallies[1][1]) as f64;
        let rho_std = 0.5 * rho1 + 0.5 * rho2;
        let expected = (rho_std + sp - 1.0) / (se + sp - 1.0);
        assert_abs_diff_eq!(est.point_raw, expected, epsilon = 1e-12);
    }

    #[test]
    fn srg_equal_stratum_means_reduce_to_rg() {
        let t = StratumTable::new(vec![("a".into(), 0.7), ("b".into(), 0.3)]).unwrap();
        let m = study_from_counts(&[("a", 10, 100), ("b", 20, 200)]);
        let est = srg(&m, &t, 0.95, 0.97).unwrap();
        let rg = rogan_gladen(0.1, 0.95, 0.97).unwrap();
        assert_abs_diff_eq!(est.point_raw, rg.point_raw, epsilon = 1e-14);
    }

    #[test]
    fn srgm_intercept_only_equals_pooled_rg() {
        let t = StratumTable::new(vec![("a".into(), 0.5), ("b".into(), 0.5)]).unwrap();
        let m = study_from_counts(&[("a", 30, 400), ("b", 25, 600)]);
        let spec = RegressionSpec::intercept_only(Link::Logit);
        let est = srgm(&m, &t, &spec, 0.99, 0.95).unwrap();
        let rg = rogan_gladen(55.0 / 1000.0, 0.99, 0.95).unwrap();
        assert_abs_diff_eq!(est.point_raw, rg.point_raw, epsilon = 1e-9);
    }

    #[test]
    fn srgm_saturated_equals_srg_under_positivity() {
        let t = StratumTable::new(vec![
            ("a".into(), 0.2),
            ("b".into(), 0.5),
            ("c".into(), 0.3),
        ])
        .unwrap();
        let m = study_from_counts(&[("a", 14, 300), ("b", 25, 500), ("c", 9, 200)]);
        let labels: Vec<String> = t.labels().map(str::to_string).collect();
        let spec = RegressionSpec::saturated(Link::Logit, &labels);
        let est = srgm(&m, &t, &spec, 0.99, 0.95).unwrap();
        let nonpar = srg(&m, &t, 0.99, 0.95).unwrap();
        assert_abs_diff_eq!(est.point_raw, nonpar.point_raw, epsilon = 1e-8);
    }

    #[test]
    fn srgm_standardizes_over_unsampled_strata() {
        // Stratum c unsampled: SRG restricts, SRGM extrapolates over all three.
        let t = StratumTable::new(vec![
            ("a".into(), 0.4),
            ("b".into(), 0.4),
            ("c".into(), 0.2),
        ])
        .unwrap();
        let m = study_from_counts(&[("a", 30, 300), ("b", 50, 300)]);
        let spec = RegressionSpec::intercept_only(Link::Logit);
        let est = srgm(&m, &t, &spec, 1.0, 1.0).unwrap();
        // Intercept-only fitted mean = pooled mean, standardized over gammas summing to 1.
        assert_abs_diff_eq!(est.point_raw, 80.0 / 600.0, epsilon = 1e-9);
        assert!(!est.flags.restricted);

        let nonpar = srg(&m, &t, 1.0, 1.0).unwrap();
        assert!(nonpar.flags.restricted);
        assert_eq!(nonpar.flags.nonpositivity_strata, vec!["c".to_string()]);
    }

    proptest! {
        // Inverting rho = pi*se + (1-pi)(1-sp) recovers pi.
        #[test]
        fn identity_inversion(
            pi in 0.0f64..=1.0,
            se in 0.7f64..=1.0,
            sp in 0.7f64..=1.0,
        ) {
            let rho = pi * se + (1.0 - pi) * (1.0 - sp);
            let est = rogan_gladen(rho, se, sp).unwrap();
            prop_assert!((est.point_raw - pi).abs() < 1e-12);
        }

        // Strictly increasing in rho for an informative assay.
        #[test]
        fn monotone_in_rho(
            rho1 in 0.0f64..0.5,
            delta in 1e-6f64..0.5,
            se in 0.75f64..=1.0,
            sp in 0.75f64..=1.0,
        ) {
            let a = rogan_gladen(rho1, se, sp).unwrap();
            let b = rogan_gladen(rho1 + delta, se, sp).unwrap();
            prop_assert!(b.point_raw > a.point_raw);
        }
    }
}
