//! Domain types shared by the estimators, variance routines, and simulator.
//!
//! All types are immutable after construction and validate their invariants
//! up front, so downstream code never re-checks bounds.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::variance;

/// Tolerance for a stratum table's proportions summing to one.
pub const GAMMA_SUM_TOL: f64 = 1e-10;

/// Which estimator produced a [`PrevalenceEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    #[serde(rename = "naive")]
    Naive,
    #[serde(alias = "rg")]
    Rg,
    #[serde(alias = "srg")]
    Srg,
    #[serde(alias = "srgm")]
    Srgm,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Naive => "naive",
            Method::Rg => "RG",
            Method::Srg => "SRG",
            Method::Srgm => "SRGM",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Method::Naive),
            "rg" => Ok(Method::Rg),
            "srg" => Ok(Method::Srg),
            "srgm" => Ok(Method::Srgm),
            other => Err(Error::Input(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Counts from the sensitivity and specificity validation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationStudy {
    n_sens: u64,
    x_sens_pos: u64,
    n_spec: u64,
    x_spec_neg: u64,
}

impl ValidationStudy {
    /// Build a validated study from raw counts.
    pub fn from_counts(n_sens: u64, x_sens_pos: u64, n_spec: u64, x_spec_neg: u64) -> Result<Self> {
        if n_sens == 0 {
            return Err(Error::Input("n_sens must be at least 1".into()));
        }
        if n_spec == 0 {
            return Err(Error::Input("n_spec must be at least 1".into()));
        }
        if x_sens_pos > n_sens {
            return Err(Error::Input(format!(
                "x_sens_pos ({x_sens_pos}) exceeds n_sens ({n_sens})"
            )));
        }
        if x_spec_neg > n_spec {
            return Err(Error::Input(format!(
                "x_spec_neg ({x_spec_neg}) exceeds n_spec ({n_spec})"
            )));
        }
        Ok(Self { n_sens, x_sens_pos, n_spec, x_spec_neg })
    }

    pub fn n_sens(&self) -> u64 {
        self.n_sens
    }
    pub fn x_sens_pos(&self) -> u64 {
        self.x_sens_pos
    }
    pub fn n_spec(&self) -> u64 {
        self.n_spec
    }
    pub fn x_spec_neg(&self) -> u64 {
        self.x_spec_neg
    }
}

/// Target-population stratum proportions, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumTable {
    strata: Vec<(String, f64)>,
}

impl StratumTable {
    pub fn new(strata: Vec<(String, f64)>) -> Result<Self> {
        if strata.is_empty() {
            return Err(Error::Input("stratum table is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut sum = 0.0;
        for (label, gamma) in &strata {
            if !seen.insert(label.as_str()) {
                return Err(Error::Input(format!("duplicate stratum label `{label}`")));
            }
            if !(*gamma > 0.0) {
                return Err(Error::Input(format!(
                    "stratum `{label}` has non-positive proportion {gamma}"
                )));
            }
            sum += gamma;
        }
        if (sum - 1.0).abs() > GAMMA_SUM_TOL {
            return Err(Error::Input(format!(
                "stratum proportions sum to {sum}, expected 1 within {GAMMA_SUM_TOL:e}"
            )));
        }
        Ok(Self { strata })
    }

    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.strata.iter().map(|(l, g)| (l.as_str(), *g))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.strata.iter().map(|(l, _)| l.as_str())
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.strata.iter().map(|(_, g)| *g).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.strata.iter().position(|(l, _)| l == label)
    }

    pub fn gamma(&self, label: &str) -> Option<f64> {
        self.strata.iter().find(|(l, _)| l == label).map(|(_, g)| *g)
    }
}

/// One main-study test result with an optional stratum label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestRecord {
    pub positive: bool,
    pub stratum: Option<String>,
}

/// The main study: test results on the population of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainStudy {
    records: Vec<TestRecord>,
}

impl MainStudy {
    pub fn new(records: Vec<TestRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("main study has no records".into()));
        }
        Ok(Self { records })
    }

    /// Convenience constructor from parallel vectors.
    pub fn from_parts(positive: Vec<bool>, stratum: Vec<Option<String>>) -> Result<Self> {
        if positive.len() != stratum.len() {
            return Err(Error::Input("positive/stratum length mismatch".into()));
        }
        Self::new(
            positive
                .into_iter()
                .zip(stratum)
                .map(|(positive, stratum)| TestRecord { positive, stratum })
                .collect(),
        )
    }

    pub fn n(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn positives(&self) -> u64 {
        self.records.iter().filter(|r| r.positive).count() as u64
    }

    pub fn records(&self) -> &[TestRecord] {
        &self.records
    }

    /// Per-stratum (positives, total) counts in table order.
    /// Errors on a missing or unknown stratum label.
    pub fn stratum_counts(&self, table: &StratumTable) -> Result<Vec<(u64, u64)>> {
        let mut counts = vec![(0u64, 0u64); table.len()];
        for (i, rec) in self.records.iter().enumerate() {
            let label = rec.stratum.as_deref().ok_or_else(|| {
                Error::Input(format!(
                    "record {} has no stratum label; standardized estimators require one",
                    i + 1
                ))
            })?;
            let idx = table.index_of(label).ok_or_else(|| {
                Error::Input(format!("record {}: unknown stratum label `{label}`", i + 1))
            })?;
            counts[idx].1 += 1;
            if rec.positive {
                counts[idx].0 += 1;
            }
        }
        Ok(counts)
    }
}

/// Limiting study-size fractions c_j = n_j / n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleFractions {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl SampleFractions {
    pub fn from_counts(n1: u64, n2: u64, n3: u64) -> Result<Self> {
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return Err(Error::Input("all three study sizes must be positive".into()));
        }
        let n = (n1 + n2 + n3) as f64;
        Ok(Self { c1: n1 as f64 / n, c2: n2 as f64 / n, c3: n3 as f64 / n })
    }

    pub fn total(n1: u64, n2: u64, n3: u64) -> u64 {
        n1 + n2 + n3
    }
}

/// Diagnostic flags attached to a [`PrevalenceEstimate`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    /// Raw point fell outside [0,1] and was clamped.
    pub truncated_point: bool,
    /// One or both Wald bounds fell outside [0,1] and were clamped.
    pub truncated_ci: bool,
    /// The sandwich/plug-in variance came out negative; no CI is reported.
    pub heywood: bool,
    /// Standardization dropped unsampled strata and renormalized.
    pub restricted: bool,
    /// Estimated sensitivity + specificity < 1: the assay looks worse than
    /// guessing, so the corrected estimate is unreliable.
    pub inverted_assay: bool,
    /// Labels of strata dropped by restriction.
    pub nonpositivity_strata: Vec<String>,
}

impl EstimateFlags {
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if self.truncated_point {
            parts.push("truncated_point".to_string());
        }
        if self.truncated_ci {
            parts.push("truncated_ci".to_string());
        }
        if self.heywood {
            parts.push("heywood".to_string());
        }
        if self.restricted {
            parts.push(format!("restricted({})", self.nonpositivity_strata.len()));
        }
        if self.inverted_assay {
            parts.push("inverted_assay".to_string());
        }
        parts.join(",")
    }
}

/// A point estimate of prevalence with optional variance and interval.
///
/// `variance` is stored per-observation-scaled (the quantity under the Wald
/// radical), i.e. the estimated variance of the point estimate itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceEstimate {
    pub method: Method,
    pub point_raw: f64,
    pub point: f64,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub flags: EstimateFlags,
}

impl PrevalenceEstimate {
    /// Point-only estimate; clamps into [0,1] and records truncation.
    pub fn from_point(method: Method, point_raw: f64) -> Self {
        let point = point_raw.clamp(0.0, 1.0);
        let flags = EstimateFlags {
            truncated_point: point != point_raw,
            ..EstimateFlags::default()
        };
        Self { method, point_raw, point, variance: None, ci_low: None, ci_high: None, flags }
    }

    /// Attach an estimated variance (already divided by n) and a Wald CI.
    ///
    /// Total by construction: a negative or non-finite variance marks a
    /// Heywood case (variance kept, no interval); anything else yields a
    /// truncated Wald interval.
    pub fn with_variance(mut self, variance: f64, level: f64) -> Self {
        self.variance = Some(variance);
        if variance >= 0.0 && variance.is_finite() {
            let ((lo, hi), truncated) = variance::wald_ci(self.point_raw, variance, level);
            self.ci_low = Some(lo);
            self.ci_high = Some(hi);
            self.flags.truncated_ci = truncated;
        } else {
            self.flags.heywood = true;
        }
        self
    }

    pub fn with_ci(mut self, lo: f64, hi: f64) -> Self {
        self.ci_low = Some(lo);
        self.ci_high = Some(hi);
        self
    }

    pub fn ci(&self) -> Option<(f64, f64)> {
        match (self.ci_low, self.ci_high) {
            (Some(l), Some(h)) => Some((l, h)),
            _ => None,
        }
    }
}

/// Link functions for the binary regression model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Probit,
}

impl Link {
    /// Mean function g^{-1}(eta).
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => expit(eta),
            Link::Probit => crate::numeric::normal_cdf(eta),
        }
    }

    /// d g^{-1}/d eta.
    pub fn dinverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let p = expit(eta);
                p * (1.0 - p)
            }
            Link::Probit => crate::numeric::normal_pdf(eta),
        }
    }

    /// Multiplier u(eta) in the ML score contribution (x - mu) u(eta) h.
    pub(crate) fn score_weight(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0,
            Link::Probit => {
                let p = crate::numeric::normal_cdf(eta);
                crate::numeric::normal_pdf(eta) / (p * (1.0 - p)).max(1e-300)
            }
        }
    }

    /// Weight in the expected (Fisher) information h h^T.
    pub(crate) fn info_weight(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let p = expit(eta);
                p * (1.0 - p)
            }
            Link::Probit => {
                let p = crate::numeric::normal_cdf(eta);
                let d = crate::numeric::normal_pdf(eta);
                d * d / (p * (1.0 - p)).max(1e-300)
            }
        }
    }
}

impl std::str::FromStr for Link {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Link::Logit),
            "probit" => Ok(Link::Probit),
            other => Err(Error::Input(format!("unknown link `{other}`"))),
        }
    }
}

/// Numerically stable inverse logit.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Logit for p in (0,1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

type DesignFn = dyn Fn(&str) -> Option<Vec<f64>> + Send + Sync;

/// Binary regression specification: link plus the stratum-label -> h(z)
/// design mapping. The first design entry must always equal one (intercept).
#[derive(Clone)]
pub struct RegressionSpec {
    link: Link,
    p: usize,
    design: Arc<DesignFn>,
}

impl fmt::Debug for RegressionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressionSpec")
            .field("link", &self.link)
            .field("p", &self.p)
            .finish_non_exhaustive()
    }
}

impl RegressionSpec {
    pub fn new<F>(link: Link, p: usize, design: F) -> Self
    where
        F: Fn(&str) -> Option<Vec<f64>> + Send + Sync + 'static,
    {
        Self { link, p, design: Arc::new(design) }
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Evaluate h(z) for a stratum label, checking shape and intercept.
    pub fn design_vector(&self, label: &str) -> Result<Vec<f64>> {
        let h = (self.design)(label)
            .ok_or_else(|| Error::Input(format!("no design mapping for stratum `{label}`")))?;
        if h.len() != self.p {
            return Err(Error::Design(format!(
                "design vector for `{label}` has length {}, expected {}",
                h.len(),
                self.p
            )));
        }
        if h[0] != 1.0 {
            return Err(Error::Design(format!(
                "design vector for `{label}` must start with an intercept 1, got {}",
                h[0]
            )));
        }
        Ok(h)
    }

    /// Intercept-only model.
    pub fn intercept_only(link: Link) -> Self {
        Self::new(link, 1, |_| Some(vec![1.0]))
    }

    /// Saturated model: one indicator per label after the first (reference).
    pub fn saturated(link: Link, labels: &[String]) -> Self {
        let labels: Vec<String> = labels.to_vec();
        let p = labels.len();
        Self::new(link, p, move |z| {
            let idx = labels.iter().position(|l| l == z)?;
            let mut h = vec![0.0; labels.len()];
            h[0] = 1.0;
            if idx > 0 {
                h[idx] = 1.0;
            }
            Some(h)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn validation_study_bounds() {
        let v = ValidationStudy::from_counts(40, 40, 277, 274).unwrap();
        assert_eq!(v.n_sens(), 40);
        assert!(ValidationStudy::from_counts(10, 0, 10, 10).is_ok());
        assert!(matches!(
            ValidationStudy::from_counts(10, 11, 10, 10),
            Err(Error::Input(msg)) if msg.contains("x_sens_pos")
        ));
        assert!(ValidationStudy::from_counts(0, 0, 10, 10).is_err());
    }

    #[test]
    fn stratum_table_rejects_bad_proportions() {
        assert!(StratumTable::new(vec![("a".into(), 0.5), ("b".into(), 0.5)]).is_ok());
        assert!(StratumTable::new(vec![("a".into(), 0.5), ("b".into(), 0.4)]).is_err());
        assert!(StratumTable::new(vec![("a".into(), 1.5), ("b".into(), -0.5)]).is_err());
        assert!(StratumTable::new(vec![("a".into(), 0.5), ("a".into(), 0.5)]).is_err());
        // Just inside the tolerance.
        assert!(StratumTable::new(vec![("a".into(), 0.5 + 4e-11), ("b".into(), 0.5)]).is_ok());
    }

    #[test]
    fn main_study_counts() {
        let m = MainStudy::from_parts(
            vec![true, false, true, false],
            vec![Some("a".into()), Some("a".into()), Some("b".into()), None],
        )
        .unwrap();
        assert_eq!(m.n(), 4);
        assert_eq!(m.positives(), 2);
        let t = StratumTable::new(vec![("a".into(), 0.5), ("b".into(), 0.5)]).unwrap();
        // Missing stratum on record 4.
        assert!(m.stratum_counts(&t).is_err());
    }

    #[test]
    fn expit_logit_inverse() {
        for &p in &[1e-6, 0.25, 0.5, 0.9, 1.0 - 1e-9] {
            assert_abs_diff_eq!(expit(logit(p)), p, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(logit(0.25), -1.098_612_288_668_109_8, epsilon = 1e-14);
    }

    #[test]
    fn saturated_design_shape() {
        let labels = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let spec = RegressionSpec::saturated(Link::Logit, &labels);
        assert_eq!(spec.design_vector("a").unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(spec.design_vector("c").unwrap(), vec![1.0, 0.0, 1.0]);
        assert!(spec.design_vector("zz").is_err());
    }

    proptest! {
        // Construction is total: any (point_raw, variance) pair yields a
        // value with coherent flags.
        #[test]
        fn estimate_construction_total(point_raw in -5.0f64..5.0, var in proptest::num::f64::ANY) {
            let est = PrevalenceEstimate::from_point(Method::Rg, point_raw)
                .with_variance(var, 0.95);
            prop_assert!((0.0..=1.0).contains(&est.point));
            prop_assert_eq!(est.flags.truncated_point, est.point != est.point_raw);
            if var >= 0.0 && var.is_finite() {
                let (lo, hi) = est.ci().unwrap();
                prop_assert!(lo <= hi);
                prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
                prop_assert!(!est.flags.heywood);
            } else {
                prop_assert!(est.flags.heywood);
                prop_assert!(est.ci().is_none());
            }
        }

        #[test]
        fn estimate_json_round_trip(point_raw in -2.0f64..2.0, var in 0.0f64..0.5) {
            let est = PrevalenceEstimate::from_point(Method::Srg, point_raw)
                .with_variance(var, 0.95);
            let json = serde_json::to_string(&est).unwrap();
            let back: PrevalenceEstimate = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(est, back);
        }
    }
}
