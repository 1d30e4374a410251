//! Report structures and the table / JSON / CSV renderers.
//!
//! Tables show 6 significant digits; JSON carries full-precision floats and
//! round-trips exactly.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::PrevalenceEstimate;
use crate::simulation::ScenarioResult;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSummary {
    pub n_sens: u64,
    pub x_sens_pos: u64,
    pub n_spec: u64,
    pub x_spec_neg: u64,
    pub n_main: u64,
    pub positives: u64,
    pub sigma_e_hat: f64,
    pub sigma_p_hat: f64,
    pub k_strata: Option<usize>,
    pub level: f64,
    pub truncated_plugin: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub inputs: InputSummary,
    pub estimates: Vec<PrevalenceEstimate>,
    pub dropped_strata: Vec<String>,
}

/// Format with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{:.*}", decimals, x)
}

fn opt6(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_else(|| "-".to_string())
}

impl EstimateReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)
            .map_err(|e| crate::error::Error::Input(e.to_string()))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::error::Error::Input(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 7]> = vec![[
            "method".into(),
            "point".into(),
            "ci_low".into(),
            "ci_high".into(),
            "point_raw".into(),
            "variance".into(),
            "flags".into(),
        ]];
        for e in &self.estimates {
            rows.push([
                e.method.to_string(),
                sig6(e.point),
                opt6(e.ci_low),
                opt6(e.ci_high),
                sig6(e.point_raw),
                opt6(e.variance),
                e.flags.summary(),
            ]);
        }
        let mut widths = [0usize; 7];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let i = &self.inputs;
        out.push_str(&format!(
            "n1={} (sensitivity {}), n2={} (specificity {}), n3={} ({} positive)\n",
            i.n_sens,
            sig6(i.sigma_e_hat),
            i.n_spec,
            sig6(i.sigma_p_hat),
            i.n_main,
            i.positives
        ));
        if let Some(k) = i.k_strata {
            out.push_str(&format!("strata: {k}"));
            if !self.dropped_strata.is_empty() {
                out.push_str(&format!(
                    " ({} unsampled, dropped for SRG: {})",
                    self.dropped_strata.len(),
                    self.dropped_strata.join(", ")
                ));
            }
            out.push('\n');
        }
        out.push_str(&format!("confidence level: {}\n\n", i.level));
        for row in &rows {
            for (c, (cell, w)) in row.iter().zip(widths).enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                out.push_str(&format!("{cell:<w$}"));
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,point_raw,point,variance,ci_low,ci_high,flags\n");
        for e in &self.estimates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.method,
                e.point_raw,
                e.point,
                e.variance.map(|v| v.to_string()).unwrap_or_default(),
                e.ci_low.map(|v| v.to_string()).unwrap_or_default(),
                e.ci_high.map(|v| v.to_string()).unwrap_or_default(),
                e.flags.summary()
            ));
        }
        out
    }
}

/// Human summary of simulation results, one line per scenario x estimator.
pub fn simulation_table(results: &[ScenarioResult]) -> String {
    let mut out = String::from(
        "dgp       pi      sigma_e  sigma_p  estimator  mean_bias    coverage  heywood  nonpos   trunc  fail\n",
    );
    for r in results {
        if let Some(reason) = &r.skipped {
            out.push_str(&format!(
                "{:<9} {:<7} {:<8} {:<8} skipped: {reason}\n",
                r.dgp.to_string(),
                r.pi,
                r.sigma_e,
                r.sigma_p
            ));
            continue;
        }
        for e in &r.estimators {
            out.push_str(&format!(
                "{:<9} {:<7} {:<8} {:<8} {:<10} {:<12} {:<9} {:<8} {:<8} {:<6} {}\n",
                r.dgp.to_string(),
                r.pi,
                r.sigma_e,
                r.sigma_p,
                e.method.to_string(),
                sig6(e.mean_bias),
                sig6(e.coverage),
                e.heywood_count,
                sig6(e.nonpositivity_fraction),
                e.truncation_count,
                e.failures
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Method, PrevalenceEstimate};

    fn sample_report() -> EstimateReport {
        let estimates = vec![
            PrevalenceEstimate::from_point(Method::Naive, 24.0 / 2973.0)
                .with_ci(0.0051789, 0.0119877),
            PrevalenceEstimate::from_point(Method::Rg, -0.0027878645031561705)
                .with_variance(4.2277e-5, 0.95),
        ];
        EstimateReport {
            inputs: InputSummary {
                n_sens: 40,
                x_sens_pos: 40,
                n_spec: 277,
                x_spec_neg: 274,
                n_main: 2973,
                positives: 24,
                sigma_e_hat: 1.0,
                sigma_p_hat: 274.0 / 277.0,
                k_strata: None,
                level: 0.95,
                truncated_plugin: true,
            },
            estimates,
            dropped_strata: vec![],
        }
    }

    #[test]
    fn sig6_formats() {
        assert_eq!(sig6(0.00807938), "0.00807938");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.5), "0.500000");
        assert_eq!(sig6(0.0), "0.00000");
        assert_eq!(sig6(-0.0029497), "-0.00294970");
        assert_eq!(sig6(123456.7), "123457");
    }

    #[test]
    fn json_round_trip_reproduces_table() {
        let report = sample_report();
        let table = report.to_table();
        let parsed = EstimateReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(parsed.to_table(), table);
        // and every float survives exactly
        assert_eq!(parsed.estimates[1].point_raw, report.estimates[1].point_raw);
        assert_eq!(parsed.estimates[1].variance, report.estimates[1].variance);
    }

    #[test]
    fn table_contains_flags() {
        let table = sample_report().to_table();
        assert!(table.contains("truncated_point"));
        assert!(table.contains("naive"));
        assert!(table.contains("RG"));
    }
}
