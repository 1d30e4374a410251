//! Variance estimators and confidence intervals.
//!
//! Three analytic routes are provided: the closed-form plug-in for the
//! Rogan-Gladen estimator, the closed-form plug-in for the nonparametrically
//! standardized estimator, and the assembled empirical sandwich for the
//! model-based estimator. [`numeric_sandwich`] is a generic finite-difference
//! oracle used to cross-check all three.
//!
//! All `var_*` functions return the asymptotic variance; divide by the total
//! sample size n = n1 + n2 + n3 before building a Wald interval.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{self, FitResult};
use crate::model::{MainStudy, RegressionSpec, SampleFractions, StratumTable, ValidationStudy};
use crate::numeric;

/// Plug-in variance for the Rogan-Gladen estimator.
pub fn var_rg(
    pi_hat: f64,
    sigma_e_hat: f64,
    sigma_p_hat: f64,
    rho_hat: f64,
    fractions: &SampleFractions,
) -> Result<f64> {
    let denom = sigma_e_hat + sigma_p_hat - 1.0;
    if denom == 0.0 {
        return Err(Error::DegenerateAssay);
    }
    let t1 = pi_hat * pi_hat * sigma_e_hat * (1.0 - sigma_e_hat) / fractions.c1;
    let t2 = (1.0 - pi_hat) * (1.0 - pi_hat) * sigma_p_hat * (1.0 - sigma_p_hat) / fractions.c2;
    let t3 = rho_hat * (1.0 - rho_hat) / fractions.c3;
    Ok((t1 + t2 + t3) / (denom * denom))
}

/// Plug-in variance for the standardized (nonparametric) estimator.
///
/// `stratum_fractions` are the sampled shares n_z / n3 standing in for the
/// sampling probabilities; under restriction, pass quantities computed over
/// the renormalized table.
pub fn var_srg(
    pi_hat: f64,
    sigma_e_hat: f64,
    sigma_p_hat: f64,
    stratum_means: &[f64],
    stratum_fractions: &[f64],
    gammas: &[f64],
    fractions: &SampleFractions,
) -> Result<f64> {
    let denom = sigma_e_hat + sigma_p_hat - 1.0;
    if denom == 0.0 {
        return Err(Error::DegenerateAssay);
    }
    if stratum_means.len() != gammas.len() || stratum_fractions.len() != gammas.len() {
        return Err(Error::Input("stratum slice lengths differ".into()));
    }
    let t1 = pi_hat * pi_hat * sigma_e_hat * (1.0 - sigma_e_hat) / fractions.c1;
    let t2 = (1.0 - pi_hat) * (1.0 - pi_hat) * sigma_p_hat * (1.0 - sigma_p_hat) / fractions.c2;
    let mut t3 = 0.0;
    for j in 0..gammas.len() {
        let s_j = stratum_fractions[j];
        if s_j <= 0.0 {
            return Err(Error::NoData(format!(
                "retained stratum {j} has no sampled observations"
            )));
        }
        let rho_j = stratum_means[j];
        t3 += gammas[j] * gammas[j] * (rho_j * (1.0 - rho_j)) / (fractions.c3 * s_j);
    }
    Ok((t1 + t2 + t3) / (denom * denom))
}

/// Empirical sandwich variance for the model-standardized estimator:
/// bottom-right element of A^{-1} B A^{-T} over the stacked estimating
/// functions (validation, score, standardization, correction).
///
/// A negative value is returned as-is so the caller can flag a Heywood case.
pub fn var_srgm(
    fit: &FitResult,
    m: &MainStudy,
    t: &StratumTable,
    spec: &RegressionSpec,
    v: &ValidationStudy,
    pi_hat: f64,
) -> Result<f64> {
    if !fit.converged {
        return Err(Error::Input("variance requested for an unconverged fit".into()));
    }
    let p = spec.p();
    let d = p + 4;
    let link = spec.link();

    let n1 = v.n_sens() as f64;
    let n2 = v.n_spec() as f64;
    let n3 = m.n() as f64;
    let n = n1 + n2 + n3;
    let se_hat = v.x_sens_pos() as f64 / n1;
    let sp_hat = v.x_spec_neg() as f64 / n2;
    let denom = se_hat + sp_hat - 1.0;
    if denom == 0.0 {
        return Err(Error::DegenerateAssay);
    }

    let g = glm::group(m, spec)?;
    let etas = g.etas(&fit.beta_hat);

    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, d);

    // Validation blocks.
    a[(0, 0)] = n1 / n;
    a[(1, 1)] = n2 / n;
    b[(0, 0)] = n1 * se_hat * (1.0 - se_hat) / n;
    b[(1, 1)] = n2 * sp_hat * (1.0 - sp_hat) / n;

    // Score block: expected information / n (bread) and the empirical outer
    // product of score contributions / n (meat).
    for j in 0..g.labels.len() {
        let h = &g.design[j];
        let trials = g.trials[j];
        let succ = g.successes[j];
        let mu = link.inverse(etas[j]);
        let iw = trials * link.info_weight(etas[j]) / n;
        let u = link.score_weight(etas[j]);
        let resid_sq = succ * (1.0 - mu) * (1.0 - mu) + (trials - succ) * mu * mu;
        let mw = u * u * resid_sq / n;
        for r in 0..p {
            for c in 0..p {
                a[(2 + r, 2 + c)] += iw * h[r] * h[c];
                b[(2 + r, 2 + c)] += mw * h[r] * h[c];
            }
        }
    }

    // Standardization row: d/d(beta, rho) of sum_j g^{-1}(beta h(z_j)) gamma_j - rho.
    for (label, gamma) in t.iter() {
        let h = spec.design_vector(label)?;
        let eta: f64 = h.iter().zip(fit.beta_hat.iter()).map(|(a, b)| a * b).sum();
        let slope = link.dinverse(eta);
        for (l, h_l) in h.iter().enumerate() {
            a[(p + 2, 2 + l)] -= h_l * slope * gamma;
        }
    }
    a[(p + 2, p + 2)] = 1.0;

    // Correction row for (rho + sigma_p - 1) - pi (sigma_e + sigma_p - 1).
    a[(p + 3, 0)] = pi_hat;
    a[(p + 3, 1)] = pi_hat - 1.0;
    a[(p + 3, p + 2)] = -1.0;
    a[(p + 3, p + 3)] = denom;

    // Bottom-right of A^{-1} B A^{-T}: solve A^T u = e_last, take u^T B u.
    let info_block = a.view((2, 2), (p, p)).into_owned();
    if !info_block.lu().is_invertible() {
        return Err(Error::Singular("information block of the sandwich bread".into()));
    }
    let mut e = DVector::zeros(d);
    e[d - 1] = 1.0;
    let u = a
        .transpose()
        .lu()
        .solve(&e)
        .ok_or_else(|| Error::Singular("sandwich bread".into()))?;
    Ok((u.transpose() * &b * &u)[(0, 0)])
}

/// Bread, meat, and scaled covariance from the numeric oracle.
#[derive(Debug, Clone)]
pub struct SandwichParts {
    /// Minus the finite-difference Jacobian of the mean estimating function.
    pub a_hat: DMatrix<f64>,
    /// Mean outer product of per-observation estimating functions.
    pub b_hat: DMatrix<f64>,
    /// A^{-1} B A^{-T} / n.
    pub cov: DMatrix<f64>,
    pub n_obs: usize,
}

impl SandwichParts {
    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// Bottom-right element of the unscaled sandwich A^{-1} B A^{-T}.
    pub fn bottom_right_asymptotic(&self) -> f64 {
        let d = self.dim();
        self.cov[(d - 1, d - 1)] * self.n_obs as f64
    }
}

/// A stack of per-observation estimating functions together with the
/// parameter value solving their sum.
pub struct PsiStack {
    pub n_obs: usize,
    pub theta_hat: DVector<f64>,
    psi: Box<dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Sync>,
}

impl PsiStack {
    pub fn new<F>(n_obs: usize, theta_hat: DVector<f64>, psi: F) -> Self
    where
        F: Fn(usize, &DVector<f64>) -> DVector<f64> + Sync + 'static,
    {
        Self { n_obs, theta_hat, psi: Box::new(psi) }
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn eval(&self, i: usize, theta: &DVector<f64>) -> DVector<f64> {
        (self.psi)(i, theta)
    }

    fn mean_psi(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for i in 0..self.n_obs {
            acc += self.eval(i, theta);
        }
        acc / self.n_obs as f64
    }
}

/// Generic numeric sandwich: bread by central finite differences of the mean
/// estimating function (step 1e-6 * max(1, |theta_j|)), meat by the empirical
/// mean of psi psi^T at `theta_hat`.
pub fn numeric_sandwich(stack: &PsiStack) -> Result<SandwichParts> {
    let d = stack.dim();
    let n = stack.n_obs;
    let theta = &stack.theta_hat;

    let cols: Vec<DVector<f64>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            -(stack.mean_psi(&tp) - stack.mean_psi(&tm)) / (2.0 * h)
        })
        .collect();
    let a_hat = DMatrix::from_columns(&cols);

    let mut b_hat = DMatrix::zeros(d, d);
    for i in 0..n {
        let psi = stack.eval(i, theta);
        b_hat.ger(1.0 / n as f64, &psi, &psi, 1.0);
    }

    let lu = a_hat.clone().lu();
    if !lu.is_invertible() {
        return Err(Error::Singular("numeric sandwich bread".into()));
    }
    let inner = lu
        .solve(&b_hat)
        .ok_or_else(|| Error::Singular("numeric sandwich bread".into()))?;
    // cov = A^{-1} B A^{-T} = (A^{-1} (A^{-1} B)^T)^T
    let cov_t = lu
        .solve(&inner.transpose())
        .ok_or_else(|| Error::Singular("numeric sandwich bread".into()))?;
    let mut cov = cov_t.transpose() / n as f64;

    let scale = cov.amax().max(1e-300);
    let max_asym = (0..d)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| (cov[(r, c)] - cov[(c, r)]).abs())
        .fold(0.0_f64, f64::max);
    if max_asym > 1e-10 * scale.max(1.0) {
        return Err(Error::Singular(format!(
            "numeric sandwich covariance asymmetric (max dev {max_asym:.3e}); bread ill-conditioned"
        )));
    }
    let sym = (&cov + cov.transpose()) * 0.5;
    cov = sym;

    Ok(SandwichParts { a_hat, b_hat, cov, n_obs: n })
}

/// Two-sided Wald interval on `point_raw`, clamped into [0,1].
/// Returns the bounds and whether clamping changed either of them.
pub fn wald_ci(point_raw: f64, variance_over_n: f64, level: f64) -> ((f64, f64), bool) {
    assert!(level > 0.0 && level < 1.0, "level must be in (0,1)");
    assert!(variance_over_n >= 0.0, "wald_ci requires a nonnegative variance");
    let z = numeric::normal_quantile(0.5 + level / 2.0);
    let half = z * variance_over_n.sqrt();
    let lo = point_raw - half;
    let hi = point_raw + half;
    let lo_c = lo.clamp(0.0, 1.0);
    let hi_c = hi.clamp(0.0, 1.0);
    ((lo_c, hi_c), lo_c != lo || hi_c != hi)
}

/// Exact Clopper-Pearson interval via beta-quantile inversion with the
/// conventional endpoints at 0 and n successes.
pub fn clopper_pearson(successes: u64, trials: u64, level: f64) -> (f64, f64) {
    assert!(trials >= 1, "clopper_pearson requires at least one trial");
    assert!(successes <= trials, "successes exceed trials");
    assert!(level > 0.0 && level < 1.0, "level must be in (0,1)");
    let alpha = 1.0 - level;
    let x = successes as f64;
    let n = trials as f64;
    let lo = if successes == 0 {
        0.0
    } else {
        numeric::beta_quantile(alpha / 2.0, x, n - x + 1.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        numeric::beta_quantile(1.0 - alpha / 2.0, x + 1.0, n - x)
    };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fractions(n1: u64, n2: u64, n3: u64) -> SampleFractions {
        SampleFractions::from_counts(n1, n2, n3).unwrap()
    }

    #[test]
    fn var_rg_perfect_assay_reduces_to_main_term() {
        let f = fractions(40, 250, 2500);
        let v = var_rg(0.1, 1.0, 1.0, 0.1, &f).unwrap();
        assert_abs_diff_eq!(v, 0.1 * 0.9 / f.c3, epsilon = 1e-15);
    }

    #[test]
    fn var_rg_zero_pi_perfect_specificity() {
        let f = fractions(40, 250, 2500);
        let rho = 0.05;
        let se = 0.9;
        let v = var_rg(0.0, se, 1.0, rho, &f).unwrap();
        assert_abs_diff_eq!(v, rho * (1.0 - rho) / (f.c3 * se * se), epsilon = 1e-14);
    }

    #[test]
    fn var_rg_frozen_reference_value() {
        let f = fractions(40, 250, 2500);
        let v = var_rg(0.1, 0.99, 0.95, 0.144, &f).unwrap();
        assert_abs_diff_eq!(v, 0.649_444_176_097_782_2, epsilon = 1e-12);
    }

    #[test]
    fn var_srg_collapses_to_var_rg_with_one_stratum() {
        let f = fractions(40, 250, 2500);
        let rho = 0.137;
        let a = var_rg(0.1, 0.98, 0.96, rho, &f).unwrap();
        let b = var_srg(0.1, 0.98, 0.96, &[rho], &[1.0], &[1.0], &f).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "k=1 reduction should be bit-identical");
    }

    #[test]
    fn var_srg_equal_strata_identity() {
        // With gamma_j equal to the sampled shares and all stratum means
        // equal, the third term reduces to the pooled main-study term.
        let f = fractions(40, 250, 2500);
        let rho = 0.12;
        let a = var_rg(0.1, 0.99, 0.95, rho, &f).unwrap();
        let b = var_srg(0.1, 0.99, 0.95, &[rho, rho], &[0.5, 0.5], &[0.5, 0.5], &f).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_assay_is_an_error() {
        let f = fractions(40, 250, 2500);
        assert!(matches!(var_rg(0.1, 0.5, 0.5, 0.1, &f), Err(Error::DegenerateAssay)));
    }

    #[test]
    fn numeric_sandwich_linear_psi_identity_bread() {
        // psi_i(theta) = x_i - theta: bread is exactly the identity.
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let stack = PsiStack::new(
            xs.len(),
            DVector::from_vec(vec![mean]),
            move |i, theta| DVector::from_vec(vec![xs[i] - theta[0]]),
        );
        let parts = numeric_sandwich(&stack).unwrap();
        assert_abs_diff_eq!(parts.a_hat[(0, 0)], 1.0, epsilon = 1e-9);
        // meat = sample variance (biased form)
        assert!(parts.b_hat[(0, 0)] > 0.0);
    }

    #[test]
    fn wald_ci_truncation() {
        let ((lo, hi), trunc) = wald_ci(-0.003, 4.2e-5, 0.95);
        assert_eq!(lo, 0.0);
        assert!(trunc);
        assert!(hi > 0.0 && hi < 1.0);
        let ((lo2, hi2), trunc2) = wald_ci(0.5, 1e-4, 0.95);
        assert!(!trunc2);
        assert!(lo2 > 0.0 && hi2 < 1.0);
    }

    #[test]
    fn clopper_pearson_reference_values() {
        let (lo, hi) = clopper_pearson(24, 2973, 0.95);
        assert_abs_diff_eq!(lo, 0.005_178_952_231_825_8, epsilon = 1e-10);
        assert_abs_diff_eq!(hi, 0.011_987_799_545_180, epsilon = 1e-10);
        let (lo0, hi0) = clopper_pearson(0, 100, 0.95);
        assert_eq!(lo0, 0.0);
        assert_abs_diff_eq!(hi0, 1.0 - 0.025_f64.powf(0.01), epsilon = 1e-12);
        let (lo1, hi1) = clopper_pearson(100, 100, 0.95);
        assert_eq!(hi1, 1.0);
        assert_abs_diff_eq!(lo1, 0.025_f64.powf(0.01), epsilon = 1e-12);
    }
}
