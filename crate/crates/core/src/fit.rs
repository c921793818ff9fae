//! Parameter estimation: power-law fits on binned curves and lag series,
//! the scaled volume-distribution law, the Gamma-function formula for the
//! average impact, the large-volume constraint relation, and cross-firm
//! summary statistics.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{CoreError, Result};
use crate::tape::FirmId;

/// A fitted power law `y = c * x^alpha` with the window it was fitted on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Multiplicative coefficient `c = exp(intercept)`.
    pub coefficient: f64,
    /// Exponent (slope of the log-log fit).
    pub exponent: f64,
    pub stderr_exponent: f64,
    /// Abscissa window `[lo, hi]` the fit used.
    pub fit_window: (f64, f64),
    /// Goodness of the weighted log-log fit.
    pub r_squared: f64,
    /// Points inside the window with non-positive ordinate, excluded from
    /// the log-log regression.
    pub excluded_points: usize,
    /// Points actually regressed.
    pub n_points: usize,
}

/// Count-weighted least squares of `ln y` on `ln x`.
///
/// Points are `(x, y, weight)`; those outside `window`, with `x <= 0`, or
/// with zero weight are ignored. Points with `y <= 0` inside the window are
/// excluded and reported (per-firm impact bins can be negative); if they are
/// more than half of the window the fit refuses.
pub fn fit_power_law(points: &[(f64, f64, f64)], window: Option<(f64, f64)>) -> Result<PowerLawFit> {
    let (lo, hi) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    if lo >= hi {
        return Err(CoreError::Config(format!(
            "fit window must have lo < hi, got [{lo}, {hi}]"
        )));
    }
    let in_window: Vec<&(f64, f64, f64)> = points
        .iter()
        .filter(|(x, _, w)| *x > 0.0 && *x >= lo && *x <= hi && *w > 0.0)
        .collect();
    let usable: Vec<(f64, f64, f64)> = in_window
        .iter()
        .filter(|(_, y, _)| *y > 0.0)
        .map(|p| **p)
        .collect();
    let excluded = in_window.len() - usable.len();
    if !in_window.is_empty() && excluded * 2 > in_window.len() {
        return Err(CoreError::Fit(format!(
            "{excluded} of {} points in window have non-positive ordinate; refusing log-log fit",
            in_window.len()
        )));
    }
    if usable.len() < 4 {
        return Err(CoreError::Fit(format!(
            "need at least 4 usable points in window, have {}",
            usable.len()
        )));
    }

    let n = usable.len() as f64;
    let mut w_sum = 0.0;
    let mut lx_sum = 0.0;
    let mut ly_sum = 0.0;
    for &(x, y, w) in &usable {
        w_sum += w;
        lx_sum += w * x.ln();
        ly_sum += w * y.ln();
    }
    let lx_mean = lx_sum / w_sum;
    let ly_mean = ly_sum / w_sum;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y, w) in &usable {
        let dx = x.ln() - lx_mean;
        let dy = y.ln() - ly_mean;
        sxx += w * dx * dx;
        sxy += w * dx * dy;
        syy += w * dy * dy;
    }
    if sxx <= 0.0 {
        return Err(CoreError::Fit("all abscissae identical in window".into()));
    }
    let slope = sxy / sxx;
    let intercept = ly_mean - slope * lx_mean;
    let mut ss_res = 0.0;
    for &(x, y, w) in &usable {
        let r = y.ln() - (intercept + slope * x.ln());
        ss_res += w * r * r;
    }
    let stderr_exponent = if usable.len() > 2 {
        (ss_res / ((n - 2.0) * sxx)).sqrt()
    } else {
        0.0
    };
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let wlo = usable.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let whi = usable.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(PowerLawFit {
        coefficient: intercept.exp(),
        exponent: slope,
        stderr_exponent,
        fit_window: (wlo, whi),
        r_squared,
        excluded_points: excluded,
        n_points: usable.len(),
    })
}

// ---------------------------------------------------------------------------
// Scaled volume-distribution law
// ---------------------------------------------------------------------------

/// Fitted parameters of the scaled volume law `P(x) = a / (b + x)^gamma`,
/// constrained to unit mass and unit mean, which forces `b = gamma - 2` and
/// `a = (gamma - 1) (gamma - 2)^(gamma - 1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub stderr_gamma: f64,
    pub log_likelihood: f64,
    pub n: usize,
}

/// Normalization coefficient `a` for a given tail exponent.
pub fn scaling_law_a(gamma: f64) -> f64 {
    (gamma - 1.0) * (gamma - 2.0).powf(gamma - 1.0)
}

fn scaling_log_likelihood(samples: &[f64], gamma: f64) -> f64 {
    let b = gamma - 2.0;
    let n = samples.len() as f64;
    let sum_ln: f64 = samples.iter().map(|&x| (b + x).ln()).sum();
    n * ((gamma - 1.0).ln() + (gamma - 1.0) * b.ln()) - gamma * sum_ln
}

/// Maximum-likelihood fit of the tail exponent of the mean-one scaled
/// volume law.
///
/// Requires `gamma > 2` (otherwise the law has no mean and the constrained
/// form is invalid); an estimate pinned at the boundary is an error asking
/// for an unconstrained three-parameter fit instead.
pub fn scaling_function_fit(samples: &[f64]) -> Result<ScalingFit> {
    if samples.len() < 10 {
        return Err(CoreError::Fit(format!(
            "need at least 10 samples for the volume-law fit, have {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(CoreError::Fit("volume samples must be finite and non-negative".into()));
    }
    const GAMMA_LO: f64 = 2.0 + 1e-6;
    const GAMMA_HI: f64 = 200.0;
    let objective = |g: f64| scaling_log_likelihood(samples, g);
    let gamma = golden_section_max(objective, GAMMA_LO, GAMMA_HI, 1e-9);
    if gamma - 2.0 < 1e-4 {
        return Err(CoreError::Fit(
            "MLE pinned at gamma <= 2 where the mean is undefined; the constrained mean-one form \
             does not apply, an unconstrained three-parameter fit is required"
                .into(),
        ));
    }
    // Observed information from a central second difference of the
    // log-likelihood.
    let h = 1e-4 * gamma;
    let l0 = objective(gamma);
    let lp = objective(gamma + h);
    let lm = objective(gamma - h);
    let info = -(lp - 2.0 * l0 + lm) / (h * h);
    let stderr_gamma = if info > 0.0 { info.sqrt().recip() } else { f64::NAN };
    Ok(ScalingFit {
        a: scaling_law_a(gamma),
        b: gamma - 2.0,
        gamma,
        stderr_gamma,
        log_likelihood: l0,
        n: samples.len(),
    })
}

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
pub(crate) fn golden_section_max<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * (1.0 + a.abs() + b.abs()) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

// ---------------------------------------------------------------------------
// Average impact from the volume law
// ---------------------------------------------------------------------------

/// The moment factor `F(alpha, gamma) = (gamma-2)^alpha
/// Gamma(1+alpha) Gamma(gamma-alpha-1) / Gamma(gamma-1)`, i.e. the
/// `alpha`-th moment of the mean-one scaled volume law.
///
/// Defined for `gamma > 2` and `-1 < alpha < gamma - 1`; the poles of the
/// Gamma function bound the domain.
pub fn gamma_factor(alpha: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 2.0) {
        return Err(CoreError::Domain(format!(
            "gamma must exceed 2 (law has no mean otherwise), got {gamma}"
        )));
    }
    if !(alpha > -1.0) {
        return Err(CoreError::Domain(format!(
            "alpha must exceed -1 (pole of Gamma(1+alpha)), got {alpha}"
        )));
    }
    if !(alpha < gamma - 1.0) {
        return Err(CoreError::Domain(format!(
            "alpha must be below gamma - 1 = {} (pole of Gamma(gamma-alpha-1)), got {alpha}",
            gamma - 1.0
        )));
    }
    let ln_f = alpha * (gamma - 2.0).ln() + ln_gamma(1.0 + alpha) + ln_gamma(gamma - alpha - 1.0)
        - ln_gamma(gamma - 1.0);
    Ok(ln_f.exp())
}

/// Predicted average impact of a firm from its fitted impact law, its mean
/// order volume, and the market-wide volume-law exponent.
pub fn predicted_mean_impact(c: f64, alpha: f64, mean_volume: f64, gamma: f64) -> Result<f64> {
    if !(mean_volume > 0.0) {
        return Err(CoreError::Domain(format!(
            "mean volume must be positive, got {mean_volume}"
        )));
    }
    Ok(c * mean_volume.powf(alpha) * gamma_factor(alpha, gamma)?)
}

// ---------------------------------------------------------------------------
// Firm summaries and cross-firm statistics
// ---------------------------------------------------------------------------

/// Per-firm headline numbers assembled by the study pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirmSummary {
    pub firm: FirmId,
    /// Participation ratio.
    pub pi: f64,
    /// Fitted impact exponent.
    pub alpha: f64,
    /// Fitted impact coefficient.
    pub c: f64,
    /// Average order volume in currency units.
    pub mean_volume: f64,
    /// Measured average instantaneous impact, in bps of the spread.
    pub mean_impact: f64,
    /// Average impact predicted from (c, alpha, mean_volume, gamma).
    pub predicted_impact: Option<f64>,
    /// Average response cost over the study horizon.
    pub kappa: Option<f64>,
    /// Area under the sign-correlation function over the study horizon.
    pub chi: Option<f64>,
}

/// Residuals of the large-volume anchor `ln c_i + alpha_i ln V0 = ln Delta0`.
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintResiduals {
    pub v0: f64,
    pub delta0: f64,
    pub per_firm: Vec<(FirmId, f64)>,
    pub rms: f64,
}

/// Evaluate the anchor-point constraint for each firm.
pub fn constraint_relation(firms: &[FirmSummary], v0: f64, delta0: f64) -> ConstraintResiduals {
    let ln_v0 = v0.ln();
    let ln_d0 = delta0.ln();
    let per_firm: Vec<(FirmId, f64)> = firms
        .iter()
        .map(|f| (f.firm, f.c.ln() + f.alpha * ln_v0 - ln_d0))
        .collect();
    let rms = if per_firm.is_empty() {
        0.0
    } else {
        (per_firm.iter().map(|(_, r)| r * r).sum::<f64>() / per_firm.len() as f64).sqrt()
    };
    ConstraintResiduals {
        v0,
        delta0,
        per_firm,
        rms,
    }
}

/// Participation-weighted average exponent over the fitted firms, with the
/// participation fraction those firms cover. Weights are renormalized over
/// the firms present.
pub fn weighted_alpha(firms: &[FirmSummary]) -> Result<(f64, f64)> {
    let covered: f64 = firms.iter().map(|f| f.pi).sum();
    if covered <= 0.0 {
        return Err(CoreError::EmptyScope("no fitted firms for weighted alpha".into()));
    }
    let alpha_bar = firms.iter().map(|f| f.pi * f.alpha).sum::<f64>() / covered;
    Ok((alpha_bar, covered))
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(CoreError::Fit(format!(
            "pearson needs two equal-length samples of size >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(CoreError::Fit(
            "undefined correlation: a sample has zero variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One stock's market-level exponent together with its fitted firms.
#[derive(Debug, Clone)]
pub struct StockSummary {
    pub label: String,
    pub alpha_market: f64,
    /// Market-level average impact (bps of spread), for cross-stock scaling.
    pub mean_impact: f64,
    /// Market-level average volume, for cross-stock scaling.
    pub mean_volume: f64,
    pub firms: Vec<FirmSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossFirmStats {
    /// Per-stock (label, weighted alpha, covered participation).
    pub alpha_bar: Vec<(String, f64, f64)>,
    /// Pearson correlation of weighted alpha against the market exponent
    /// over stocks; needs at least two stocks with non-degenerate spread.
    pub alpha_bar_vs_market: Option<f64>,
    /// Log-log slope of stock-scaled mean impact against stock-scaled mean
    /// volume, pooled over firms.
    pub impact_volume_slope: Option<PowerLawFit>,
}

/// Cross-firm statistics over one or more stocks.
///
/// Firm-level averages are scaled by their stock's market averages before
/// pooling, so stocks of different size can share one regression.
pub fn cross_firm_statistics(stocks: &[StockSummary]) -> Result<CrossFirmStats> {
    if stocks.is_empty() {
        return Err(CoreError::EmptyScope("no stocks".into()));
    }
    let mut alpha_bar = Vec::new();
    for s in stocks {
        let (ab, cov) = weighted_alpha(&s.firms)?;
        alpha_bar.push((s.label.clone(), ab, cov));
    }
    let alpha_bar_vs_market = if stocks.len() >= 2 {
        let xs: Vec<f64> = alpha_bar.iter().map(|(_, a, _)| *a).collect();
        let ys: Vec<f64> = stocks.iter().map(|s| s.alpha_market).collect();
        match pearson(&xs, &ys) {
            Ok(r) => Some(r),
            Err(CoreError::Fit(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut points = Vec::new();
    for s in stocks {
        for f in &s.firms {
            if s.mean_volume > 0.0 && s.mean_impact > 0.0 {
                points.push((f.mean_volume / s.mean_volume, f.mean_impact / s.mean_impact, 1.0));
            }
        }
    }
    let impact_volume_slope = if points.len() >= 4 {
        fit_power_law(&points, None).ok()
    } else {
        None
    };
    Ok(CrossFirmStats {
        alpha_bar,
        alpha_bar_vs_market,
        impact_volume_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn exact_power_law_recovered_to_machine_precision() {
        let points: Vec<(f64, f64, f64)> = (1..30)
            .map(|i| {
                let x = 1.5f64.powi(i);
                (x, 2.0 * x.sqrt(), 10.0)
            })
            .collect();
        let fit = fit_power_law(&points, None).unwrap();
        assert_relative_eq!(fit.exponent, 0.5, max_relative = 1e-12);
        assert_relative_eq!(fit.coefficient, 2.0, max_relative = 1e-10);
        assert!(fit.stderr_exponent < 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, max_relative = 1e-12);
        assert_eq!(fit.excluded_points, 0);
    }

    #[test]
    fn scale_equivariance() {
        let points: Vec<(f64, f64, f64)> = (1..20)
            .map(|i| {
                let x = 2.0f64.powi(i);
                (x, 3.0 * x.powf(0.37), (i as f64) + 1.0)
            })
            .collect();
        let fit = fit_power_law(&points, None).unwrap();
        let s = 7.5;
        let scaled: Vec<(f64, f64, f64)> = points.iter().map(|&(x, y, w)| (s * x, y, w)).collect();
        let fit2 = fit_power_law(&scaled, None).unwrap();
        assert_relative_eq!(fit2.exponent, fit.exponent, max_relative = 1e-12);
        assert_relative_eq!(fit2.coefficient, fit.coefficient * s.powf(-fit.exponent), max_relative = 1e-10);
    }

    #[test]
    fn too_few_points_is_error() {
        let points = vec![(1.0, 1.0, 1.0), (2.0, 2.0, 1.0), (3.0, 3.0, 1.0)];
        assert!(matches!(fit_power_law(&points, None), Err(CoreError::Fit(_))));
    }

    #[test]
    fn mostly_negative_refuses() {
        let points: Vec<(f64, f64, f64)> = (1..=10)
            .map(|i| (i as f64, if i <= 6 { -1.0 } else { 1.0 }, 1.0))
            .collect();
        let err = fit_power_law(&points, None).unwrap_err();
        assert!(err.to_string().contains("non-positive"), "{err}");
    }

    #[test]
    fn negative_points_excluded_and_counted() {
        let mut points: Vec<(f64, f64, f64)> = (1..=10)
            .map(|i| {
                let x = 2.0f64.powi(i);
                (x, x.powf(0.3), 1.0)
            })
            .collect();
        points.push((3.0, -0.5, 1.0));
        let fit = fit_power_law(&points, None).unwrap();
        assert_eq!(fit.excluded_points, 1);
        assert_relative_eq!(fit.exponent, 0.3, max_relative = 1e-10);
    }

    #[test]
    fn window_restricts_points() {
        // Power law inside [10, 1000], garbage outside.
        let mut points: Vec<(f64, f64, f64)> = vec![(1.0, 500.0, 1.0), (2.0, 400.0, 1.0)];
        for i in 0..12 {
            let x = 10.0 * 1.5f64.powi(i);
            points.push((x, 5.0 * x.powf(-0.21), 1.0));
        }
        let fit = fit_power_law(&points, Some((10.0, 1000.0))).unwrap();
        assert_relative_eq!(fit.exponent, -0.21, max_relative = 1e-10);
    }

    #[test]
    fn scaling_constants_at_known_gamma() {
        // At gamma = 2.95 the constraints force b = 0.95 and
        // a = 1.95 * 0.95^1.95.
        let gamma: f64 = 2.95;
        assert_relative_eq!(scaling_law_a(gamma), 1.95 * 0.95f64.powf(1.95), max_relative = 1e-14);
    }

    #[test]
    fn gamma_factor_identities() {
        for gamma in [2.2, 2.95, 3.5, 4.0, 10.0] {
            assert_abs_diff_eq!(gamma_factor(0.0, gamma).unwrap(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(gamma_factor(1.0, gamma).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_factor_domain_errors() {
        assert!(gamma_factor(0.5, 2.0).is_err());
        assert!(gamma_factor(-1.0, 3.0).is_err());
        assert!(gamma_factor(2.0, 3.0).is_err());
        let msg = gamma_factor(2.5, 3.0).unwrap_err().to_string();
        assert!(msg.contains("gamma - 1"), "{msg}");
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..10u32 {
            let fact: f64 = (1..n).map(|k| k as f64).product();
            assert_relative_eq!(ln_gamma(n as f64).exp(), fact, max_relative = 1e-12);
        }
    }

    #[test]
    fn predicted_impact_alpha_zero_is_c() {
        let d = predicted_mean_impact(12.5, 0.0, 9000.0, 2.95).unwrap();
        assert_abs_diff_eq!(d, 12.5, epsilon = 1e-12);
    }

    fn summary(firm: u32, pi: f64, alpha: f64, c: f64) -> FirmSummary {
        FirmSummary {
            firm: FirmId(firm),
            pi,
            alpha,
            c,
            mean_volume: 1000.0,
            mean_impact: 10.0,
            predicted_impact: None,
            kappa: None,
            chi: None,
        }
    }

    #[test]
    fn constraint_exact_firms_have_zero_residual() {
        let v0: f64 = 60_000.0;
        let d0: f64 = 40.0;
        let firms: Vec<FirmSummary> = [(1u32, 0.25f64), (2, 0.1), (3, -0.3)]
            .iter()
            .map(|&(id, alpha)| summary(id, 0.3, alpha, d0 / v0.powf(alpha)))
            .collect();
        let res = constraint_relation(&firms, v0, d0);
        assert!(res.rms < 1e-12, "rms = {}", res.rms);
        assert!(res.per_firm.iter().all(|(_, r)| r.abs() < 1e-12));
    }

    #[test]
    fn constraint_anchor_coefficient_value() {
        // alpha = 0.25 at the (60000, 40) anchor gives c close to 2.556.
        let c = 40.0 / 60_000f64.powf(0.25);
        assert_abs_diff_eq!(c, 2.556, epsilon = 2e-3);
        let firms = vec![summary(1, 1.0, 0.25, c)];
        let res = constraint_relation(&firms, 60_000.0, 40.0);
        assert!(res.per_firm[0].1.abs() < 1e-12);
    }

    #[test]
    fn weighted_alpha_by_hand() {
        let firms = vec![
            summary(1, 0.5, 0.2, 1.0),
            summary(2, 0.3, 0.4, 1.0),
            summary(3, 0.2, -0.1, 1.0),
        ];
        let (ab, cov) = weighted_alpha(&firms).unwrap();
        assert_abs_diff_eq!(ab, 0.5 * 0.2 + 0.3 * 0.4 + 0.2 * (-0.1), epsilon = 1e-15);
        assert_abs_diff_eq!(cov, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn identical_firms_degenerate_correlation() {
        let stocks: Vec<StockSummary> = (0..3)
            .map(|i| StockSummary {
                label: format!("S{i}"),
                alpha_market: 0.25,
                mean_impact: 10.0,
                mean_volume: 1000.0,
                firms: vec![summary(1, 0.5, 0.25, 1.0), summary(2, 0.5, 0.25, 1.0)],
            })
            .collect();
        let stats = cross_firm_statistics(&stocks).unwrap();
        // All alpha_bar equal alpha_M: zero variance, correlation undefined.
        assert!(stats.alpha_bar_vs_market.is_none());
        for (_, ab, _) in &stats.alpha_bar {
            assert_abs_diff_eq!(*ab, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn golden_section_finds_parabola_peak() {
        let peak = golden_section_max(|x| -(x - 3.7) * (x - 3.7), 0.0, 10.0, 1e-12);
        assert_abs_diff_eq!(peak, 3.7, epsilon = 1e-9);
    }
}
