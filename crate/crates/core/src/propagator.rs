//! Transient-impact (bare propagator) model: forward response
//! reconstruction from a kernel and a sign-correlation series, deconvolution
//! of the kernel from measured series, the power-law kernel form, the
//! critical decay exponent, and the response-cost diagnostics.
//!
//! Conventions. The own-trade weight is one: a trade moves the quote by its
//! instantaneous impact at lag zero, and the kernel values describe lags
//! `1..=l_max`. The convolution sum therefore includes the own-trade term of
//! the later tick (`l' = l` with weight `G0(0) = 1`), which makes the
//! forward map the exact expectation of the measured response estimator on
//! propagator-built tapes and lets the inversion recover a generator kernel
//! from measured series. The unbounded tail sum is truncated at a horizon
//! `H >= l_max`; beyond `l_max` the kernel is extended by its extrapolation
//! rule (hold-last during inversion).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fit::golden_section_max;
use crate::measure::{LagAnalyzer, LagSeries, Scope, SeriesKind};
use crate::tape::{FirmId, Tape};

/// How kernel values beyond `l_max` are extended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Extrapolation {
    /// Hold the last stored value.
    HoldLast,
    /// Continue with the fitted power form.
    PowerTail { gamma0: f64, l0: f64, beta: f64 },
}

/// Fitted parameters of the kernel form
/// `G0(l) = gamma0 / (l0^2 + l^2)^(beta/2)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelFit {
    pub gamma0: f64,
    pub l0: f64,
    pub beta: f64,
    /// Standard error of `beta` conditional on the fitted `l0`.
    pub stderr_beta: f64,
    pub window: (usize, usize),
    pub r_squared: f64,
    pub excluded_points: usize,
}

impl KernelFit {
    pub fn value(&self, l: f64) -> f64 {
        self.gamma0 / (self.l0 * self.l0 + l * l).powf(self.beta / 2.0)
    }
}

/// Bare impact kernel `G0(l)` for `l = 1..=l_max`, with an extrapolation
/// rule beyond and optionally the fitted power form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kernel {
    values: Vec<f64>,
    extrapolation: Extrapolation,
    pub fit: Option<KernelFit>,
}

impl Kernel {
    pub fn new(values: Vec<f64>, extrapolation: Extrapolation) -> Result<Self> {
        if values.len() < 2 {
            return Err(CoreError::Config(format!(
                "kernel needs at least 2 lags, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("kernel values must be finite".into()));
        }
        Ok(Kernel {
            values,
            extrapolation,
            fit: None,
        })
    }

    /// Sample the power form on `1..=l_max` with a matching power tail.
    pub fn from_form(gamma0: f64, l0: f64, beta: f64, l_max: usize) -> Result<Self> {
        if !(gamma0 > 0.0) || !(beta > 0.0) || l0 < 0.0 {
            return Err(CoreError::Config(format!(
                "kernel form needs gamma0 > 0, beta > 0, l0 >= 0; got ({gamma0}, {l0}, {beta})"
            )));
        }
        let values = (1..=l_max)
            .map(|l| gamma0 / (l0 * l0 + (l * l) as f64).powf(beta / 2.0))
            .collect();
        Ok(Kernel {
            values,
            extrapolation: Extrapolation::PowerTail { gamma0, l0, beta },
            fit: None,
        })
    }

    pub fn l_max(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn extrapolation(&self) -> Extrapolation {
        self.extrapolation
    }

    pub fn with_extrapolation(mut self, e: Extrapolation) -> Self {
        self.extrapolation = e;
        self
    }

    /// Kernel value at any lag; lag 0 is the unit own-trade weight.
    pub fn value(&self, l: usize) -> f64 {
        if l == 0 {
            1.0
        } else if l <= self.values.len() {
            self.values[l - 1]
        } else {
            match self.extrapolation {
                Extrapolation::HoldLast => *self.values.last().expect("non-empty"),
                Extrapolation::PowerTail { gamma0, l0, beta } => {
                    gamma0 / (l0 * l0 + (l * l) as f64).powf(beta / 2.0)
                }
            }
        }
    }

    pub fn as_lag_series(&self) -> LagSeries {
        let mut values = Vec::with_capacity(self.values.len() + 1);
        values.push(1.0);
        values.extend_from_slice(&self.values);
        LagSeries {
            kind: SeriesKind::Kernel,
            counts: vec![1; values.len()],
            stderr: vec![0.0; values.len()],
            values,
        }
    }
}

// ---------------------------------------------------------------------------
// Forward reconstruction
// ---------------------------------------------------------------------------

/// Reconstruct a response function from a kernel and a sign-correlation
/// series.
///
/// `correlation` is indexed by lag with `correlation[0] = 1`; it must reach
/// the truncation horizon. `r0` is the market-level instantaneous response;
/// `ri0`, when given, is the firm-level one entering the leading kernel term
/// (firm-scope reconstruction).
pub fn reconstruct_response(
    kernel: &Kernel,
    correlation: &[f64],
    r0: f64,
    ri0: Option<f64>,
    max_lag: usize,
    horizon: usize,
) -> Result<LagSeries> {
    if horizon < max_lag {
        return Err(CoreError::Config(format!(
            "truncation horizon {horizon} must be at least the requested lag range {max_lag}"
        )));
    }
    if correlation.len() <= horizon {
        return Err(CoreError::Config(format!(
            "correlation series reaches lag {} but the horizon is {horizon}",
            correlation.len().saturating_sub(1)
        )));
    }
    if correlation.iter().take(horizon + 1).any(|c| !c.is_finite()) {
        return Err(CoreError::Config("correlation series must be finite".into()));
    }
    let r0p = ri0.unwrap_or(r0);
    let mut values = Vec::with_capacity(max_lag + 1);
    values.push(r0p);
    for l in 1..=max_lag {
        let mut acc = r0p * kernel.value(l);
        // Convolution with the flow correlation, own-trade term included.
        for lp in 1..=l {
            acc += r0 * kernel.value(l - lp) * correlation[lp];
        }
        // Truncated history tail.
        for lp in 1..=horizon {
            acc += r0 * (kernel.value(l + lp) - kernel.value(lp)) * correlation[lp];
        }
        values.push(acc);
    }
    Ok(LagSeries {
        kind: SeriesKind::Response,
        counts: vec![1; values.len()],
        stderr: vec![0.0; values.len()],
        values,
    })
}

// ---------------------------------------------------------------------------
// Kernel inversion
// ---------------------------------------------------------------------------

/// Solve the forward map for the kernel given measured response and
/// correlation series.
///
/// `response` and `correlation` are lag-indexed (`response[0]` is the
/// instantaneous response). The kernel beyond `l_max` is held at its last
/// value during the solve; the history tail is truncated at `horizon`.
/// `ridge >= 0` adds Tikhonov regularization for noisy inputs. When
/// `fit_window` is given the power form is fitted to the solution over that
/// lag window and attached.
#[allow(clippy::too_many_arguments)]
pub fn invert_kernel(
    response: &[f64],
    correlation: &[f64],
    r0: f64,
    ri0: Option<f64>,
    l_max: usize,
    horizon: usize,
    ridge: f64,
    fit_window: Option<(usize, usize)>,
) -> Result<Kernel> {
    if l_max < 2 {
        return Err(CoreError::Config("l_max must be at least 2".into()));
    }
    if horizon < l_max {
        return Err(CoreError::Config(format!(
            "horizon {horizon} must be at least l_max {l_max}"
        )));
    }
    if response.len() <= l_max {
        return Err(CoreError::Config(format!(
            "response reaches lag {} but l_max is {l_max}",
            response.len().saturating_sub(1)
        )));
    }
    if correlation.len() <= horizon {
        return Err(CoreError::Config(format!(
            "correlation reaches lag {} but the horizon is {horizon}",
            correlation.len().saturating_sub(1)
        )));
    }
    if ridge < 0.0 {
        return Err(CoreError::Config("ridge must be non-negative".into()));
    }
    let finite = |s: &[f64], n: usize| s.iter().take(n + 1).all(|v| v.is_finite());
    if !finite(response, l_max) || !finite(correlation, horizon) {
        return Err(CoreError::Config("series must be finite over the solve range".into()));
    }
    if r0 == 0.0 {
        return Err(CoreError::Config("r0 must be non-zero".into()));
    }
    let r0p = ri0.unwrap_or(r0);

    // Prefix sums of the correlation for the hold-last lumps.
    let mut csum = vec![0.0; horizon + 1];
    for lp in 1..=horizon {
        csum[lp] = csum[lp - 1] + correlation[lp];
    }
    let tail_sum = |from: usize| -> f64 {
        if from > horizon {
            0.0
        } else {
            csum[horizon] - csum[from - 1]
        }
    };

    let n = l_max;
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for l in 1..=n {
        let row = l - 1;
        b[row] = response[l] - r0 * correlation[l];
        m[(row, l - 1)] += r0p;
        for k in 1..l {
            m[(row, k - 1)] += r0 * correlation[l - k];
        }
        for k in (l + 1)..=n {
            let lp = k - l;
            if lp <= horizon {
                m[(row, k - 1)] += r0 * correlation[lp];
            }
        }
        // Held tail of the positive part: l + l' > l_max.
        let from = (n - l + 1).max(1);
        m[(row, n - 1)] += r0 * tail_sum(from);
        // Negative part: -G(l') for l' = 1..=horizon, held beyond l_max.
        for k in 1..=n.min(horizon) {
            m[(row, k - 1)] -= r0 * correlation[k];
        }
        if horizon > n {
            m[(row, n - 1)] -= r0 * tail_sum(n + 1);
        }
    }

    let solution = if ridge > 0.0 {
        let mt = m.transpose();
        let mut normal = &mt * &m;
        for i in 0..n {
            normal[(i, i)] += ridge;
        }
        let rhs = &mt * &b;
        normal
            .lu()
            .solve(&rhs)
            .ok_or_else(|| CoreError::LinearSystem("ridge-regularized normal equations are singular".into()))?
    } else {
        let lu = m.clone().lu();
        match lu.solve(&b) {
            Some(x) => {
                let residual = (&m * &x - &b).norm() / b.norm().max(1e-300);
                if residual > 1e-6 {
                    let cond = diag_condition_estimate(&lu.u());
                    return Err(CoreError::LinearSystem(format!(
                        "solve residual {residual:.3e} too large; diagonal condition estimate {cond:.3e}; \
                         consider a ridge parameter"
                    )));
                }
                x
            }
            None => {
                let cond = diag_condition_estimate(&lu.u());
                return Err(CoreError::LinearSystem(format!(
                    "singular system; diagonal condition estimate {cond:.3e}; consider a ridge parameter"
                )));
            }
        }
    };

    let mut kernel = Kernel::new(solution.iter().copied().collect(), Extrapolation::HoldLast)?;
    if let Some(window) = fit_window {
        let fit = fit_kernel_form(kernel.values(), window)?;
        kernel.extrapolation = Extrapolation::PowerTail {
            gamma0: fit.gamma0,
            l0: fit.l0,
            beta: fit.beta,
        };
        kernel.fit = Some(fit);
    }
    Ok(kernel)
}

fn diag_condition_estimate(u: &DMatrix<f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..u.nrows().min(u.ncols()) {
        let d = u[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Fit the power kernel form to solved kernel values over a lag window.
///
/// For a candidate `l0` the slope of `ln G` on `ln(l0^2 + l^2)` is linear;
/// the outer scan over `l0` minimizes the residual. Non-positive kernel
/// values inside the window are excluded and reported.
pub fn fit_kernel_form(values: &[f64], window: (usize, usize)) -> Result<KernelFit> {
    let (lo, hi) = window;
    if lo < 1 || hi <= lo || hi > values.len() {
        return Err(CoreError::Config(format!(
            "kernel fit window [{lo}, {hi}] must lie within 1..={}",
            values.len()
        )));
    }
    let points: Vec<(f64, f64)> = (lo..=hi)
        .filter(|&l| values[l - 1] > 0.0)
        .map(|l| (l as f64, values[l - 1].ln()))
        .collect();
    let excluded = (hi - lo + 1) - points.len();
    if points.len() < 4 {
        return Err(CoreError::Fit(format!(
            "kernel fit needs at least 4 positive values in the window, have {}",
            points.len()
        )));
    }

    let sse_for = |l0: f64| -> (f64, f64, f64) {
        // Linear LS of ln G on z = ln(l0^2 + l^2).
        let n = points.len() as f64;
        let mut zm = 0.0;
        let mut ym = 0.0;
        for &(l, ln_g) in &points {
            zm += (l0 * l0 + l * l).ln();
            ym += ln_g;
        }
        zm /= n;
        ym /= n;
        let mut szz = 0.0;
        let mut szy = 0.0;
        for &(l, ln_g) in &points {
            let dz = (l0 * l0 + l * l).ln() - zm;
            szz += dz * dz;
            szy += dz * (ln_g - ym);
        }
        if szz <= 0.0 {
            return (f64::INFINITY, 0.0, 0.0);
        }
        let slope = szy / szz;
        let intercept = ym - slope * zm;
        let mut sse = 0.0;
        for &(l, ln_g) in &points {
            let r = ln_g - (intercept + slope * (l0 * l0 + l * l).ln());
            sse += r * r;
        }
        (sse, slope, intercept)
    };

    let l0_hat = golden_section_max(|l0| -sse_for(l0).0, 1e-3, 4.0 * hi as f64, 1e-10);
    let (sse, slope, intercept) = sse_for(l0_hat);
    if !sse.is_finite() {
        return Err(CoreError::Fit("kernel form fit degenerate".into()));
    }
    let n = points.len() as f64;
    let mut szz = 0.0;
    let mut syy = 0.0;
    let zm = points
        .iter()
        .map(|&(l, _)| (l0_hat * l0_hat + l * l).ln())
        .sum::<f64>()
        / n;
    let ym = points.iter().map(|&(_, y)| y).sum::<f64>() / n;
    for &(l, y) in &points {
        let dz = (l0_hat * l0_hat + l * l).ln() - zm;
        szz += dz * dz;
        syy += (y - ym) * (y - ym);
    }
    let stderr_slope = if points.len() > 2 {
        (sse / ((n - 2.0) * szz)).sqrt()
    } else {
        0.0
    };
    Ok(KernelFit {
        gamma0: intercept.exp(),
        l0: l0_hat,
        beta: -2.0 * slope,
        stderr_beta: 2.0 * stderr_slope,
        window,
        r_squared: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 },
        excluded_points: excluded,
    })
}

// ---------------------------------------------------------------------------
// Critical exponent and cost diagnostics
// ---------------------------------------------------------------------------

/// Critical kernel decay exponent `(1 - gamma) / 2` balancing long-memory
/// flow against price unpredictability. Defined for a long-memory process,
/// `0 < gamma < 1`.
pub fn critical_beta(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CoreError::Domain(format!(
            "gamma must lie in (0, 1) for a long-memory process, got {gamma}"
        )));
    }
    Ok((1.0 - gamma) / 2.0)
}

/// Average uniform-strategy response cost and correlation area over a fixed
/// horizon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostDiagnostics {
    /// `kappa = (1/L) sum_{l=1..L} R(l)`.
    pub kappa: f64,
    /// `chi = sum_{l=1..L} C(l)`.
    pub chi: f64,
    pub horizon: usize,
}

/// Compute the cost diagnostics from measured series. Sums start at lag 1;
/// `include_lag_zero` switches to summing from lag 0.
pub fn cost_from_series(
    response: &LagSeries,
    correlation: &LagSeries,
    horizon: usize,
    include_lag_zero: bool,
) -> Result<CostDiagnostics> {
    if response.max_lag() < horizon || correlation.max_lag() < horizon {
        return Err(CoreError::Config(format!(
            "series reach lags {} and {}, need {horizon}",
            response.max_lag(),
            correlation.max_lag()
        )));
    }
    let start = if include_lag_zero { 0 } else { 1 };
    let mut kappa = 0.0;
    let mut chi = 0.0;
    for l in start..=horizon {
        kappa += response.value(l);
        chi += correlation.value(l);
    }
    kappa /= (horizon + 1 - start) as f64;
    Ok(CostDiagnostics {
        kappa,
        chi,
        horizon,
    })
}

/// Measure the per-scope series and compute the diagnostics in one step.
pub fn cost_diagnostics(tape: &Tape, scope: Scope, horizon: usize) -> Result<CostDiagnostics> {
    let analyzer = LagAnalyzer::new(tape, horizon)?;
    let r = analyzer.response(scope)?;
    let c = analyzer.correlation(scope, false)?;
    cost_from_series(&r, &c, horizon, false)
}

// ---------------------------------------------------------------------------
// Kappa/chi study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FirmKappaChi {
    pub firm: FirmId,
    pub chi: f64,
    pub kappa_measured: f64,
    pub kappa_reconstructed: f64,
    pub r0: f64,
}

/// Paired per-firm cost tables: measured against reconstructed-under-a-
/// global-kernel, plus the instantaneous response, all as functions of the
/// correlation area.
#[derive(Debug, Clone, Serialize)]
pub struct KappaChiStudy {
    pub horizon: usize,
    pub rows: Vec<FirmKappaChi>,
    /// Least-squares slope of measured kappa on chi (None when degenerate).
    pub measured_trend: Option<f64>,
    pub reconstructed_trend: Option<f64>,
    pub r0_trend: Option<f64>,
    /// Set when fewer than two firms make a trend meaningless.
    pub degenerate: bool,
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Compare measured per-firm costs with the global-kernel reconstruction.
///
/// The reconstruction feeds each firm's measured correlation and
/// instantaneous response through the shared kernel, so a sign split
/// between the two trends indicates impact propagation that is not captured
/// by a single market-wide kernel.
pub fn kappa_chi_study(
    tape: &Tape,
    firms: &[FirmId],
    kernel: &Kernel,
    horizon: usize,
    tail_horizon: usize,
) -> Result<KappaChiStudy> {
    let max_lag = horizon.max(tail_horizon);
    let analyzer = LagAnalyzer::new(tape, max_lag)?;
    let market_r0 = analyzer.response(Scope::Market)?.value(0);
    let mut rows = Vec::with_capacity(firms.len());
    for &firm in firms {
        let r = analyzer.response(Scope::Firm(firm))?;
        let c = analyzer.correlation(Scope::Firm(firm), false)?;
        let measured = cost_from_series(&r, &c, horizon, false)?;
        let ri0 = r.value(0);
        let rec = reconstruct_response(kernel, &c.values, market_r0, Some(ri0), horizon, tail_horizon)?;
        let kappa_rec = rec.values[1..].iter().sum::<f64>() / horizon as f64;
        rows.push(FirmKappaChi {
            firm,
            chi: measured.chi,
            kappa_measured: measured.kappa,
            kappa_reconstructed: kappa_rec,
            r0: ri0,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.chi).collect();
    let measured_trend = ols_slope(&xs, &rows.iter().map(|r| r.kappa_measured).collect::<Vec<_>>());
    let reconstructed_trend =
        ols_slope(&xs, &rows.iter().map(|r| r.kappa_reconstructed).collect::<Vec<_>>());
    let r0_trend = ols_slope(&xs, &rows.iter().map(|r| r.r0).collect::<Vec<_>>());
    Ok(KappaChiStudy {
        horizon,
        degenerate: rows.len() < 2,
        rows,
        measured_trend,
        reconstructed_trend,
        r0_trend,
    })
}
