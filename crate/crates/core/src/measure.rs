//! Conditional and lag-dependent estimators over a [`Tape`]: impact curves,
//! response functions, sign correlations and volume distributions, at market
//! level and per firm.
//!
//! All estimators are pure functions of the immutable tape. Lag series are
//! computed either directly or through FFT cross-correlations depending on
//! the work size; both paths produce identical results up to floating-point
//! rounding.
//!
//! Edge convention: at lag `l` the admissible reference ticks are
//! `0 <= t <= N-1-l` in every scope, so the participation-weighted
//! decomposition of market series into firm series holds exactly when the
//! weights are recomputed over admissible ticks per lag.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tape::{FirmId, Tape};

/// Which trades an estimator conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Market,
    Firm(FirmId),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Market => write!(f, "MARKET"),
            Scope::Firm(id) => write!(f, "{id}"),
        }
    }
}

fn scope_ticks<'a>(tape: &'a Tape, scope: Scope) -> Result<ScopeTicks<'a>> {
    match scope {
        Scope::Market => Ok(ScopeTicks::All(tape.len())),
        Scope::Firm(id) => match tape.firm_ticks(id) {
            Some(ticks) if !ticks.is_empty() => Ok(ScopeTicks::Indexed(ticks)),
            _ => Err(CoreError::EmptyScope(format!(
                "firm {id} has no trades on this tape"
            ))),
        },
    }
}

enum ScopeTicks<'a> {
    All(usize),
    Indexed(&'a [usize]),
}

impl ScopeTicks<'_> {
    fn len(&self) -> usize {
        match self {
            ScopeTicks::All(n) => *n,
            ScopeTicks::Indexed(s) => s.len(),
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize)) {
        match self {
            ScopeTicks::All(n) => (0..*n).for_each(&mut f),
            ScopeTicks::Indexed(s) => s.iter().copied().for_each(&mut f),
        }
    }

    /// Admissible counts per lag: `counts[l] = #{t in scope : t <= n-1-l}`.
    fn admissible_counts(&self, n: usize, max_lag: usize) -> Vec<u64> {
        let mut counts = vec![0u64; max_lag + 1];
        match self {
            ScopeTicks::All(sz) => {
                debug_assert_eq!(*sz, n);
                for (l, c) in counts.iter_mut().enumerate() {
                    *c = (n - l.min(n)) as u64;
                }
            }
            ScopeTicks::Indexed(s) => {
                // s is sorted ascending; walk once from the top.
                let mut hi = s.len();
                for (l, c) in counts.iter_mut().enumerate() {
                    if l >= n {
                        *c = 0;
                        continue;
                    }
                    let limit = n - 1 - l;
                    while hi > 0 && s[hi - 1] > limit {
                        hi -= 1;
                    }
                    *c = hi as u64;
                }
            }
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// Lag series
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Response,
    Correlation,
    Kernel,
}

/// A function of tick lag `l = 0..=max_lag` with per-lag sample counts and
/// standard errors (sample standard deviation over the square root of the
/// count; optimistic under long memory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagSeries {
    pub kind: SeriesKind,
    pub values: Vec<f64>,
    pub counts: Vec<u64>,
    pub stderr: Vec<f64>,
}

impl LagSeries {
    pub fn max_lag(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    pub fn value(&self, lag: usize) -> f64 {
        self.values[lag]
    }

    /// Points for log-log fitting: (lag, value, count), skipping lag 0.
    pub fn fit_points(&self) -> Vec<(f64, f64, f64)> {
        self.values
            .iter()
            .zip(&self.counts)
            .enumerate()
            .skip(1)
            .filter(|(_, (v, c))| v.is_finite() && **c > 0)
            .map(|(l, (v, c))| (l as f64, *v, *c as f64))
            .collect()
    }

    /// Lags whose sample count is below `min_samples`.
    pub fn flagged_lags(&self, min_samples: u64) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c < min_samples)
            .map(|(l, _)| l)
            .collect()
    }
}

/// Work threshold above which lag series switch to the FFT path.
const FFT_WORK_THRESHOLD: usize = 1 << 26;

/// Batched lag-series computation over one tape.
///
/// Shares the padded FFT spectra of the sign and quote series across scopes,
/// so per-firm sweeps cost one forward and one inverse transform per series
/// instead of a full re-plan.
pub struct LagAnalyzer<'a> {
    tape: &'a Tape,
    max_lag: usize,
    eps: Vec<f64>,
    q_after: Vec<f64>,
    eps_qb: Vec<f64>,
    fft: Option<FftCtx>,
}

struct FftCtx {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    spec_eps: Vec<Complex<f64>>,
    spec_q_after: Vec<Complex<f64>>,
    spec_q_after_sq: Vec<Complex<f64>>,
}

impl FftCtx {
    fn new(eps: &[f64], q_after: &[f64], max_lag: usize) -> Self {
        let m = (eps.len() + max_lag + 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let spec_eps = Self::transform(&forward, eps, m);
        let spec_q_after = Self::transform(&forward, q_after, m);
        let q_after_sq: Vec<f64> = q_after.iter().map(|q| q * q).collect();
        let spec_q_after_sq = Self::transform(&forward, &q_after_sq, m);
        FftCtx {
            m,
            forward,
            inverse,
            spec_eps,
            spec_q_after,
            spec_q_after_sq,
        }
    }

    fn transform(fft: &Arc<dyn Fft<f64>>, x: &[f64], m: usize) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(m, Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        buf
    }

    /// Cross-correlation sums `out[l] = sum_t a[t] * b[t+l]` for
    /// `l = 0..=max_lag`, where `b` is one of the cached spectra.
    fn correlate(&self, a: &[f64], spec_b: &[Complex<f64>], max_lag: usize) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = a.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(self.m, Complex::new(0.0, 0.0));
        self.forward.process(&mut buf);
        for (x, y) in buf.iter_mut().zip(spec_b) {
            *x = x.conj() * y;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.m as f64;
        buf[..=max_lag].iter().map(|c| c.re * scale).collect()
    }
}

impl<'a> LagAnalyzer<'a> {
    pub fn new(tape: &'a Tape, max_lag: usize) -> Result<Self> {
        if max_lag >= tape.len() {
            return Err(CoreError::Config(format!(
                "max lag {max_lag} must be below the tape length {}",
                tape.len()
            )));
        }
        let eps = tape.signs();
        let q_after = tape.quotes_after();
        let eps_qb: Vec<f64> = tape
            .trades()
            .iter()
            .map(|t| t.sign.value() * t.quote_before)
            .collect();
        let fft = if tape.len() * (max_lag + 1) > FFT_WORK_THRESHOLD {
            Some(FftCtx::new(&eps, &q_after, max_lag))
        } else {
            None
        };
        Ok(LagAnalyzer {
            tape,
            max_lag,
            eps,
            q_after,
            eps_qb,
            fft,
        })
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    fn use_fft(&self, scope_len: usize) -> bool {
        self.fft.is_some() && scope_len * (self.max_lag + 1) > FFT_WORK_THRESHOLD
    }

    /// Average response of the quote `l` ticks after a trade of the scope,
    /// in bps of the spread. Lag 0 is the mean instantaneous impact.
    pub fn response(&self, scope: Scope) -> Result<LagSeries> {
        let ticks = scope_ticks(self.tape, scope)?;
        let n = self.tape.len();
        let counts = ticks.admissible_counts(n, self.max_lag);
        let sigma = self.tape.sigma();

        let (sums, sq_sums) = if self.use_fft(ticks.len()) {
            self.response_sums_fft(&ticks)
        } else {
            self.response_sums_direct(&ticks)
        };

        let mut values = Vec::with_capacity(self.max_lag + 1);
        let mut stderr = Vec::with_capacity(self.max_lag + 1);
        for l in 0..=self.max_lag {
            let c = counts[l];
            if c == 0 {
                values.push(f64::NAN);
                stderr.push(f64::NAN);
                continue;
            }
            let cf = c as f64;
            let mean = sums[l] / cf;
            values.push(mean / sigma);
            if c > 1 {
                let var = ((sq_sums[l] - cf * mean * mean) / (cf - 1.0)).max(0.0);
                stderr.push((var / cf).sqrt() / sigma);
            } else {
                stderr.push(0.0);
            }
        }
        Ok(LagSeries {
            kind: SeriesKind::Response,
            values,
            counts,
            stderr,
        })
    }

    fn response_sums_direct(&self, ticks: &ScopeTicks) -> (Vec<f64>, Vec<f64>) {
        let n = self.tape.len();
        let mut sums = vec![0.0; self.max_lag + 1];
        let mut sq = vec![0.0; self.max_lag + 1];
        ticks.for_each(|t| {
            let e = self.eps[t];
            let qb = self.eps_qb[t];
            let l_hi = self.max_lag.min(n - 1 - t);
            for l in 0..=l_hi {
                let x = e * self.q_after[t + l] - qb;
                sums[l] += x;
                sq[l] += x * x;
            }
        });
        (sums, sq)
    }

    fn response_sums_fft(&self, ticks: &ScopeTicks) -> (Vec<f64>, Vec<f64>) {
        let ctx = self.fft.as_ref().expect("fft context");
        let n = self.tape.len();
        let masked_eps = self.masked(ticks, &self.eps);
        let corr = ctx.correlate(&masked_eps, &ctx.spec_q_after, self.max_lag);
        // x = eps_t q+_{t+l} - eps_t q-_t, so
        // sum x   = corr(mask eps, q+)      - prefix(mask eps q-)
        // sum x^2 = corr(mask, q+^2) - 2 corr(mask q-, q+) + prefix(mask q-^2)
        let mask: Vec<f64> = match ticks {
            ScopeTicks::All(_) => vec![1.0; n],
            ScopeTicks::Indexed(s) => {
                let mut m = vec![0.0; n];
                for &t in *s {
                    m[t] = 1.0;
                }
                m
            }
        };
        let masked_qb: Vec<f64> = mask
            .iter()
            .zip(self.tape.trades())
            .map(|(m, t)| m * t.quote_before)
            .collect();
        let corr_sq = ctx.correlate(&mask, &ctx.spec_q_after_sq, self.max_lag);
        let corr_cross = ctx.correlate(&masked_qb, &ctx.spec_q_after, self.max_lag);

        let mut prefix_eqb = vec![0.0; n + 1];
        let mut prefix_qb2 = vec![0.0; n + 1];
        for t in 0..n {
            let qb = self.tape.trades()[t].quote_before;
            prefix_eqb[t + 1] = prefix_eqb[t] + mask[t] * self.eps_qb[t];
            prefix_qb2[t + 1] = prefix_qb2[t] + mask[t] * qb * qb;
        }
        let mut sums = Vec::with_capacity(self.max_lag + 1);
        let mut sq = Vec::with_capacity(self.max_lag + 1);
        for l in 0..=self.max_lag {
            let limit = n - l; // sum over t <= n-1-l
            sums.push(corr[l] - prefix_eqb[limit]);
            sq.push(corr_sq[l] - 2.0 * corr_cross[l] + prefix_qb2[limit]);
        }
        (sums, sq)
    }

    /// Sign autocorrelation of the scope: the mean of `eps_t * eps_{t+l}`
    /// over admissible `t` in the scope, the later trade being anyone's.
    /// `connected` subtracts the squared market mean sign.
    pub fn correlation(&self, scope: Scope, connected: bool) -> Result<LagSeries> {
        let ticks = scope_ticks(self.tape, scope)?;
        let n = self.tape.len();
        let counts = ticks.admissible_counts(n, self.max_lag);

        let sums = if self.use_fft(ticks.len()) {
            let ctx = self.fft.as_ref().expect("fft context");
            let masked_eps = self.masked(&ticks, &self.eps);
            ctx.correlate(&masked_eps, &ctx.spec_eps, self.max_lag)
        } else {
            let mut sums = vec![0.0; self.max_lag + 1];
            ticks.for_each(|t| {
                let e = self.eps[t];
                let l_hi = self.max_lag.min(n - 1 - t);
                for l in 0..=l_hi {
                    sums[l] += e * self.eps[t + l];
                }
            });
            sums
        };

        let offset = if connected {
            let mean = self.eps.iter().sum::<f64>() / n as f64;
            mean * mean
        } else {
            0.0
        };
        let mut values: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| if *c > 0 { s / (*c as f64) - offset } else { f64::NAN })
            .collect();
        if !connected {
            // eps^2 = 1, so the lag-0 value is exactly one.
            values[0] = 1.0;
        }
        // Products of signs are +-1, so the sample variance is
        // (1 - mean^2) n/(n-1).
        let stderr: Vec<f64> = values
            .iter()
            .zip(&counts)
            .map(|(v, c)| {
                if *c > 1 {
                    let m = v + offset;
                    let cf = *c as f64;
                    (((1.0 - m * m).max(0.0) * cf / (cf - 1.0)) / cf).sqrt()
                } else if *c == 1 {
                    0.0
                } else {
                    f64::NAN
                }
            })
            .collect();
        Ok(LagSeries {
            kind: SeriesKind::Correlation,
            values,
            counts,
            stderr,
        })
    }

    fn masked(&self, ticks: &ScopeTicks, base: &[f64]) -> Vec<f64> {
        match ticks {
            ScopeTicks::All(_) => base.to_vec(),
            ScopeTicks::Indexed(s) => {
                let mut out = vec![0.0; base.len()];
                for &t in *s {
                    out[t] = base[t];
                }
                out
            }
        }
    }
}

/// One-shot market or firm response function.
pub fn response(tape: &Tape, scope: Scope, max_lag: usize) -> Result<LagSeries> {
    LagAnalyzer::new(tape, max_lag)?.response(scope)
}

/// One-shot sign autocorrelation, as defined (without mean subtraction).
pub fn sign_correlation(tape: &Tape, scope: Scope, max_lag: usize) -> Result<LagSeries> {
    LagAnalyzer::new(tape, max_lag)?.correlation(scope, false)
}

/// Mean instantaneous impact of the scope in bps of the spread; identical to
/// the lag-0 response.
pub fn mean_impact(tape: &Tape, scope: Scope) -> Result<f64> {
    let ticks = scope_ticks(tape, scope)?;
    let mut sum = 0.0;
    let trades = tape.trades();
    ticks.for_each(|t| sum += trades[t].signed_move());
    Ok(sum / ticks.len() as f64 / tape.sigma())
}

// ---------------------------------------------------------------------------
// Impact curves
// ---------------------------------------------------------------------------

/// Volume binning layout for conditional estimators.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Binning {
    /// Number of log-spaced bins spanning the scope's volume range.
    pub n_bins: usize,
    /// Bins with fewer samples are suppressed from the reported curve.
    pub min_count: u64,
}

impl Default for Binning {
    fn default() -> Self {
        Binning {
            n_bins: 25,
            min_count: 50,
        }
    }
}

/// Binned conditional mean impact as a function of trade volume, in bps of
/// the spread.
#[derive(Debug, Clone, Serialize)]
pub struct ImpactCurve {
    pub scope_label: String,
    pub bin_lo: Vec<f64>,
    pub bin_hi: Vec<f64>,
    pub bin_mean_volume: Vec<f64>,
    pub delta: Vec<f64>,
    pub count: Vec<u64>,
    pub stderr: Vec<f64>,
    /// Bins dropped for falling short of the count floor.
    pub suppressed_bins: usize,
}

impl ImpactCurve {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Points for power-law fitting: (mean volume, delta, count).
    pub fn fit_points(&self) -> Vec<(f64, f64, f64)> {
        self.bin_mean_volume
            .iter()
            .zip(&self.delta)
            .zip(&self.count)
            .map(|((v, d), c)| (*v, *d, *c as f64))
            .collect()
    }
}

struct LogBins {
    lo: f64,
    step: f64,
    n: usize,
}

impl LogBins {
    fn span(values: impl Iterator<Item = f64>, n: usize) -> Option<LogBins> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 {
            return None;
        }
        if lo == hi {
            return Some(LogBins {
                lo: lo.ln(),
                step: 0.0,
                n: 1,
            });
        }
        Some(LogBins {
            lo: lo.ln(),
            step: (hi.ln() - lo.ln()) / n as f64,
            n,
        })
    }

    fn index(&self, v: f64) -> usize {
        if self.step == 0.0 {
            return 0;
        }
        (((v.ln() - self.lo) / self.step) as usize).min(self.n - 1)
    }

    fn edges(&self, k: usize) -> (f64, f64) {
        if self.step == 0.0 {
            let v = self.lo.exp();
            return (v, v);
        }
        (
            (self.lo + self.step * k as f64).exp(),
            (self.lo + self.step * (k + 1) as f64).exp(),
        )
    }
}

/// Conditional market impact over log-spaced volume bins.
pub fn impact_curve(tape: &Tape, scope: Scope, binning: &Binning) -> Result<ImpactCurve> {
    if binning.n_bins == 0 {
        return Err(CoreError::Config("binning needs at least one bin".into()));
    }
    let ticks = scope_ticks(tape, scope)?;
    let trades = tape.trades();
    let sigma = tape.sigma();

    let mut volumes = Vec::with_capacity(ticks.len());
    ticks.for_each(|t| volumes.push(trades[t].volume));
    let bins = LogBins::span(volumes.iter().copied(), binning.n_bins)
        .ok_or_else(|| CoreError::EmptyScope(format!("scope {scope} has no positive volumes")))?;

    let nb = bins.n;
    let mut count = vec![0u64; nb];
    let mut sum_v = vec![0.0; nb];
    let mut sum_d = vec![0.0; nb];
    let mut sum_d2 = vec![0.0; nb];
    ticks.for_each(|t| {
        let v = trades[t].volume;
        let d = trades[t].signed_move() / sigma;
        let k = bins.index(v);
        count[k] += 1;
        sum_v[k] += v;
        sum_d[k] += d;
        sum_d2[k] += d * d;
    });

    let mut curve = ImpactCurve {
        scope_label: scope.to_string(),
        bin_lo: Vec::new(),
        bin_hi: Vec::new(),
        bin_mean_volume: Vec::new(),
        delta: Vec::new(),
        count: Vec::new(),
        stderr: Vec::new(),
        suppressed_bins: 0,
    };
    for k in 0..nb {
        if count[k] == 0 {
            continue;
        }
        if count[k] < binning.min_count {
            curve.suppressed_bins += 1;
            continue;
        }
        let c = count[k] as f64;
        let mean_d = sum_d[k] / c;
        let var = (sum_d2[k] / c - mean_d * mean_d).max(0.0);
        let stderr = if count[k] > 1 {
            (var * c / (c - 1.0)).sqrt() / c.sqrt()
        } else {
            0.0
        };
        let (lo, hi) = bins.edges(k);
        curve.bin_lo.push(lo);
        curve.bin_hi.push(hi);
        curve.bin_mean_volume.push(sum_v[k] / c);
        curve.delta.push(mean_d);
        curve.count.push(count[k]);
        curve.stderr.push(stderr);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Volume distribution
// ---------------------------------------------------------------------------

/// Histogram of volumes rescaled by the scope mean, on log-spaced bins,
/// density-normalized; keeps the scaled samples for likelihood fitting.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeDistribution {
    pub scope_label: String,
    pub mean_volume: f64,
    pub bin_lo: Vec<f64>,
    pub bin_hi: Vec<f64>,
    pub density: Vec<f64>,
    pub count: Vec<u64>,
    #[serde(skip)]
    pub scaled_samples: Vec<f64>,
}

pub fn volume_distribution(tape: &Tape, scope: Scope, n_bins: usize) -> Result<VolumeDistribution> {
    let ticks = scope_ticks(tape, scope)?;
    let trades = tape.trades();
    let mut samples = Vec::with_capacity(ticks.len());
    ticks.for_each(|t| samples.push(trades[t].volume));
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    if !(mean > 0.0) {
        return Err(CoreError::EmptyScope(format!("scope {scope} has no volume")));
    }
    for s in samples.iter_mut() {
        *s /= mean;
    }
    let bins = LogBins::span(samples.iter().copied(), n_bins)
        .ok_or_else(|| CoreError::EmptyScope(format!("scope {scope} has no positive volumes")))?;
    let nb = bins.n;
    let mut count = vec![0u64; nb];
    for &x in &samples {
        count[bins.index(x)] += 1;
    }
    let total = samples.len() as f64;
    let mut out = VolumeDistribution {
        scope_label: scope.to_string(),
        mean_volume: mean,
        bin_lo: Vec::new(),
        bin_hi: Vec::new(),
        density: Vec::new(),
        count: Vec::new(),
        scaled_samples: samples,
    };
    for k in 0..nb {
        if count[k] == 0 {
            continue;
        }
        let (lo, hi) = bins.edges(k);
        let width = (hi - lo).max(f64::MIN_POSITIVE);
        out.bin_lo.push(lo);
        out.bin_hi.push(hi);
        out.density.push(count[k] as f64 / (total * width));
        out.count.push(count[k]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Factorization check
// ---------------------------------------------------------------------------

/// Ratio matrix testing whether the volume-conditional response factorizes
/// into the instantaneous impact curve times a lag factor.
///
/// The lag factor is normalized to one at lag zero, so on an exactly
/// separable tape every well-populated cell has ratio one up to sampling
/// noise.
#[derive(Debug, Clone, Serialize)]
pub struct FactorizationCheck {
    pub lags: Vec<usize>,
    pub bin_lo: Vec<f64>,
    pub bin_hi: Vec<f64>,
    /// `ratio[i][k]`: lag `lags[i]`, volume bin `k`.
    pub ratio: Vec<Vec<f64>>,
    pub count: Vec<Vec<u64>>,
    /// Cells with enough samples and a positive ratio.
    pub populated: Vec<Vec<bool>>,
    /// Max |ln ratio| over populated cells.
    pub max_abs_log_ratio: f64,
    pub under_populated_cells: usize,
}

pub fn factorization_check(
    tape: &Tape,
    lags: &[usize],
    binning: &Binning,
    min_cell_count: u64,
) -> Result<FactorizationCheck> {
    if lags.is_empty() {
        return Err(CoreError::Config("need at least one lag".into()));
    }
    let n = tape.len();
    let max_lag = *lags.iter().max().unwrap();
    if max_lag >= n {
        return Err(CoreError::Config(format!(
            "lag {max_lag} must be below tape length {n}"
        )));
    }
    let trades = tape.trades();
    let sigma = tape.sigma();
    let bins = LogBins::span(trades.iter().map(|t| t.volume), binning.n_bins)
        .ok_or_else(|| CoreError::EmptyTape("no positive volumes".into()))?;
    let nb = bins.n;

    // Unconditional response at the requested lags plus lag zero.
    let analyzer = LagAnalyzer::new(tape, max_lag)?;
    let resp = analyzer.response(Scope::Market)?;
    let r0 = resp.value(0);

    // Per (lag, volume bin) conditional response.
    let mut sums = vec![vec![0.0; nb]; lags.len()];
    let mut counts = vec![vec![0u64; nb]; lags.len()];
    let mut delta_sum = vec![0.0; nb];
    let mut delta_count = vec![0u64; nb];
    for t in 0..n {
        let k = bins.index(trades[t].volume);
        let e = trades[t].sign.value();
        delta_sum[k] += trades[t].signed_move() / sigma;
        delta_count[k] += 1;
        for (i, &l) in lags.iter().enumerate() {
            if t + l < n {
                sums[i][k] += e * (trades[t + l].quote_after - trades[t].quote_before) / sigma;
                counts[i][k] += 1;
            }
        }
    }

    let mut out = FactorizationCheck {
        lags: lags.to_vec(),
        bin_lo: (0..nb).map(|k| bins.edges(k).0).collect(),
        bin_hi: (0..nb).map(|k| bins.edges(k).1).collect(),
        ratio: vec![vec![f64::NAN; nb]; lags.len()],
        count: counts.clone(),
        populated: vec![vec![false; nb]; lags.len()],
        max_abs_log_ratio: 0.0,
        under_populated_cells: 0,
    };
    for (i, &l) in lags.iter().enumerate() {
        let r_l = resp.value(l);
        for k in 0..nb {
            if counts[i][k] < min_cell_count || delta_count[k] < min_cell_count {
                out.under_populated_cells += 1;
                continue;
            }
            let r_lv = sums[i][k] / counts[i][k] as f64;
            let delta_v = delta_sum[k] / delta_count[k] as f64;
            // (R(l,V) / Delta(V)) / (R(l) / R(0))
            let denom = delta_v * r_l / r0;
            if denom == 0.0 {
                out.under_populated_cells += 1;
                continue;
            }
            let ratio = r_lv / denom;
            out.ratio[i][k] = ratio;
            if ratio > 0.0 {
                out.populated[i][k] = true;
                out.max_abs_log_ratio = out.max_abs_log_ratio.max(ratio.ln().abs());
            } else {
                out.under_populated_cells += 1;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decomposition identity
// ---------------------------------------------------------------------------

/// Largest relative gap, over lags, between a market series and the
/// participation-weighted sum of the per-firm series, with weights
/// recomputed over admissible ticks per lag. Returns (response gap,
/// correlation gap).
pub fn decomposition_identity_gap(tape: &Tape, max_lag: usize) -> Result<(f64, f64)> {
    let analyzer = LagAnalyzer::new(tape, max_lag)?;
    let market_r = analyzer.response(Scope::Market)?;
    let market_c = analyzer.correlation(Scope::Market, false)?;
    let firms: Vec<FirmId> = tape.firm_ids().collect();
    let mut firm_r = Vec::new();
    let mut firm_c = Vec::new();
    for &f in &firms {
        firm_r.push(analyzer.response(Scope::Firm(f))?);
        firm_c.push(analyzer.correlation(Scope::Firm(f), false)?);
    }
    let gap = |market: &LagSeries, per_firm: &[LagSeries]| -> f64 {
        let mut worst: f64 = 0.0;
        for l in 0..=max_lag {
            let total = market.counts[l];
            if total == 0 {
                continue;
            }
            let mut weighted = 0.0;
            let mut mass = 0.0;
            for s in per_firm {
                if s.counts[l] > 0 {
                    let pi = s.counts[l] as f64 / total as f64;
                    weighted += pi * s.values[l];
                    mass += pi * s.values[l].abs();
                }
            }
            let scale = market.values[l].abs().max(mass).max(1e-30);
            worst = worst.max((market.values[l] - weighted).abs() / scale);
        }
        worst
    };
    Ok((gap(&market_r, &firm_r), gap(&market_c, &firm_c)))
}

/// Per-firm response and correlation series sharing one analyzer pass.
pub fn lag_series_by_firm(
    tape: &Tape,
    max_lag: usize,
    firms: &[FirmId],
) -> Result<BTreeMap<FirmId, (LagSeries, LagSeries)>> {
    let analyzer = LagAnalyzer::new(tape, max_lag)?;
    let mut out = BTreeMap::new();
    for &f in firms {
        let r = analyzer.response(Scope::Firm(f))?;
        let c = analyzer.correlation(Scope::Firm(f), false)?;
        out.insert(f, (r, c));
    }
    Ok(out)
}
