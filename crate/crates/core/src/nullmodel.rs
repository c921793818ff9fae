//! Firm-ID shuffling null model: destroy firm identity while preserving
//! every firm's trade count exactly, to test whether per-firm impact
//! heterogeneity exceeds sampling noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::fit::fit_power_law;
use crate::measure::{impact_curve, Binning, Scope};
use crate::tape::{FirmId, Tape};

/// RNG recorded in reports so replicates are reproducible cross-platform.
pub const RNG_ALGORITHM: &str = "chacha20";

/// Permute the multiset of trigger ids uniformly at random over trade
/// slots. Every participation ratio is preserved exactly; all other fields
/// are untouched.
pub fn shuffle_ids(tape: &Tape, seed: u64) -> Result<Tape> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut triggers: Vec<FirmId> = tape.trades().iter().map(|t| t.trigger).collect();
    triggers.shuffle(&mut rng);
    tape.with_triggers(&triggers)
}

/// Estimator settings for the per-firm impact-exponent pipeline the null
/// band runs on real and shuffled tapes.
#[derive(Debug, Clone)]
pub struct NullBandConfig {
    pub n_replicates: usize,
    pub binning: Binning,
    pub fit_window: Option<(f64, f64)>,
    pub activity_floor: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FirmBand {
    pub firm: FirmId,
    pub trades: usize,
    pub real_alpha: Option<f64>,
    /// Mean of the shuffled exponents for this firm slot.
    pub mean: f64,
    /// One standard deviation of the shuffled exponents.
    pub std: f64,
    pub n_estimates: usize,
    /// True when the real exponent lies outside mean +- std.
    pub outside: Option<bool>,
}

/// Shuffling study report: per-firm null bands and the exceedance summary.
#[derive(Debug, Clone, Serialize)]
pub struct ShuffleReport {
    pub seed: u64,
    pub n_replicates: usize,
    pub rng_algorithm: &'static str,
    pub alpha_market: f64,
    pub per_firm: Vec<FirmBand>,
    /// Mean and std of the pooled shuffled exponents over firms and
    /// replicates.
    pub pooled_mean: f64,
    pub pooled_std: f64,
    /// Mean shuffled exponent per replicate (over firms); their scatter is
    /// the sampling error of the pooled mean.
    pub replicate_means: Vec<f64>,
    /// Fraction of firms with a real fit whose exponent falls outside
    /// their one-standard-deviation band.
    pub exceedance_fraction: f64,
    /// Per-replicate count of firms whose shuffled fit failed.
    pub replicate_failures: Vec<usize>,
}

fn firm_alpha(tape: &Tape, firm: FirmId, cfg: &NullBandConfig) -> Result<f64> {
    let curve = impact_curve(tape, Scope::Firm(firm), &cfg.binning)?;
    Ok(fit_power_law(&curve.fit_points(), cfg.fit_window)?.exponent)
}

/// Run the shuffling null model.
///
/// Each replicate shuffles the trigger ids under a sub-seed drawn from the
/// master seed, refits every above-floor firm's impact exponent, and the
/// per-firm spread of those null exponents forms the band the real
/// exponents are tested against.
pub fn null_band(tape: &Tape, cfg: &NullBandConfig, seed: u64) -> Result<ShuffleReport> {
    if cfg.n_replicates == 0 {
        return Err(CoreError::Config("need at least one replicate".into()));
    }
    let firms = tape.active_firms(cfg.activity_floor);
    if firms.is_empty() {
        return Err(CoreError::EmptyScope(format!(
            "no firm meets the activity floor of {} trades",
            cfg.activity_floor
        )));
    }
    let market_curve = impact_curve(tape, Scope::Market, &cfg.binning)?;
    let alpha_market = fit_power_law(&market_curve.fit_points(), cfg.fit_window)?.exponent;

    let real: Vec<Option<f64>> = firms
        .iter()
        .map(|&f| firm_alpha(tape, f, cfg).ok())
        .collect();

    // Sub-seeds are drawn up front so replicates are independent and
    // reproducible by index.
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let sub_seeds: Vec<u64> = (0..cfg.n_replicates).map(|_| master.random()).collect();

    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n_replicates); firms.len()];
    let mut replicate_failures = Vec::with_capacity(cfg.n_replicates);
    let mut replicate_means = Vec::with_capacity(cfg.n_replicates);
    for &sub in &sub_seeds {
        let shuffled = shuffle_ids(tape, sub)?;
        let mut failures = 0usize;
        let mut sum = 0.0;
        let mut ok = 0usize;
        for (i, &f) in firms.iter().enumerate() {
            match firm_alpha(&shuffled, f, cfg) {
                Ok(a) => {
                    samples[i].push(a);
                    sum += a;
                    ok += 1;
                }
                Err(_) => failures += 1,
            }
        }
        replicate_failures.push(failures);
        replicate_means.push(if ok > 0 { sum / ok as f64 } else { f64::NAN });
    }

    let mut per_firm = Vec::with_capacity(firms.len());
    let mut pooled: Vec<f64> = Vec::new();
    let mut outside_count = 0usize;
    let mut tested = 0usize;
    for (i, &f) in firms.iter().enumerate() {
        let xs = &samples[i];
        let n = xs.len();
        let mean = if n > 0 { xs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        pooled.extend_from_slice(xs);
        let outside = match (real[i], n > 1) {
            (Some(a), true) => {
                tested += 1;
                let out = (a - mean).abs() > std;
                if out {
                    outside_count += 1;
                }
                Some(out)
            }
            _ => None,
        };
        per_firm.push(FirmBand {
            firm: f,
            trades: tape.firm_ticks(f).map_or(0, |s| s.len()),
            real_alpha: real[i],
            mean,
            std,
            n_estimates: n,
            outside,
        });
    }
    let pooled_mean = pooled.iter().sum::<f64>() / pooled.len().max(1) as f64;
    let pooled_std = if pooled.len() > 1 {
        (pooled
            .iter()
            .map(|x| (x - pooled_mean) * (x - pooled_mean))
            .sum::<f64>()
            / (pooled.len() - 1) as f64)
            .sqrt()
    } else {
        f64::NAN
    };
    Ok(ShuffleReport {
        seed,
        n_replicates: cfg.n_replicates,
        rng_algorithm: RNG_ALGORITHM,
        alpha_market,
        per_firm,
        pooled_mean,
        pooled_std,
        replicate_means,
        exceedance_fraction: if tested > 0 {
            outside_count as f64 / tested as f64
        } else {
            f64::NAN
        },
        replicate_failures,
    })
}
