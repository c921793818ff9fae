//! End-to-end pipelines: ingest (parse, aggregate, filter, build) and the
//! full study (impact curves, fits, lag series, volume law, kernel
//! inversion, cost diagnostics, null model) with all file products.
//!
//! Stages that lack the data they need (a tape below the activity floor, a
//! fit window with too few points) are skipped with a recorded warning;
//! anything else aborts with the stage name. Given the same inputs,
//! configuration and seed, the product directory is byte-identical across
//! runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fit::{
    constraint_relation, fit_power_law, predicted_mean_impact, scaling_function_fit,
    weighted_alpha, FirmSummary, PowerLawFit, ScalingFit,
};
use crate::measure::{
    factorization_check, impact_curve, mean_impact, Binning, LagAnalyzer, Scope,
};
use crate::nullmodel::{null_band, NullBandConfig};
use crate::propagator::{
    critical_beta, invert_kernel, kappa_chi_study, KernelFit,
};
use crate::report::{
    write_constraint_csv, write_impact_curve_csv, write_json, write_kappa_chi_csv,
    write_kernel_csv, write_lag_series_csv, write_volume_distribution_csv,
};
use crate::tape::{
    aggregate, build_tape, filter_mismatches, mean_log_spread, parse_raw_file, write_processed_file,
    FirmId, ParseOptions, QuoteMode, Tape, Trade,
};
use crate::{measure, synth};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub l_max: usize,
    /// Truncation horizon of the history tail.
    pub horizon: usize,
    /// Tikhonov parameter; zero solves the plain system.
    pub ridge: f64,
    /// Lag window for fitting the power kernel form.
    pub fit_window: (usize, usize),
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            l_max: 500,
            horizon: 2000,
            ridge: 0.0,
            fit_window: (1, 400),
        }
    }
}

/// Study parameters; every field has a default so an empty config runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// How raw quote columns are read at ingest.
    pub quote_mode: QuoteMode,
    /// Raw-file field delimiter.
    pub delimiter: char,
    pub row_error_budget: usize,
    /// Firms with fewer trades are kept in the tape but excluded from
    /// per-firm estimation.
    pub activity_floor: usize,
    /// Warn when the mismatch filter drops more than this fraction.
    pub mismatch_threshold: f64,
    /// Average log spread for processed tapes that do not carry quotes.
    pub mean_spread: Option<f64>,
    pub binning: Binning,
    /// Lag horizon for reported series and the cost diagnostics.
    pub max_lag: usize,
    /// Lags with fewer samples are flagged in the summary.
    pub min_response_samples: u64,
    pub volume_bins: usize,
    /// Null-model replicates; zero skips the stage.
    pub replicates: usize,
    /// Seed for randomized stages; mandatory when they are requested.
    pub seed: Option<u64>,
    pub factorization_lags: Vec<usize>,
    pub factorization_min_cell: u64,
    pub inversion: InversionConfig,
    /// Lag window for the correlation-exponent fit.
    pub correlation_window: (f64, f64),
    /// Volume window for impact fits; absent means all reported bins.
    pub impact_window: Option<(f64, f64)>,
    /// Anchor for the coefficient/exponent constraint report.
    pub constraint_v0: f64,
    pub constraint_delta0: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            quote_mode: QuoteMode::Price,
            delimiter: ',',
            row_error_budget: 100,
            activity_floor: 10_000,
            mismatch_threshold: 0.05,
            mean_spread: None,
            binning: Binning::default(),
            max_lag: 1000,
            min_response_samples: 100,
            volume_bins: 40,
            replicates: 0,
            seed: None,
            factorization_lags: vec![1, 2, 5, 10, 50],
            factorization_min_cell: 200,
            inversion: InversionConfig::default(),
            correlation_window: (10.0, 1000.0),
            impact_window: None,
            constraint_v0: 60_000.0,
            constraint_delta0: 40.0,
        }
    }
}

impl StudyConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CoreError::Config(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub n_records: usize,
    pub n_row_errors: usize,
    /// First few malformed rows, line-numbered.
    pub row_errors: Vec<crate::tape::RowError>,
    pub n_trades: usize,
    pub dropped: usize,
    pub dropped_fraction: f64,
    /// True when the dropped fraction exceeded the configured threshold.
    pub mismatch_warning: bool,
    pub mean_spread: f64,
    /// Market impact exponent on the processed tape.
    pub alpha_processed: Option<PowerLawFit>,
    /// Market impact exponent treating each raw record as its own trade
    /// (quote change against the previous record), exhibiting the
    /// aggregation bias.
    pub alpha_raw: Option<PowerLawFit>,
}

/// Parse, aggregate, filter and build a tape from a raw file; write the
/// processed tape and the ingest report into `out_dir`.
pub fn run_ingest(
    raw_path: &Path,
    stock_label: &str,
    cfg: &StudyConfig,
    out_dir: &Path,
    compare_raw: bool,
) -> Result<(Tape, IngestReport)> {
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    let opts = ParseOptions {
        delimiter: cfg.delimiter as u8,
        quote_mode: cfg.quote_mode,
        row_error_budget: cfg.row_error_budget,
    };
    let parsed = parse_raw_file(raw_path, &opts)?;
    if parsed.records.is_empty() {
        return Err(CoreError::EmptyTape(format!(
            "no valid records in {}",
            raw_path.display()
        )));
    }
    let trades = aggregate(&parsed.records, cfg.quote_mode);
    let outcome = filter_mismatches(trades, cfg.mismatch_threshold);
    let spread_from_file = mean_log_spread(&parsed.records, cfg.quote_mode);
    let mean_spread = match cfg.mean_spread {
        Some(s) => s,
        None if spread_from_file > 0.0 => spread_from_file,
        None => {
            return Err(CoreError::Config(
                "file quotes give a non-positive mean spread; set mean_spread in the config".into(),
            ))
        }
    };
    let tape = build_tape(outcome.trades, stock_label.to_string(), mean_spread)?;
    write_processed_file(&out_dir.join("tape.csv"), tape.trades())?;

    let alpha_processed = impact_curve(&tape, Scope::Market, &cfg.binning)
        .ok()
        .and_then(|c| fit_power_law(&c.fit_points(), cfg.impact_window).ok());
    let alpha_raw = if compare_raw {
        raw_records_alpha(&parsed.records, cfg, mean_spread)
    } else {
        None
    };

    let mut row_errors = parsed.row_errors;
    let n_row_errors = row_errors.len();
    row_errors.truncate(20);
    let report = IngestReport {
        n_records: parsed.records.len(),
        n_row_errors,
        row_errors,
        n_trades: tape.len(),
        dropped: outcome.dropped,
        dropped_fraction: outcome.dropped_fraction,
        mismatch_warning: outcome.warn,
        mean_spread,
        alpha_processed,
        alpha_raw,
    };
    write_json(&out_dir.join("ingest_report.json"), &report)?;
    Ok((tape, report))
}

/// Impact exponent with each raw record taken as its own trade: the quote
/// change is measured against the previous record, which attributes a
/// merged order's full move to its last fragment at a fragment-sized
/// volume.
fn raw_records_alpha(
    records: &[crate::tape::TradeRecord],
    cfg: &StudyConfig,
    mean_spread: f64,
) -> Option<PowerLawFit> {
    let mode = cfg.quote_mode;
    let trades: Vec<Trade> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let before = if i == 0 {
                r.log_mid(mode)
            } else {
                records[i - 1].log_mid(mode)
            };
            Trade {
                tick: i,
                trigger: r.trigger(),
                sign: r.sign,
                volume: r.notional(),
                quote_before: before,
                quote_after: r.log_mid(mode),
            }
        })
        .collect();
    let kept = filter_mismatches(trades, 1.0).trades;
    let tape = build_tape(kept, "RAW".into(), mean_spread).ok()?;
    let curve = impact_curve(&tape, Scope::Market, &cfg.binning).ok()?;
    fit_power_law(&curve.fit_points(), cfg.impact_window).ok()
}

// ---------------------------------------------------------------------------
// Study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct KappaChiTrends {
    pub measured: Option<f64>,
    pub reconstructed: Option<f64>,
    pub r0: Option<f64>,
}

/// Headline numbers of a study run; the machine-readable `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub stock_label: String,
    pub n_trades: usize,
    pub n_firms: usize,
    pub active_firms: Vec<FirmId>,
    pub mean_spread: f64,
    pub mean_impact: f64,
    pub mean_volume: f64,
    pub alpha_market: Option<PowerLawFit>,
    pub alpha_bar: Option<f64>,
    pub alpha_bar_covered: Option<f64>,
    pub gamma_flow: Option<PowerLawFit>,
    pub beta_critical: Option<f64>,
    pub volume_law: Option<ScalingFit>,
    pub kernel_fit: Option<KernelFit>,
    /// |beta - (1 - gamma)/2| when both are available.
    pub beta_vs_critical_gap: Option<f64>,
    pub factorization_max_abs_log_ratio: Option<f64>,
    pub constraint_rms: Option<f64>,
    pub kappa_chi: Option<KappaChiTrends>,
    pub null_exceedance: Option<f64>,
    pub flagged_response_lags: usize,
    pub firms: Vec<FirmSummary>,
    pub warnings: Vec<String>,
}

fn with_stage(name: &str, e: CoreError) -> CoreError {
    match e {
        CoreError::Schema(m) => CoreError::Schema(format!("stage {name}: {m}")),
        CoreError::EmptyTape(m) => CoreError::EmptyTape(format!("stage {name}: {m}")),
        CoreError::EmptyScope(m) => CoreError::EmptyScope(format!("stage {name}: {m}")),
        CoreError::Fit(m) => CoreError::Fit(format!("stage {name}: {m}")),
        CoreError::Domain(m) => CoreError::Domain(format!("stage {name}: {m}")),
        CoreError::LinearSystem(m) => CoreError::LinearSystem(format!("stage {name}: {m}")),
        CoreError::Config(m) => CoreError::Config(format!("stage {name}: {m}")),
        other => other,
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| with_stage(name, e))
}

/// Soft-fail: convert data-insufficiency errors into a warning, abort on
/// anything else.
fn soft<T>(name: &str, r: Result<T>, warnings: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (CoreError::Fit(_) | CoreError::EmptyScope(_) | CoreError::Config(_))) => {
            warnings.push(format!("{name} skipped: {e}"));
            Ok(None)
        }
        Err(e) => Err(with_stage(name, e)),
    }
}

/// Run the full analysis over a tape and write every product into
/// `out_dir`. Returns the summary that is also persisted as
/// `summary.json`/`summary.txt`.
pub fn run_study(tape: &Tape, cfg: &StudyConfig, out_dir: &Path) -> Result<StudySummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    if cfg.replicates > 0 && cfg.seed.is_none() {
        return Err(CoreError::Config(
            "the null model is randomized: a seed is required when replicates > 0".into(),
        ));
    }
    let mut warnings = Vec::new();
    let n = tape.len();
    let active = tape.active_firms(cfg.activity_floor);
    if active.is_empty() {
        warnings.push(format!(
            "no firm meets the activity floor of {} trades; per-firm stages skipped",
            cfg.activity_floor
        ));
    }

    // --- Market impact -----------------------------------------------------
    let market_curve = stage("impact_market", impact_curve(tape, Scope::Market, &cfg.binning))?;
    write_impact_curve_csv(&out_dir.join("impact_market.csv"), &market_curve)?;
    let alpha_market = soft(
        "impact_market_fit",
        fit_power_law(&market_curve.fit_points(), cfg.impact_window),
        &mut warnings,
    )?;

    // --- Per-firm impact ----------------------------------------------------
    let mut firms: Vec<FirmSummary> = Vec::new();
    for &f in &active {
        let curve = stage("impact_firm", impact_curve(tape, Scope::Firm(f), &cfg.binning))?;
        write_impact_curve_csv(&out_dir.join(format!("impact_firm_{f}.csv")), &curve)?;
        let fit = match soft(
            &format!("impact_fit_firm_{f}"),
            fit_power_law(&curve.fit_points(), cfg.impact_window),
            &mut warnings,
        )? {
            Some(fit) => fit,
            None => continue,
        };
        let ticks = tape.firm_ticks(f).expect("active firm");
        let mean_volume =
            ticks.iter().map(|&t| tape.trades()[t].volume).sum::<f64>() / ticks.len() as f64;
        firms.push(FirmSummary {
            firm: f,
            pi: tape.participation(f),
            alpha: fit.exponent,
            c: fit.coefficient,
            mean_volume,
            mean_impact: mean_impact(tape, Scope::Firm(f))?,
            predicted_impact: None,
            kappa: None,
            chi: None,
        });
    }

    // --- Lag series ----------------------------------------------------------
    let l_report = cfg.max_lag.min(n.saturating_sub(1));
    if l_report < cfg.max_lag {
        warnings.push(format!(
            "lag horizon clipped to {l_report} (tape has {n} trades)"
        ));
    }
    let inv = cfg.inversion;
    let l_needed = l_report.max(inv.horizon).min(n.saturating_sub(1));
    let analyzer = stage("lag_series", LagAnalyzer::new(tape, l_needed))?;
    let market_r = stage("response_market", analyzer.response(Scope::Market))?;
    let market_c = stage("correlation_market", analyzer.correlation(Scope::Market, false))?;
    write_lag_series_csv(&out_dir.join("response_market.csv"), &market_r)?;
    write_lag_series_csv(&out_dir.join("correlation_market.csv"), &market_c)?;

    let gamma_flow = soft(
        "correlation_fit",
        fit_power_law(&market_c.fit_points(), Some(cfg.correlation_window)).map(|mut fit| {
            // The series decays as l^-gamma; report gamma positive.
            fit.exponent = -fit.exponent;
            fit
        }),
        &mut warnings,
    )?;
    let beta_critical = match &gamma_flow {
        Some(g) => soft("critical_beta", critical_beta(g.exponent), &mut warnings)?,
        None => None,
    };

    let mut flagged_response_lags = 0usize;
    let mut firm_series = std::collections::BTreeMap::new();
    for &f in &active {
        let r = stage("response_firm", analyzer.response(Scope::Firm(f)))?;
        let c = stage("correlation_firm", analyzer.correlation(Scope::Firm(f), false))?;
        flagged_response_lags += r.flagged_lags(cfg.min_response_samples).len();
        write_lag_series_csv(&out_dir.join(format!("response_firm_{f}.csv")), &r)?;
        write_lag_series_csv(&out_dir.join(format!("correlation_firm_{f}.csv")), &c)?;
        firm_series.insert(f, (r, c));
    }

    // --- Volume law ------------------------------------------------------------
    let market_dist = stage(
        "volume_distribution",
        measure::volume_distribution(tape, Scope::Market, cfg.volume_bins),
    )?;
    write_volume_distribution_csv(&out_dir.join("volume_market.csv"), &market_dist)?;
    // Pool the per-firm rescaled samples (falling back to the market scope
    // when no firm clears the floor) for the scaled-law fit.
    let pooled: Vec<f64> = if active.is_empty() {
        market_dist.scaled_samples.clone()
    } else {
        let mut pooled = Vec::with_capacity(n);
        for &f in &active {
            let d = stage(
                "volume_distribution_firm",
                measure::volume_distribution(tape, Scope::Firm(f), cfg.volume_bins),
            )?;
            pooled.extend_from_slice(&d.scaled_samples);
        }
        pooled
    };
    let volume_law = soft("volume_law_fit", scaling_function_fit(&pooled), &mut warnings)?;

    if let Some(law) = &volume_law {
        for fs in firms.iter_mut() {
            fs.predicted_impact =
                predicted_mean_impact(fs.c, fs.alpha, fs.mean_volume, law.gamma).ok();
        }
    }

    // --- Constraint and weighted alpha -----------------------------------------
    let constraint_rms = if firms.is_empty() {
        None
    } else {
        let residuals = constraint_relation(&firms, cfg.constraint_v0, cfg.constraint_delta0);
        write_constraint_csv(&out_dir.join("constraint.csv"), &residuals)?;
        Some(residuals.rms)
    };
    let (alpha_bar, alpha_bar_covered) = match weighted_alpha(&firms) {
        Ok((a, c)) => (Some(a), Some(c)),
        Err(_) => (None, None),
    };

    // --- Factorization check -----------------------------------------------------
    let lags_ok: Vec<usize> = cfg
        .factorization_lags
        .iter()
        .copied()
        .filter(|&l| l > 0 && l < n)
        .collect();
    let factorization = if lags_ok.is_empty() {
        warnings.push("factorization skipped: no usable lags".into());
        None
    } else {
        soft(
            "factorization",
            factorization_check(tape, &lags_ok, &cfg.binning, cfg.factorization_min_cell),
            &mut warnings,
        )?
    };
    if let Some(fc) = &factorization {
        write_json(&out_dir.join("factorization.json"), fc)?;
    }

    // --- Kernel inversion -----------------------------------------------------------
    let mut kernel_fit: Option<KernelFit> = None;
    let mut kappa_chi = None;
    if inv.l_max + 1 < n && inv.horizon <= l_needed {
        let inverted = soft(
            "invert_kernel",
            invert_kernel(
                &market_r.values,
                &market_c.values,
                market_r.value(0),
                None,
                inv.l_max,
                inv.horizon,
                inv.ridge,
                Some((inv.fit_window.0, inv.fit_window.1.min(inv.l_max))),
            ),
            &mut warnings,
        )?;
        if let Some(kernel) = inverted {
            write_kernel_csv(&out_dir.join("kernel.csv"), &kernel)?;
            kernel_fit = kernel.fit.clone();
            // Per-firm cost diagnostics under the shared kernel.
            if !active.is_empty() && l_report >= 2 {
                let study = soft(
                    "kappa_chi",
                    kappa_chi_study(tape, &active, &kernel, l_report, inv.horizon),
                    &mut warnings,
                )?;
                if let Some(study) = study {
                    write_kappa_chi_csv(&out_dir.join("kappa_chi.csv"), &study)?;
                    for fs in firms.iter_mut() {
                        if let Some(row) = study.rows.iter().find(|r| r.firm == fs.firm) {
                            fs.kappa = Some(row.kappa_measured);
                            fs.chi = Some(row.chi);
                        }
                    }
                    kappa_chi = Some(KappaChiTrends {
                        measured: study.measured_trend,
                        reconstructed: study.reconstructed_trend,
                        r0: study.r0_trend,
                    });
                }
            }
        }
    } else {
        warnings.push(format!(
            "kernel inversion skipped: tape of {n} trades cannot support l_max {} with horizon {}",
            inv.l_max, inv.horizon
        ));
    }

    // --- Null model -------------------------------------------------------------------
    let mut null_exceedance = None;
    if cfg.replicates > 0 {
        if active.is_empty() {
            warnings.push("null model skipped: no active firms".into());
        } else {
            let report = soft(
                "null_band",
                null_band(
                    tape,
                    &NullBandConfig {
                        n_replicates: cfg.replicates,
                        binning: cfg.binning,
                        fit_window: cfg.impact_window,
                        activity_floor: cfg.activity_floor,
                    },
                    cfg.seed.expect("checked above"),
                ),
                &mut warnings,
            )?;
            if let Some(report) = report {
                null_exceedance = Some(report.exceedance_fraction);
                write_json(&out_dir.join("null_band.json"), &report)?;
            }
        }
    }

    // --- Fit reports and summary ---------------------------------------------------------
    #[derive(Serialize)]
    struct FitReports<'a> {
        alpha_market: &'a Option<PowerLawFit>,
        gamma_flow: &'a Option<PowerLawFit>,
        volume_law: &'a Option<ScalingFit>,
        kernel: &'a Option<KernelFit>,
        firm_alphas: Vec<(FirmId, f64, f64)>,
    }
    write_json(
        &out_dir.join("fits.json"),
        &FitReports {
            alpha_market: &alpha_market,
            gamma_flow: &gamma_flow,
            volume_law: &volume_law,
            kernel: &kernel_fit,
            firm_alphas: firms.iter().map(|f| (f.firm, f.alpha, f.c)).collect(),
        },
    )?;

    let beta_vs_critical_gap = match (&kernel_fit, &beta_critical) {
        (Some(k), Some(bc)) => Some((k.beta - bc).abs()),
        _ => None,
    };
    let summary = StudySummary {
        stock_label: tape.stock_label().to_string(),
        n_trades: n,
        n_firms: tape.firm_index().len(),
        active_firms: active.clone(),
        mean_spread: tape.mean_spread(),
        mean_impact: mean_impact(tape, Scope::Market)?,
        mean_volume: tape.volumes().iter().sum::<f64>() / n as f64,
        alpha_market,
        alpha_bar,
        alpha_bar_covered,
        gamma_flow,
        beta_critical,
        volume_law,
        kernel_fit,
        beta_vs_critical_gap,
        factorization_max_abs_log_ratio: factorization.map(|f| f.max_abs_log_ratio),
        constraint_rms,
        kappa_chi,
        null_exceedance,
        flagged_response_lags,
        firms,
        warnings,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    std::fs::write(out_dir.join("summary.txt"), render_summary(&summary))
        .map_err(|e| CoreError::io(out_dir.join("summary.txt").display().to_string(), e))?;
    Ok(summary)
}

fn fmt_opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    }
}

fn trend_sign(v: &Option<f64>) -> &'static str {
    match v {
        Some(x) if *x > 0.0 => "increasing",
        Some(x) if *x < 0.0 => "decreasing",
        Some(_) => "flat",
        None => "-",
    }
}

fn render_summary(s: &StudySummary) -> String {
    let mut out = String::new();
    use std::fmt::Write;
    let _ = writeln!(out, "study summary: {}", s.stock_label);
    let _ = writeln!(out, "  trades            {}", s.n_trades);
    let _ = writeln!(
        out,
        "  firms             {} ({} above floor)",
        s.n_firms,
        s.active_firms.len()
    );
    let _ = writeln!(out, "  mean impact (bps) {:.4}", s.mean_impact);
    let _ = writeln!(out, "  mean volume       {:.2}", s.mean_volume);
    let _ = writeln!(
        out,
        "  alpha_M           {}",
        fmt_opt(&s.alpha_market.as_ref().map(|f| f.exponent))
    );
    let _ = writeln!(out, "  alpha_bar         {}", fmt_opt(&s.alpha_bar));
    let _ = writeln!(
        out,
        "  gamma (flow)      {}",
        fmt_opt(&s.gamma_flow.as_ref().map(|f| f.exponent))
    );
    let _ = writeln!(
        out,
        "  gamma (volume)    {}",
        fmt_opt(&s.volume_law.as_ref().map(|f| f.gamma))
    );
    let _ = writeln!(
        out,
        "  beta              {}",
        fmt_opt(&s.kernel_fit.as_ref().map(|f| f.beta))
    );
    let _ = writeln!(out, "  beta_c            {}", fmt_opt(&s.beta_critical));
    let _ = writeln!(
        out,
        "  |beta - beta_c|   {}",
        fmt_opt(&s.beta_vs_critical_gap)
    );
    let _ = writeln!(out, "  constraint rms    {}", fmt_opt(&s.constraint_rms));
    let _ = writeln!(
        out,
        "  null exceedance   {}",
        fmt_opt(&s.null_exceedance)
    );
    if let Some(kc) = &s.kappa_chi {
        let _ = writeln!(
            out,
            "  kappa-chi trend   measured {} / reconstructed {}",
            trend_sign(&kc.measured),
            trend_sign(&kc.reconstructed)
        );
    }
    if !s.warnings.is_empty() {
        let _ = writeln!(out, "  warnings:");
        for w in &s.warnings {
            let _ = writeln!(out, "    - {w}");
        }
    }
    out
}

/// Convenience wrapper: generate a synthetic tape and immediately study it.
pub fn simulate_and_study(
    manifest: &synth::SyntheticManifest,
    cfg: &StudyConfig,
    out_dir: &Path,
) -> Result<StudySummary> {
    let out = synth::generate(manifest)?;
    run_study(&out.tape, cfg, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_parses_empty_toml() {
        let cfg = StudyConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.activity_floor, 10_000);
        assert_eq!(cfg.binning.n_bins, 25);
        assert_eq!(cfg.inversion.l_max, 500);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(StudyConfig::from_toml_str("acivity_floor = 10").is_err());
    }

    #[test]
    fn seed_required_for_replicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = crate::synth::SyntheticManifest::from_toml_str(SMALL_MANIFEST).unwrap();
        m.n_trades = 200;
        let out = crate::synth::generate(&m).unwrap();
        let cfg = StudyConfig {
            replicates: 5,
            ..Default::default()
        };
        let err = run_study(&out.tape, &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    pub(crate) const SMALL_MANIFEST: &str = r#"
stock_label = "SYN"
n_trades = 3000
seed = 12
mean_spread = 0.001
volume_gamma = 2.95
noise_scale = 0.00001
impact_noise = 0.4
kernel_truncation = 64

[kernel]
gamma0 = 3.5
l0 = 21.3
beta = 0.375

[constraint]
v0 = 60000.0
delta0 = 40.0

[[firms]]
id = 1
weight = 0.6
alpha = 0.25
mean_volume = 8000.0
meta_tail = 1.25

[[firms]]
id = 2
weight = 0.4
alpha = 0.1
mean_volume = 3000.0
meta_tail = 1.5
"#;

    #[test]
    fn tiny_tape_runs_market_stages_and_warns() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = crate::synth::SyntheticManifest::from_toml_str(SMALL_MANIFEST).unwrap();
        m.n_trades = 100;
        let out = crate::synth::generate(&m).unwrap();
        let cfg = StudyConfig {
            binning: Binning {
                n_bins: 8,
                min_count: 2,
            },
            max_lag: 20,
            ..Default::default()
        };
        let summary = run_study(&out.tape, &cfg, dir.path()).unwrap();
        assert!(summary.active_firms.is_empty());
        assert!(summary.warnings.iter().any(|w| w.contains("activity floor")));
        assert!(dir.path().join("impact_market.csv").exists());
        assert!(dir.path().join("response_market.csv").exists());
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("summary.txt").exists());
    }

    #[test]
    fn study_products_are_deterministic() {
        let mut m = crate::synth::SyntheticManifest::from_toml_str(SMALL_MANIFEST).unwrap();
        m.n_trades = 4000;
        let out = crate::synth::generate(&m).unwrap();
        let cfg = StudyConfig {
            activity_floor: 100,
            binning: Binning {
                n_bins: 10,
                min_count: 5,
            },
            max_lag: 100,
            replicates: 3,
            seed: Some(5),
            inversion: InversionConfig {
                l_max: 40,
                horizon: 100,
                ridge: 0.0,
                fit_window: (1, 40),
            },
            correlation_window: (2.0, 80.0),
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_study(&out.tape, &cfg, d1.path()).unwrap();
        run_study(&out.tape, &cfg, d2.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(names.contains(&"summary.json".to_string()));
        assert!(names.contains(&"kernel.csv".to_string()));
        assert!(names.contains(&"null_band.json".to_string()));
        for name in names {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }
}
