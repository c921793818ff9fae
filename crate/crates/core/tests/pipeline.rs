//! Cross-module integration checks on synthetic ground truth: estimator
//! consistency with the forward model, volume-law oracles, scaling
//! collapse, factorization behavior, the ingest comparison hook, and
//! null-band convergence.

use std::sync::{Mutex, MutexGuard};

use microimpact::fit::{fit_power_law, predicted_mean_impact, scaling_function_fit};
use microimpact::measure::{
    factorization_check, sign_correlation, volume_distribution, Binning, LagAnalyzer, Scope,
};
use microimpact::nullmodel::{null_band, NullBandConfig};
use microimpact::propagator::{reconstruct_response, Extrapolation, Kernel};
use microimpact::study::{run_ingest, StudyConfig};
use microimpact::synth::{
    emit_tape, generate, sample_scaled_volumes, ConstraintAnchor, FirmSpec, KernelParams,
    SyntheticManifest,
};
use microimpact::tape::{build_tape, read_processed_file, QuoteMode};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn firm(id: u32, weight: f64, alpha: f64, mean_volume: f64, tail: Option<f64>) -> FirmSpec {
    FirmSpec {
        id,
        weight,
        alpha,
        c: None,
        mean_volume,
        meta_tail: tail,
        impact_noise: None,
        kernel: None,
    }
}

fn manifest(n_trades: usize, seed: u64, firms: Vec<FirmSpec>) -> SyntheticManifest {
    SyntheticManifest {
        stock_label: "PIPE".into(),
        n_trades,
        seed,
        mean_spread: 0.001,
        volume_gamma: 2.95,
        noise_scale: 2e-5,
        impact_noise: 0.5,
        share_price: 17.25,
        tick_size: 0.0,
        kernel: KernelParams {
            gamma0: 3.5,
            l0: 21.3,
            beta: 0.375,
        },
        kernel_truncation: 500,
        propagated_alpha: None,
        constraint: Some(ConstraintAnchor {
            v0: 60_000.0,
            delta0: 40.0,
        }),
        firms,
    }
}

/// Measured market response on a propagator tape matches the forward
/// reconstruction driven by the true kernel and the measured correlation.
#[test]
fn measured_response_matches_forward_reconstruction() {
    let _guard = heavy();
    let m = manifest(
        1_000_000,
        17,
        vec![
            firm(1, 0.4, 0.25, 8000.0, Some(1.25)),
            firm(2, 0.35, 0.25, 6000.0, Some(1.25)),
            firm(3, 0.25, 0.25, 4000.0, Some(1.25)),
        ],
    );
    let out = generate(&m).unwrap();
    let horizon = 1200;
    let analyzer = LagAnalyzer::new(&out.tape, horizon).unwrap();
    let r = analyzer.response(Scope::Market).unwrap();
    let c = analyzer.correlation(Scope::Market, false).unwrap();
    // The world kernel: the manifest form, held at its truncation lag.
    let kernel = Kernel::from_form(3.5, 21.3, 0.375, m.kernel_truncation)
        .unwrap()
        .with_extrapolation(Extrapolation::HoldLast);
    let rec = reconstruct_response(&kernel, &c.values, r.value(0), None, 300, horizon).unwrap();
    let mut worst: f64 = 0.0;
    for l in 1..=300usize {
        let rel = (r.value(l) - rec.value(l)).abs() / rec.value(l).abs();
        worst = worst.max(rel);
    }
    assert!(
        worst < 0.05,
        "measured response deviates from the forward model by {worst:.3}"
    );
}

/// Monte-Carlo mean of c V^alpha over the volume law matches the closed
/// form within one percent.
#[test]
fn predicted_mean_impact_matches_monte_carlo() {
    let gamma = 2.95;
    let c = 2.556;
    let alpha = 0.25;
    let mean_volume = 8000.0;
    let xs = sample_scaled_volumes(1_000_000, gamma, 314).unwrap();
    let mc = xs
        .iter()
        .map(|x| c * (mean_volume * x).powf(alpha))
        .sum::<f64>()
        / xs.len() as f64;
    let closed = predicted_mean_impact(c, alpha, mean_volume, gamma).unwrap();
    let rel = (mc - closed).abs() / closed;
    assert!(rel < 0.01, "MC {mc} vs closed form {closed} (rel {rel:.4})");
}

/// Measured per-firm mean impacts hug the predictions from the fitted
/// impact laws and the volume-law moment factor.
#[test]
fn firm_mean_impacts_match_predictions() {
    let _guard = heavy();
    let m = manifest(
        400_000,
        23,
        vec![
            firm(1, 0.4, 0.25, 8000.0, Some(1.3)),
            firm(2, 0.3, 0.4, 5000.0, Some(1.3)),
            firm(3, 0.3, 0.1, 3000.0, Some(1.3)),
        ],
    );
    let out = generate(&m).unwrap();
    for f in out.tape.firm_ids().collect::<Vec<_>>() {
        let curve =
            microimpact::measure::impact_curve(&out.tape, Scope::Firm(f), &Binning::default())
                .unwrap();
        let fit = fit_power_law(&curve.fit_points(), None).unwrap();
        let ticks = out.tape.firm_ticks(f).unwrap();
        let mean_volume = ticks
            .iter()
            .map(|&t| out.tape.trades()[t].volume)
            .sum::<f64>()
            / ticks.len() as f64;
        let measured = microimpact::measure::mean_impact(&out.tape, Scope::Firm(f)).unwrap();
        let predicted =
            predicted_mean_impact(fit.coefficient, fit.exponent, mean_volume, 2.95).unwrap();
        let rel = (measured - predicted).abs() / measured;
        assert!(
            rel < 0.05,
            "firm {f}: measured {measured:.3} vs predicted {predicted:.3} (rel {rel:.3})"
        );
    }
}

/// Two firms sharing the scaled law but trading at a tenfold volume ratio
/// collapse onto one rescaled distribution.
#[test]
fn volume_distributions_collapse_after_rescaling() {
    let m = manifest(
        200_000,
        29,
        vec![
            firm(1, 0.5, 0.25, 40_000.0, None),
            firm(2, 0.5, 0.25, 4_000.0, None),
        ],
    );
    let out = generate(&m).unwrap();
    let d1 = volume_distribution(&out.tape, Scope::Firm(microimpact::tape::FirmId(1)), 30).unwrap();
    let d2 = volume_distribution(&out.tape, Scope::Firm(microimpact::tape::FirmId(2)), 30).unwrap();
    assert!((d1.mean_volume / d2.mean_volume - 10.0).abs() < 0.5);
    // Two-sample KS distance between the rescaled samples.
    let mut a = d1.scaled_samples.clone();
    let mut b = d2.scaled_samples.clone();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        sup = sup.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    // Share quantization floors the smaller firm's scaled volumes a decade
    // higher, so the collapse is exact only above that scale.
    assert!(sup < 0.03, "scaled volume KS distance {sup}");
}

/// The volume-law MLE refuses samples that drive the exponent into the
/// degenerate regime at the gamma = 2 boundary, where the mean-one
/// constrained form stops being meaningful.
#[test]
fn scaling_fit_refuses_degenerate_boundary() {
    let xs = sample_scaled_volumes(50_000, 2.00005, 7).unwrap();
    let err = scaling_function_fit(&xs).unwrap_err();
    assert!(err.to_string().contains("unconstrained"), "{err}");
}

/// Flow without metaorders is separable; a volume-dependent propagation
/// exponent breaks factorization measurably.
#[test]
fn factorization_separable_vs_injected() {
    let _guard = heavy();
    let lags = [1usize, 2, 5, 10];
    let binning = Binning {
        n_bins: 8,
        min_count: 100,
    };
    let base = manifest(
        400_000,
        31,
        vec![
            firm(1, 0.6, 0.25, 8000.0, None),
            firm(2, 0.4, 0.25, 3000.0, None),
        ],
    );
    let separable = generate(&base).unwrap();
    let check_sep = factorization_check(&separable.tape, &lags, &binning, 500).unwrap();

    let mut injected = base.clone();
    injected.propagated_alpha = Some(0.65);
    injected.seed = 32;
    let non_separable = generate(&injected).unwrap();
    let check_ns = factorization_check(&non_separable.tape, &lags, &binning, 500).unwrap();

    assert!(
        check_sep.max_abs_log_ratio < 0.15,
        "separable tape log-ratio {}",
        check_sep.max_abs_log_ratio
    );
    assert!(
        check_ns.max_abs_log_ratio > check_sep.max_abs_log_ratio + 0.2,
        "injected tape {} vs separable {}",
        check_ns.max_abs_log_ratio,
        check_sep.max_abs_log_ratio
    );
}

/// Single-firm long-memory flow: the measured correlation exponent tracks
/// the empirically calibrated value for this tail index at this scale.
#[test]
fn single_firm_gamma_calibration_holds() {
    let _guard = heavy();
    let m = manifest(1_000_000, 2, vec![firm(1, 1.0, 0.25, 8000.0, Some(1.3))]);
    let out = generate(&m).unwrap();
    let c = sign_correlation(&out.tape, Scope::Market, 1200).unwrap();
    let fit = fit_power_law(&c.fit_points(), Some((10.0, 1000.0))).unwrap();
    let gamma_hat = -fit.exponent;
    // Calibrated on this generator: a single-firm tape with tail 1.3 at a
    // million trades fits to ~0.30 over this window.
    assert!(
        (gamma_hat - 0.30).abs() <= 0.05,
        "gamma_hat {gamma_hat} drifted from the calibrated 0.30"
    );
}

/// A million-trade emitted tape parses and rebuilds cleanly.
#[test]
fn emitted_tape_roundtrips_at_scale() {
    let _guard = heavy();
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(
        1_000_000,
        41,
        vec![
            firm(1, 0.5, 0.25, 8000.0, Some(1.3)),
            firm(2, 0.5, 0.3, 4000.0, Some(1.4)),
        ],
    );
    let (out, paths) = emit_tape(&m, dir.path(), false).unwrap();
    let trades = read_processed_file(&paths.tape).unwrap();
    assert_eq!(trades.len(), 1_000_000);
    let tape = build_tape(trades, "PIPE".into(), m.mean_spread).unwrap();
    assert_eq!(tape.trades(), out.tape.trades());
}

/// Ingesting the fragmented raw emission reproduces the canonical tape and
/// exhibits the aggregation bias in the raw-rows exponent.
#[test]
fn ingest_raw_emission_and_exponent_gap() {
    let _guard = heavy();
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(
        300_000,
        43,
        vec![
            firm(1, 0.4, 0.25, 9000.0, Some(1.3)),
            firm(2, 0.35, 0.25, 6000.0, Some(1.35)),
            firm(3, 0.25, 0.25, 3000.0, Some(1.3)),
        ],
    );
    let (out, paths) = emit_tape(&m, dir.path(), true).unwrap();
    let cfg = StudyConfig {
        quote_mode: QuoteMode::LogMid,
        mean_spread: Some(m.mean_spread),
        ..Default::default()
    };
    let ingest_dir = dir.path().join("ingest");
    let (tape, report) = run_ingest(
        paths.raw.as_ref().unwrap(),
        "PIPE",
        &cfg,
        &ingest_dir,
        true,
    )
    .unwrap();
    assert_eq!(report.n_row_errors, 0);
    assert_eq!(tape.len(), out.tape.len());
    for (a, b) in tape.trades().iter().zip(out.tape.trades()) {
        assert_eq!(a.trigger, b.trigger);
        assert_eq!(a.sign, b.sign);
        assert_eq!(a.volume, b.volume);
        assert!((a.quote_before - b.quote_before).abs() < 1e-12);
        assert!((a.quote_after - b.quote_after).abs() < 1e-12);
    }
    // The derived mean spread comes back from the emitted quote columns.
    assert!((report.mean_spread - m.mean_spread).abs() / m.mean_spread < 1e-9);
    // Attribution of merged moves to fragment-sized rows flattens the
    // fitted exponent.
    let alpha_processed = report.alpha_processed.as_ref().expect("processed fit").exponent;
    let alpha_raw = report.alpha_raw.as_ref().expect("raw fit").exponent;
    assert!(
        alpha_raw < alpha_processed - 0.05,
        "raw-rows exponent {alpha_raw:.3} vs processed {alpha_processed:.3}"
    );
    assert!((alpha_processed - 0.25).abs() < 0.03);
}

/// Volume-sampler distance to the analytic CDF shrinks like the usual
/// root-n rate.
#[test]
fn volume_sampler_ks_rate() {
    let gamma = 2.95;
    for (n, seed) in [(10_000usize, 3u64), (100_000, 4), (1_000_000, 5)] {
        let mut xs = sample_scaled_volumes(n, gamma, seed).unwrap();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sup: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let th = microimpact::synth::scaled_volume_cdf(x, gamma);
            sup = sup
                .max(((i + 1) as f64 / n as f64 - th).abs())
                .max((th - i as f64 / n as f64).abs());
        }
        let bound = 3.0 / (n as f64).sqrt();
        assert!(sup < bound, "KS {sup} at n={n} exceeds {bound}");
    }
}

/// On a model-consistent homogeneous tape, the pooled shuffled exponent is
/// statistically centered on the market exponent.
#[test]
fn null_band_pooled_mean_centers_on_market() {
    let _guard = heavy();
    let m = manifest(
        200_000,
        53,
        vec![
            firm(1, 0.25, 0.25, 6000.0, Some(1.3)),
            firm(2, 0.25, 0.25, 6000.0, Some(1.3)),
            firm(3, 0.25, 0.25, 6000.0, Some(1.3)),
            firm(4, 0.25, 0.25, 6000.0, Some(1.3)),
        ],
    );
    let out = generate(&m).unwrap();
    let report = null_band(
        &out.tape,
        &NullBandConfig {
            n_replicates: 20,
            binning: Binning::default(),
            fit_window: None,
            activity_floor: 10_000,
        },
        17,
    )
    .unwrap();
    let r = report.replicate_means.len() as f64;
    let mean = report.replicate_means.iter().sum::<f64>() / r;
    let var = report
        .replicate_means
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (r - 1.0);
    let se = (var / r).sqrt();
    let gap = (report.pooled_mean - report.alpha_market).abs();
    assert!(
        gap <= (2.0 * se).max(0.01),
        "pooled mean {:.4} vs market {:.4}: gap {:.4} exceeds 2 se {:.4}",
        report.pooled_mean,
        report.alpha_market,
        gap,
        2.0 * se
    );
}

/// The shuffled-band width stabilizes with replicate count.
#[test]
fn null_band_width_converges_with_replicates() {
    let _guard = heavy();
    let m = manifest(
        60_000,
        47,
        vec![
            firm(1, 0.4, 0.25, 8000.0, Some(1.3)),
            firm(2, 0.3, 0.25, 5000.0, Some(1.3)),
            firm(3, 0.3, 0.25, 3000.0, Some(1.3)),
        ],
    );
    let out = generate(&m).unwrap();
    let cfg = |n| NullBandConfig {
        n_replicates: n,
        binning: Binning {
            n_bins: 15,
            min_count: 20,
        },
        fit_window: None,
        activity_floor: 5000,
    };
    let r10 = null_band(&out.tape, &cfg(10), 5).unwrap();
    let r100 = null_band(&out.tape, &cfg(100), 5).unwrap();
    let ratio = r10.pooled_std / r100.pooled_std;
    assert!(
        (ratio - 1.0).abs() < 0.2,
        "pooled band std moved by {:.1}% between 10 and 100 replicates",
        100.0 * (ratio - 1.0).abs()
    );
}
