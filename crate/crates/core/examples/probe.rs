// Scratch calibration probe for the synthetic world. Not part of the test
// suite; run with `cargo run --release -p microimpact --example probe -- <which>`.

use microimpact::fit::fit_power_law;
use microimpact::measure::{impact_curve, Binning, LagAnalyzer, Scope};
use microimpact::propagator::{fit_kernel_form, invert_kernel};
use microimpact::synth::{
    generate, ConstraintAnchor, FirmSpec, KernelParams, SyntheticManifest,
};

fn base_manifest(n: usize, seed: u64) -> SyntheticManifest {
    SyntheticManifest {
        stock_label: "PROBE".into(),
        n_trades: n,
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
        firms: vec![],
    }
}

fn firm(id: u32, weight: f64, alpha: f64, mv: f64, tail: Option<f64>) -> FirmSpec {
    FirmSpec {
        id,
        weight,
        alpha,
        c: None,
        mean_volume: mv,
        meta_tail: tail,
        impact_noise: None,
        kernel: None,
    }
}

fn gamma_probe() {
    for tail in [1.15, 1.212, 1.25, 1.3, 1.4] {
        for seed in [1u64, 2] {
            let mut m = base_manifest(1_000_000, seed);
            m.firms = vec![firm(1, 1.0, 0.25, 8000.0, Some(tail))];
            let out = generate(&m).unwrap();
            let an = LagAnalyzer::new(&out.tape, 1500).unwrap();
            let c = an.correlation(Scope::Market, false).unwrap();
            let fit = fit_power_law(&c.fit_points(), Some((10.0, 1000.0))).unwrap();
            println!(
                "tail={tail:.3} seed={seed} gamma_hat={:.4} +- {:.4}  C(1)={:.3} C(10)={:.3} C(100)={:.4} C(1000)={:.4}",
                -fit.exponent,
                fit.stderr_exponent,
                c.value(1),
                c.value(10),
                c.value(100),
                c.value(1000)
            );
        }
    }
}

fn multi_gamma_probe() {
    // Market-level gamma with several firms sharing a tail exponent.
    for n_firms in [8u32, 16] {
        for tail in [1.05, 1.1, 1.15, 1.2] {
            let mut gs = Vec::new();
            for seed in [1u64, 2, 3, 4] {
                let mut m = base_manifest(1_000_000, seed);
                m.firms = (0..n_firms)
                    .map(|i| {
                        firm(
                            i + 1,
                            1.0 / n_firms as f64,
                            0.25,
                            4000.0 + 1000.0 * i as f64,
                            Some(tail),
                        )
                    })
                    .collect();
                let out = generate(&m).unwrap();
                let an = LagAnalyzer::new(&out.tape, 1500).unwrap();
                let c = an.correlation(Scope::Market, false).unwrap();
                let fit = fit_power_law(&c.fit_points(), Some((10.0, 1000.0))).unwrap();
                gs.push(-fit.exponent);
            }
            let mean = gs.iter().sum::<f64>() / gs.len() as f64;
            let spread = gs.iter().fold(0.0f64, |m, g| m.max((g - mean).abs()));
            println!(
                "firms={n_firms} tail={tail:.3}: gamma_hat mean={mean:.4} max_dev={spread:.4} all={gs:?}"
            );
        }
    }
}

fn alpha_probe() {
    let mut m = base_manifest(1_000_000, 5);
    m.firms = vec![
        firm(1, 0.3, 0.25, 9000.0, Some(1.25)),
        firm(2, 0.3, 0.25, 6000.0, Some(1.3)),
        firm(3, 0.2, 0.25, 4000.0, Some(1.2)),
        firm(4, 0.2, 0.25, 12000.0, Some(1.25)),
    ];
    let out = generate(&m).unwrap();
    let curve = impact_curve(&out.tape, Scope::Market, &Binning::default()).unwrap();
    let fit = fit_power_law(&curve.fit_points(), None).unwrap();
    println!(
        "alpha_hat={:.4} +- {:.4} (c={:.3}, bins={}, r2={:.5})",
        fit.exponent,
        fit.stderr_exponent,
        fit.coefficient,
        fit.n_points,
        fit.r_squared
    );
    for &f in &[1u32, 2, 3, 4] {
        let c = impact_curve(
            &out.tape,
            Scope::Firm(microimpact::tape::FirmId(f)),
            &Binning::default(),
        )
        .unwrap();
        let fit = fit_power_law(&c.fit_points(), None).unwrap();
        println!("  firm {f}: alpha={:.4} c={:.3}", fit.exponent, fit.coefficient);
    }
}

fn kernel_probe(n: usize, noise: f64, seed: u64) {
    let mut m = base_manifest(n, seed);
    m.noise_scale = noise;
    m.firms = vec![
        firm(1, 0.4, 0.25, 8000.0, Some(1.25)),
        firm(2, 0.35, 0.25, 6000.0, Some(1.25)),
        firm(3, 0.25, 0.25, 4000.0, Some(1.25)),
    ];
    let out = generate(&m).unwrap();
    let l_max = 500usize;
    let horizon = 1000usize;
    let an = LagAnalyzer::new(&out.tape, horizon).unwrap();
    let r = an.response(Scope::Market).unwrap();
    let c = an.correlation(Scope::Market, false).unwrap();
    let gfit = fit_power_law(&c.fit_points(), Some((10.0, 1000.0))).unwrap();
    println!(
        "n={n} noise={noise:.1e} seed={seed}: R(0)={:.3} R(10)={:.3} R(100)={:.3} R(500)={:.3} gamma={:.4}",
        r.value(0),
        r.value(10),
        r.value(100),
        r.value(500),
        -gfit.exponent
    );
    for ridge in [0.0, 1e-4] {
        match invert_kernel(
            &r.values,
            &c.values,
            r.value(0),
            None,
            l_max,
            horizon,
            ridge,
            None,
        ) {
            Ok(kernel) => {
                let fit = fit_kernel_form(kernel.values(), (1, 400)).unwrap();
                let truth = KernelParams {
                    gamma0: 3.5,
                    l0: 21.3,
                    beta: 0.375,
                };
                let mut max_rel: f64 = 0.0;
                for l in 1..=400usize {
                    let rel = (kernel.value(l) - truth.value(l)).abs() / truth.value(l);
                    max_rel = max_rel.max(rel);
                }
                println!(
                    "  ridge={ridge:.0e}: beta_hat={:.4} +- {:.4} gamma0={:.3} l0={:.2} max_rel_err(G,1..400)={:.3}",
                    fit.beta, fit.stderr_beta, fit.gamma0, fit.l0, max_rel
                );
            }
            Err(e) => println!("  ridge={ridge:.0e}: inversion failed: {e}"),
        }
    }
}

fn gamma_final_probe() {
    // Calibration at the acceptance scale: 24 firms, 4M trades.
    for tail in [1.19, 1.21, 1.23] {
        let mut gs = Vec::new();
        for seed in [1u64, 2, 3, 4] {
            let mut m = base_manifest(4_000_000, seed);
            m.firms = (0..24u32)
                .map(|i| firm(i + 1, 1.0 / 24.0, 0.25, 4000.0 + 500.0 * i as f64, Some(tail)))
                .collect();
            let out = generate(&m).unwrap();
            let an = LagAnalyzer::new(&out.tape, 1500).unwrap();
            let c = an.correlation(Scope::Market, false).unwrap();
            let fit = fit_power_law(&c.fit_points(), Some((10.0, 1000.0))).unwrap();
            gs.push(-fit.exponent);
        }
        let mean = gs.iter().sum::<f64>() / gs.len() as f64;
        println!("final tail={tail:.3}: gamma mean={mean:.4} all={gs:?}");
    }
}

fn crit7_probe() {
    // Dry run of the near-critical kernel recovery: gamma target 0.25,
    // beta = 0.375 = (1 - 0.25)/2.
    for tail in [1.25, 1.3] {
        for seed in [1u64, 2, 3] {
            let mut m = base_manifest(2_000_000, seed);
            m.firms = (0..12u32)
                .map(|i| firm(i + 1, 1.0 / 12.0, 0.25, 4000.0 + 800.0 * i as f64, Some(tail)))
                .collect();
            let out = generate(&m).unwrap();
            let l_max = 500usize;
            let horizon = 1000usize;
            let an = LagAnalyzer::new(&out.tape, horizon).unwrap();
            let r = an.response(Scope::Market).unwrap();
            let c = an.correlation(Scope::Market, false).unwrap();
            let gfit = fit_power_law(&c.fit_points(), Some((10.0, 1000.0))).unwrap();
            let gamma_hat = -gfit.exponent;
            match invert_kernel(&r.values, &c.values, r.value(0), None, l_max, horizon, 0.0, Some((1, 400))) {
                Ok(kernel) => {
                    let fit = kernel.fit.as_ref().unwrap();
                    let beta_c = (1.0 - gamma_hat) / 2.0;
                    println!(
                        "tail={tail} seed={seed}: gamma={gamma_hat:.4} beta={:.4} |beta-0.375|={:.4} |beta-beta_c|={:.4}",
                        fit.beta,
                        (fit.beta - 0.375f64).abs(),
                        (fit.beta - beta_c).abs()
                    );
                }
                Err(e) => println!("tail={tail} seed={seed}: inversion failed: {e}"),
            }
        }
    }
}

fn null_probe() {
    use microimpact::nullmodel::{null_band, NullBandConfig};
    // Homogeneous: same alpha everywhere, one loud-noise firm widening the
    // shuffled band.
    let mut m = base_manifest(400_000, 11);
    m.impact_noise = 0.15;
    let mut firms_spec: Vec<FirmSpec> = (0..11u32)
        .map(|i| firm(i + 1, 0.7 / 11.0, 0.25, 6000.0, Some(1.3)))
        .collect();
    let mut loud = firm(12, 0.3, 0.25, 6000.0, Some(1.3));
    loud.impact_noise = Some(2.5);
    firms_spec.push(loud);
    m.firms = firms_spec;
    let out = generate(&m).unwrap();
    let cfg = NullBandConfig {
        n_replicates: 20,
        binning: Binning::default(),
        fit_window: None,
        activity_floor: 10_000,
    };
    let report = null_band(&out.tape, &cfg, 99).unwrap();
    println!(
        "homogeneous: alpha_M={:.3} exceedance={:.3}",
        report.alpha_market, report.exceedance_fraction
    );
    for b in &report.per_firm {
        println!(
            "  firm {} n={} real={:?} band={:.4}+-{:.4} outside={:?}",
            b.firm, b.trades, b.real_alpha, b.mean, b.std, b.outside
        );
    }

    // Heterogeneous: alphas spread over [-0.6, 0.6].
    let mut m2 = base_manifest(400_000, 13);
    m2.impact_noise = 0.3;
    let alphas = [-0.6, -0.45, -0.3, -0.15, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.55, 0.6];
    m2.firms = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| firm(i as u32 + 1, 1.0 / 12.0, a, 6000.0, Some(1.3)))
        .collect();
    let out2 = generate(&m2).unwrap();
    let report2 = null_band(&out2.tape, &cfg, 99).unwrap();
    println!(
        "heterogeneous: alpha_M={:.3} exceedance={:.3}",
        report2.alpha_market, report2.exceedance_fraction
    );
    for b in &report2.per_firm {
        println!(
            "  firm {} real={:?} band={:.4}+-{:.4} outside={:?}",
            b.firm, b.real_alpha, b.mean, b.std, b.outside
        );
    }
}

fn kappa_chi_probe() {
    use microimpact::propagator::{kappa_chi_study, Kernel};
    let tails = [1.1, 1.15, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7];
    // Model-consistent: shared kernel.
    let mut m = base_manifest(1_000_000, 21);
    m.firms = tails
        .iter()
        .enumerate()
        .map(|(i, &t)| firm(i as u32 + 1, 1.0 / 8.0, 0.25, 6000.0, Some(t)))
        .collect();
    let out = generate(&m).unwrap();
    let kernel = Kernel::from_form(3.5, 21.3, 0.375, 500).unwrap();
    let firms: Vec<_> = out.tape.firm_ids().collect();
    let study = kappa_chi_study(&out.tape, &firms, &kernel, 1000, 1000).unwrap();
    println!(
        "consistent: measured={:?} reconstructed={:?}",
        study.measured_trend, study.reconstructed_trend
    );
    for r in &study.rows {
        println!(
            "  firm {} chi={:8.2} k_meas={:8.2} k_rec={:8.2} r0={:6.2}",
            r.firm, r.chi, r.kappa_measured, r.kappa_reconstructed, r.r0
        );
    }

    // Heterogeneous: long-memory firms decay fast and trade small.
    let mut m2 = base_manifest(1_000_000, 22);
    m2.firms = tails
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut f = firm(i as u32 + 1, 1.0 / 8.0, 0.25, 6000.0, Some(t));
            if t < 1.35 {
                // Long-memory firms: weak, fast-decaying propagation and
                // small instantaneous impact.
                f.kernel = Some(KernelParams {
                    gamma0: 1.2,
                    l0: 5.0,
                    beta: 0.8,
                });
                f.c = Some(0.25 * 40.0 / 60_000f64.powf(0.25));
            }
            f
        })
        .collect();
    let out2 = generate(&m2).unwrap();
    let study2 = kappa_chi_study(&out2.tape, &firms, &kernel, 1000, 1000).unwrap();
    println!(
        "heterogeneous: measured={:?} reconstructed={:?}",
        study2.measured_trend, study2.reconstructed_trend
    );
    for r in &study2.rows {
        println!(
            "  firm {} chi={:8.2} k_meas={:8.2} k_rec={:8.2} r0={:6.2}",
            r.firm, r.chi, r.kappa_measured, r.kappa_reconstructed, r.r0
        );
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    match which.as_str() {
        "gamma" => gamma_probe(),
        "multigamma" => multi_gamma_probe(),
        "gammafinal" => gamma_final_probe(),
        "crit7" => crit7_probe(),
        "alpha" => alpha_probe(),
        "null" => null_probe(),
        "kappachi" => kappa_chi_probe(),
        "kernel" => {
            kernel_probe(1_000_000, 2e-5, 7);
            kernel_probe(2_000_000, 2e-5, 7);
        }
        _ => {
            gamma_probe();
            multi_gamma_probe();
            alpha_probe();
            kernel_probe(1_000_000, 2e-5, 7);
        }
    }
}
