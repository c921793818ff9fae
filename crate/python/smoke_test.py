#!/usr/bin/env python3
"""Smoke test for the _microimpact extension module.

Builds the cdylib with cargo (unless SKIP_BUILD=1), copies it next to this
script as _microimpact.so, and drives the bound API end to end on a small
synthetic tape: simulate -> estimate -> fit -> invert -> study.
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)

MANIFEST = """
stock_label = "SMOKE"
n_trades = 60000
seed = 4242
mean_spread = 0.001
volume_gamma = 2.95
noise_scale = 0.00001
impact_noise = 0.4
kernel_truncation = 128

[kernel]
gamma0 = 3.5
l0 = 21.3
beta = 0.375

[constraint]
v0 = 60000.0
delta0 = 40.0

[[firms]]
id = 1
weight = 0.5
alpha = 0.25
mean_volume = 8000.0
meta_tail = 1.3

[[firms]]
id = 2
weight = 0.3
alpha = 0.4
mean_volume = 4000.0
meta_tail = 1.4

[[firms]]
id = 3
weight = 0.2
alpha = 0.1
mean_volume = 2000.0
meta_tail = 1.25
"""


def build_module():
    if os.environ.get("SKIP_BUILD") != "1":
        subprocess.run(
            ["cargo", "build", "--release", "-p", "microimpact-py"],
            cwd=ROOT,
            check=True,
        )
    src = os.path.join(ROOT, "target", "release", "lib_microimpact.so")
    dst = os.path.join(HERE, "_microimpact.so")
    shutil.copyfile(src, dst)


def close(a, b, tol, what):
    assert abs(a - b) <= tol, f"{what}: {a} vs {b} (tol {tol})"


def main():
    build_module()
    sys.path.insert(0, HERE)
    import _microimpact as mi

    tape = mi.simulate(MANIFEST)
    print(f"simulated: {tape!r}")
    assert len(tape) == 60000
    assert tape.firm_ids() == [1, 2, 3]
    close(sum(tape.participation(f) for f in tape.firm_ids()), 1.0, 1e-12, "pi sum")

    # Market impact curve fits back to the weighted blend of firm exponents.
    curve = mi.impact_curve(tape, n_bins=25, min_count=50)
    fit = mi.fit_power_law(
        curve["volume"], curve["delta"], [float(c) for c in curve["count"]]
    )
    print(f"alpha_M = {fit['exponent']:.4f} +- {fit['stderr_exponent']:.4f}")
    assert 0.1 < fit["exponent"] < 0.45

    # Per-firm exponent recovery on the biggest firm.
    c1 = mi.impact_curve(tape, firm=1, n_bins=20, min_count=30)
    f1 = mi.fit_power_law(c1["volume"], c1["delta"], [float(c) for c in c1["count"]])
    close(f1["exponent"], 0.25, 0.05, "firm 1 alpha")

    # Sign correlation: exact lag-0, decaying memory.
    corr = mi.sign_correlation(tape, 400)
    assert corr["value"][0] == 1.0
    assert corr["value"][10] > 0.02
    resp = mi.response(tape, 400)
    assert resp["value"][0] > 0

    # Gamma-factor identities and the critical exponent.
    close(mi.gamma_factor(0.0, 2.95), 1.0, 1e-12, "F(0, gamma)")
    close(mi.gamma_factor(1.0, 2.95), 1.0, 1e-12, "F(1, gamma)")
    close(mi.critical_beta(0.212), 0.394, 1e-12, "beta_c")
    pred = mi.predicted_mean_impact(2.556, 0.25, 8000.0, 2.95)
    assert pred > 0

    # Volume-law MLE on the scaled volumes.
    vols = tape.volumes()
    mean_v = sum(vols) / len(vols)
    # Pool per-firm rescaled volumes would be better; market-level is fine
    # for a smoke check.
    law = mi.scaling_function_fit([v / mean_v for v in vols])
    print(f"gamma_volume = {law['gamma']:.3f}")
    assert 2.3 < law["gamma"] < 3.8

    # Propagator round trip through the bindings.
    kernel = [3.5 / (21.3**2 + l * l) ** (0.375 / 2.0) for l in range(1, 81)]
    c_series = [1.0] + [0.4 * l**-0.25 for l in range(1, 321)]
    r = mi.reconstruct_response(kernel, c_series, 2.0, 80, 320)
    inv = mi.invert_kernel(r, c_series, 2.0, 80, 320, fit_window=(1, 80))
    worst = max(abs(a - b) / abs(b) for a, b in zip(inv["values"], kernel))
    print(f"kernel roundtrip max rel err = {worst:.2e}")
    assert worst < 1e-8
    close(inv["fit"]["beta"], 0.375, 0.01, "beta roundtrip")

    # Shuffle preserves counts exactly and is deterministic.
    sh1 = tape.shuffle(7)
    sh2 = tape.shuffle(7)
    for f in tape.firm_ids():
        close(sh1.participation(f), tape.participation(f), 0.0, "pi preserved")
    assert sh1.signs() == sh2.signs()

    # Full study into a temp directory.
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "study")
        cfg = """
activity_floor = 5000
max_lag = 300
correlation_window = [5.0, 200.0]

[inversion]
l_max = 128
horizon = 300
fit_window = [1, 128]
"""
        summary = json.loads(mi.run_study(tape, out, cfg))
        assert os.path.exists(os.path.join(out, "summary.json"))
        assert os.path.exists(os.path.join(out, "kernel.csv"))
        assert summary["n_trades"] == 60000
        assert len(summary["active_firms"]) == 3
        beta = summary["kernel_fit"]["beta"]
        print(f"study beta = {beta:.4f}")
        assert abs(beta - 0.375) < 0.1
        assert not math.isnan(summary["mean_impact"])

    print("smoke test passed")


if __name__ == "__main__":
    main()
