"""Acceptance gate: one test per primary criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also repeated in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from drivetel.align import dtw_align
from drivetel.evt import fit_gpd, mean_excess_curve, return_level
from drivetel.mapmatch import build_lattice, hmm_match
from drivetel.pipeline import PipelineConfig, run_pipeline
from drivetel.preprocess import SmootherConfig, Trajectory, kalman_smooth
from drivetel.report import emit_report
from drivetel.stats import TINY, ks_statistics, ks_test, welch_one_sided, welch_test, GroupedSamples
from drivetel.synth import SynthConfig, generate_dataset, sample_gpd

from oracles import batch_posterior_mean, brute_dtw_cost, brute_ks, brute_viterbi
from test_mapmatch import LAT0, LON0, random_toy_network
from conftest import offset

RESULTS = []


@pytest.fixture
def verdict(request, capsys):
    """Call with (passed, detail); prints the line and fails the test when not passed."""
    def record(ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {request.node.name[5:]}: {detail}"
        RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def test_kalman_exactness(verdict):
    rng = np.random.default_rng(101)
    worst = 0.0
    # compile the kernels first; the criterion times smoothing, not the JIT
    kalman_smooth(Trajectory("w", "speed", [0.0, 1.0], [0.0, 1.0], "m/s"))
    t0 = time.perf_counter()
    for _ in range(100):
        n = int(rng.integers(5, 11))
        t = np.cumsum(rng.uniform(0.2, 2.0, n))
        cfg = SmootherConfig(V=np.diag(rng.uniform(0.1, 2, 2)), W=np.diag(rng.uniform(0.1, 2, 2)),
                             mu0=rng.normal(0, 3, 2), C0=np.diag(rng.uniform(1, 100, 2)))
        tr = Trajectory("t", "speed", t, rng.uniform(0, 20, n), "m/s")
        sm = kalman_smooth(tr, cfg)
        ref = batch_posterior_mean(t, tr.values, cfg.F, cfg.V, cfg.W, cfg.mu0, cfg.C0)
        worst = max(worst, float(np.max(np.abs(sm.means - ref))))
    dt = time.perf_counter() - t0
    verdict(worst < 1e-8 and dt < 1.0, f"max |diff| {worst:.2e} (< 1e-8), {dt:.2f} s (< 1 s)")


def test_dtw_oracle(verdict):
    rng = np.random.default_rng(102)
    bad = 0
    dtw_align([0.0, 1.0], [0.0])  # JIT warm-up
    t0 = time.perf_counter()
    for n in range(1, 7):
        for m in range(1, 7):
            for _ in range(5):
                a = np.sort(rng.integers(0, 160, n)) / 8.0
                b = np.sort(rng.integers(0, 160, m)) / 8.0
                bad += dtw_align(a, b).total_cost != brute_dtw_cost(a, b)
    dt = time.perf_counter() - t0
    verdict(bad == 0 and dt < 10, f"{bad} mismatches over 180 pairs, {dt:.2f} s (< 10 s)")


def test_viterbi_oracle(verdict):
    rng = np.random.default_rng(103)
    bad = 0
    t0 = time.perf_counter()
    for _ in range(100):
        net = random_toy_network(rng)
        n = int(rng.integers(1, 6))
        pts = [offset(LAT0, LON0, *rng.uniform(-60, 60, 2)) for _ in range(n)]
        lat, lon = [p[0] for p in pts], [p[1] for p in pts]
        lattice = build_lattice(lat, lon, net)
        bpath, bscore = brute_viterbi(lattice)
        m = hmm_match(np.arange(n, dtype=float), lat, lon, net)
        expect = [None if k is None else net.ids[int(lattice.segs[t][k])] for t, k in enumerate(bpath)]
        bad += m.segment_ids != expect or abs(m.log_score - bscore) > 1e-9
    dt = time.perf_counter() - t0
    verdict(bad == 0 and dt < 10, f"{bad} mismatches over 100 toy networks, {dt:.2f} s (< 10 s)")


def test_ks_exactness(verdict):
    rng = np.random.default_rng(104)
    bad_d, worst_p = 0, 0.0
    for _ in range(30):
        m, n = (int(k) for k in rng.integers(1, 1001, 2))
        x = np.round(rng.normal(0, 1, m), 1)
        y = np.round(rng.normal(0.1, 1.2, n), 1)
        bad_d += ks_statistics(x, y) != brute_ks(x, y)
        for direction in ("less", "greater"):
            r = ks_test(x, y, direction)
            expect = max(math.exp(-2 * r.statistic ** 2 * m * n / (m + n)), TINY)
            worst_p = max(worst_p, abs(r.p_value_one_sided - expect))
    verdict(bad_d == 0 and worst_p <= 1e-12, f"{bad_d} statistic mismatches, max p error {worst_p:.1e} (<= 1e-12)")


def test_welch_correctness(verdict):
    w = welch_test([1, 2, 3], [2, 3, 4])
    same = welch_one_sided(GroupedSamples([1.0, 2.0, 4.0], [1.0, 2.0, 4.0]), "greater")
    ok = (abs(w.t_statistic + 1.2247) < 1e-4 and abs(w.degrees_of_freedom - 4) < 1e-4
          and abs(same.p_value_one_sided - 0.5) < 1e-12)
    verdict(ok, f"t {w.t_statistic:.4f}, df {w.degrees_of_freedom:.4f}, identical-group p {same.p_value_one_sided!r}")


def test_gpd_recovery(verdict):
    t0 = time.perf_counter()
    f = fit_gpd(sample_gpd(100_000, 1.0, 0.2, seed=105), 0.0)
    e = fit_gpd(np.random.default_rng(106).exponential(1.0, 100_000), 0.0)
    dt = time.perf_counter() - t0
    ok = 0.95 <= f.sigma <= 1.05 and 0.15 <= f.xi <= 0.25 and abs(e.xi) <= 0.03 and dt < 30
    verdict(ok, f"sigma {f.sigma:.4f}, xi {f.xi:.4f}, exponential xi {e.xi:.4f}, {dt:.2f} s (< 30 s)")


def test_return_level_calibration(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(107)
    body = rng.normal(0, 1, 100_000)
    tail = rng.random(100_000) < 0.2
    x = np.where(tail, 1.0 + sample_gpd(100_000, 0.6, 0.15, seed=108), body)
    f = fit_gpd(x, float(np.quantile(x, 0.9)))
    freq = float(np.mean(x > return_level(f, 24, 1.0)))
    dt = time.perf_counter() - t0
    verdict(abs(freq * 24 - 1) <= 0.2 and dt < 30,
            f"exceedance frequency {freq:.5f} vs 1/24 = {1 / 24:.5f} (+-20%), {dt:.2f} s")


def test_mean_excess_linearity(verdict):
    x = sample_gpd(100_000, 1.0, 0.2, seed=109)
    c = mean_excess_curve(x, np.quantile(x, np.linspace(0, 0.95, 40)), min_count=1000)
    verdict(abs(c.slope() - 0.25) <= 0.05, f"slope {c.slope():.4f} vs 0.25 +- 0.05")


E2E_SEED = 2016


@pytest.fixture(scope="module")
def e2e_files(tmp_path_factory):
    cfg = SynthConfig(seed=E2E_SEED, xi_active=0.1, xi_inactive=0.2, mean_shift=-0.02)
    return generate_dataset(cfg, tmp_path_factory.mktemp("e2e"))


def test_end_to_end_direction_of_effect(verdict, e2e_files):
    t0 = time.perf_counter()
    res = run_pipeline(PipelineConfig(phone=str(e2e_files["phone"]), can=str(e2e_files["can"]),
                                      network=str(e2e_files["network"])))
    dt = time.perf_counter() - t0
    rep = res.report
    n = sum(r["obs_active"] + r["obs_inactive"] for r in rep["inventory"]["channels"])
    pos = rep["comparison"]["positive"]
    ks = pos["ks"]
    acc = rep["evt"]["acceleration"]
    checks = {
        "mean": pos["means"]["mean_active"] < pos["means"]["mean_inactive"],
        "ks": ks["direction"] == "less" and ks["p_value_one_sided"] < 0.01,
        "return level": acc["return_level_active"] < acc["return_level_inactive"],
        "time": dt < 300,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(not failed,
            f"means {pos['means']['mean_active']:.4f} < {pos['means']['mean_inactive']:.4f}, "
            f"KS D- {ks['d_minus']:.4f} p {ks['p_value_one_sided']:.2e}, "
            f"levels {acc['return_level_active']:.2f} < {acc['return_level_inactive']:.2f}, "
            f"{n} samples in {dt:.0f} s" + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_determinism(verdict, tmp_path):
    cfg = SynthConfig(seed=110, n_trips=30, trip_duration=(300.0, 600.0))
    outs = []
    for k in range(2):
        # regenerated in place, so the recorded input paths agree too
        files = generate_dataset(cfg, tmp_path / "data")
        res = run_pipeline(PipelineConfig(phone=str(files["phone"]), can=str(files["can"]),
                                          network=str(files["network"])))
        outs.append(emit_report(res, tmp_path / f"report{k}"))
    diff = [a.name for a, b in zip(*outs) if a.read_bytes() != b.read_bytes()]
    same_names = [p.name for p in outs[0]] == [p.name for p in outs[1]]
    verdict(same_names and not diff, f"{len(outs[0])} report files, differing: {diff or 'none'}")

