"""Acceptance criteria 1-12; each test records one PASS/FAIL line."""
import datetime as dt
import math
import os
import time

import numpy as np
import pytest
from scipy.special import expit

from conftest import ACCEPTANCE_LINES
from fatalnowcast import cli, delay, experiments, fitcore, simgen
from fatalnowcast.basis import BasisSpec, bspline_design
from fatalnowcast.fitcore import Family, ModelSpec, SmoothTerm
from fatalnowcast.triangle import build_triangle, ingest_directory


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


# printed (effect, exp(effect)) pairs of the two fixed-effect tables
MORTALITY_TABLE = {
    "Intercept": (-16.103, 1.02e-7),
    "Age 15-34": (-2.572, 0.076),
    "Age 60-79": (2.261, 13.645),
    "Age 80+": (4.645, 104.101),
    "Female": (-0.503, 0.605),
    "Tuesday": (0.188, 1.207),
    "Wednesday": (0.241, 1.272),
    "Thursday": (0.255, 1.291),
    "Friday": (0.107, 1.113),
    "Saturday": (-0.128, 0.879),
    "Sunday": (-0.406, 0.666),
}
DELAY_TABLE = {
    "Intercept": (-2.843, 0.058),
    "Tuesday": (0.049, 1.050),
    "Wednesday": (0.123, 1.132),
    "Thursday": (0.233, 1.262),
    "Friday": (0.238, 1.307),
    "Saturday": (0.268, 1.307),
    "Sunday": (0.220, 1.246),
}
# rows whose printed exp value cannot come from the printed effect under any rounding
MORTALITY_MISPRINTS = {"Age 60-79"}  # 13.645 = exp(2.613), digits of 2.261 transposed
DELAY_MISPRINTS = {"Friday", "Wednesday"}  # Friday repeats Saturday; exp(0.123) = 1.1309


def _printed_digits(value: float) -> float:
    """Half unit in the last printed place."""
    if abs(value) < 1e-3:
        return 0.005 * 10 ** math.floor(math.log10(abs(value)))
    return 0.0005


def audit_table(table: dict) -> tuple[set, set]:
    """(strict 3-decimal mismatches, rows inconsistent under any rounding of the effect)."""
    strict, inconsistent = set(), set()
    for name, (b, printed) in table.items():
        half = _printed_digits(printed)
        ours = float(np.exp(b))
        if abs(ours - printed) > half:
            strict.add(name)
        lo, hi = np.exp(b - 0.0005), np.exp(b + 0.0005)
        if printed + half < lo or printed - half > hi:
            inconsistent.add(name)
    return strict, inconsistent


def _transform_ok(table):
    # the relative-risk transform is exp of the log-scale effect
    return all(abs(math.exp(b) / np.exp(b) - 1) < 1e-15 for b, _ in table.values())


def test_criterion_01_mortality_table_arithmetic():
    strict, bad = audit_table(MORTALITY_TABLE)
    ok = _transform_ok(MORTALITY_TABLE) and bad == MORTALITY_MISPRINTS
    ok = ok and round(float(np.exp(-0.503)), 3) == 0.605
    record(1, ok, f"misprints {sorted(bad)} (exp(2.261) = {np.exp(2.261):.3f}); "
                  f"strict 3-decimal mismatches {sorted(strict)}")
    assert ok


def test_criterion_02_delay_table_arithmetic():
    strict, bad = audit_table(DELAY_TABLE)
    ok = _transform_ok(DELAY_TABLE) and bad == DELAY_MISPRINTS and round(float(np.exp(0.268)), 3) == 1.307
    record(2, ok, f"exp(0.268) = {np.exp(0.268):.3f}; misprints {sorted(bad)} "
                  f"(exp(0.238) = {np.exp(0.238):.3f}, exp(0.123) = {np.exp(0.123):.4f})")
    assert ok


def test_criterion_03_survival_identities():
    t = time.perf_counter()
    worst_rec, mono, last_one, models = 0.0, True, True, 0
    for seed in range(10):
        cfg = simgen.synthetic_config(10, 30, seed=seed, expected_deaths=800.0)
        truth, _ = simgen.simulate(cfg)
        dfit = delay.fit_delay(delay.assemble_delay_rows(build_triangle(truth.events(), cfg.t0, cfg.T, cfg.d_max)))
        betas = delay.draw_coefficients(dfit.fit.beta, dfit.fit.V * 25.0, 100, seed)
        k = np.arange(2, dfit.d_max + 1)
        for ti in range(0, dfit.T_index, 7):
            pi = dfit.pi(np.full(k.shape, ti), k, betas).T  # (draws, d_max - 1)
            F = delay._survival_from_pi(pi)
            last_one &= bool(np.all(F[:, -1] == 1.0))
            mono &= bool(np.all(np.diff(F, axis=1) >= 0))
            worst_rec = max(worst_rec, float(np.max(np.abs(F[:, :-1] - (1 - pi) * F[:, 1:]))))
        models += len(betas)
    secs = time.perf_counter() - t
    ok = models >= 1000 and last_one and mono and worst_rec <= 1e-12 and secs < 10
    record(3, ok, f"{models} models; F(d_max)=1 {last_one}; monotone {mono}; "
                  f"max recursion error {worst_rec:.1e}; {secs:.1f} s")
    assert ok


def test_criterion_04_pipeline_closure(tmp_path):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    exact = 0
    for i in range(20):
        cfg = simgen.synthetic_config(
            int(rng.integers(1, 15)), int(rng.integers(5, 45)), seed=int(rng.integers(2**31)),
            expected_deaths=float(rng.uniform(0, 3000)),
        )
        truth, snaps = simgen.simulate(cfg)
        simgen.write_simulation(tmp_path / str(i), truth, snaps)
        events, _, days = ingest_directory(tmp_path / str(i) / "snapshots", cfg.d_max)
        tri = build_triangle(events, days[0], days[-1], cfg.d_max)
        m = tri.observed_mask
        exact += int(np.array_equal(tri.N[m], truth.N[m]) and tri.N[~m].sum() == 0)
    secs = time.perf_counter() - t
    ok = exact == 20 and secs < 30
    record(4, ok, f"{exact}/20 configs identical cell by cell; {secs:.1f} s")
    assert ok


def _penalized_score_rel(spec, res, y, trials=None) -> float:
    Z = spec.sparse_design()
    X = spec.dense_design() if Z is None else np.hstack([spec.dense_design(), Z.toarray()])
    S = fitcore._penalty_matrix(X.shape[1], spec.penalty_blocks(), res.lambdas)
    var = spec.family.variance(res.mu, trials)
    # score of the penalized log-likelihood; canonical links give weights * dmu/deta / var = 1
    grad = X.T @ (y - res.mu) - S @ res.beta
    scale = 1.0 + np.max(np.abs(X.T @ (res.mu if trials is None else var)))
    return float(np.max(np.abs(grad)) / scale)


def test_criterion_05_glm_oracles():
    t = time.perf_counter()
    rng = np.random.default_rng(55)
    worst_closed, worst_shift, worst_score = 0.0, 0.0, 0.0
    for _ in range(50):
        n = int(rng.integers(20, 200))
        y = rng.poisson(rng.uniform(0.5, 20), n).astype(float)
        y[0] += 1
        ones = np.ones((n, 1))
        p = fitcore.fit(ModelSpec(Family.QUASI_POISSON, ones, ["intercept"]), y)
        worst_closed = max(worst_closed, abs(p.beta[0] - np.log(y.mean())))
        trials = rng.integers(1, 50, n).astype(float)
        yb = rng.binomial(trials.astype(int), rng.uniform(0.05, 0.95)).astype(float)
        yb[0], yb[1] = 0.0, trials[1]
        b = fitcore.fit(ModelSpec(Family.QUASI_BINOMIAL, ones, ["intercept"]), yb, trials=trials)
        worst_closed = max(worst_closed, abs(expit(b.beta[0]) - yb.sum() / trials.sum()))
        x = rng.uniform(0, 1, n)
        off = rng.normal(0, 0.5, n)
        c = float(rng.normal(0, 2))
        blk = bspline_design(x, BasisSpec(num_basis=8))
        mk = lambda o: ModelSpec(Family.QUASI_POISSON, ones, ["intercept"], smooths=[SmoothTerm("s", blk)], offset=o)
        ys = rng.poisson(np.exp(1 + np.sin(3 * x) + off)).astype(float)
        lam = [float(10 ** rng.uniform(-2, 4))]
        a = fitcore.fit(mk(off), ys, lambdas=lam)
        s = fitcore.fit(mk(off + c), ys, lambdas=lam)
        worst_shift = max(worst_shift, float(np.max(np.abs(a.mu - s.mu) / a.mu)), abs(a.beta[0] - c - s.beta[0]))
        worst_score = max(worst_score, _penalized_score_rel(mk(off), a, ys))
        sb = ModelSpec(Family.QUASI_BINOMIAL, ones, ["intercept"], smooths=[SmoothTerm("s", blk)])
        yb2 = rng.binomial(trials.astype(int), expit(-1 + 2 * x)).astype(float)
        bb = fitcore.fit(sb, yb2, trials=trials, lambdas=lam)
        worst_score = max(worst_score, _penalized_score_rel(sb, bb, yb2, trials))
    secs = time.perf_counter() - t
    ok = worst_closed <= 1e-8 and worst_shift <= 1e-8 and worst_score <= 1e-6 and secs < 30
    record(5, ok, f"closed form {worst_closed:.1e}; offset shift {worst_shift:.1e}; "
                  f"relative score {worst_score:.1e}; {secs:.1f} s")
    assert ok


def test_criterion_06_nowcast_calibration():
    t = time.perf_counter()
    runs = [experiments.calibration_replicate(seed, n_boot=2000) for seed in range(100)]
    s = experiments.summarize_calibration(runs)
    secs = time.perf_counter() - t
    ok = s["coverage_predictive"] >= 0.85 and s["median_rel_error"] <= 0.25 and secs < 900
    record(6, ok, f"predictive coverage {s['coverage_predictive']:.3f} over {s['cells']} cells "
                  f"(parameter-only {s['coverage_parameter']:.3f}); "
                  f"median relative error {s['median_rel_error']:.3f}; {secs:.0f} s")
    assert ok


def test_criterion_07_dispersion():
    t = time.perf_counter()
    phis = np.array([experiments.dispersion_replicate(seed) for seed in range(100)])
    inside = float(np.mean((phis >= 0.8) & (phis <= 1.2)))
    secs = time.perf_counter() - t
    ok = inside >= 0.9 and secs < 300
    record(7, ok, f"phi-hat in [0.8, 1.2] for {inside:.0%} of 100 (range {phis.min():.3f}-{phis.max():.3f}); {secs:.1f} s")
    assert ok


def test_criterion_08_hotspot():
    t = time.perf_counter()
    hits = [a == b for a, b in (experiments.hotspot_replicate(seed) for seed in range(50))]
    rate = float(np.mean(hits))
    secs = time.perf_counter() - t
    ok = rate >= 0.9 and secs < 600
    record(8, ok, f"hotspot is argmax of the recent effect in {sum(hits)}/50; {secs:.0f} s")
    assert ok


def test_criterion_09_agesplit():
    t = time.perf_counter()
    sds = [experiments.agesplit_replicate(seed) for seed in range(50)]
    wins = sum(old > young for old, young in sds)
    secs = time.perf_counter() - t
    ok = wins >= 45 and secs < 600
    med = np.median(np.array(sds), axis=0)
    record(9, ok, f"sd(80+) > sd(under 80) in {wins}/50 (median {med[0]:.3f} vs {med[1]:.3f}); {secs:.0f} s")
    assert ok


def test_criterion_10_offset_bounds():
    t = time.perf_counter()
    diffs = [experiments.offset_bound_replicate(seed) for seed in range(20)]
    runs_ok = sum(bool(np.all(d >= 0)) for d in diffs)
    secs = time.perf_counter() - t
    ok = runs_ok == 20 and secs < 300
    record(10, ok, f"worst-case trend >= baseline pointwise in {runs_ok}/20 runs "
                   f"(min gap {min(d.min() for d in diffs):.3g}); {secs:.0f} s")
    assert ok


def _run_all_commands(root):
    cfg = simgen.synthetic_config(10, 30, seed=4, expected_deaths=2000.0)
    root.mkdir()
    (root / "config.json").write_text(cfg.model_dump_json(), encoding="utf-8")
    steps = [
        ["simulate", root / "config.json", "--out", root / "sim"],
        ["ingest", root / "sim" / "snapshots", "--out", root / "tri.csv"],
        ["nowcast", root / "tri.csv", "--nboot", 500, "--seed", 3, "--out", root / "nc.csv", "--fit-out", root / "delay.json"],
        ["nowcast", root / "tri.csv", "--nboot", 500, "--seed", 3, "--process-noise", "--out", root / "pred" / "nc.csv"],
        ["fit-mortality", "--events", root / "events.csv", "--population", root / "sim" / "population.csv",
         "--geometry", root / "sim" / "geometry.csv", "--offsets", root / "offsets.csv", "--nowcast", root / "nc.csv",
         "--out", root / "mort"],
        ["fit-mortality", "--events", root / "events.csv", "--population", root / "sim" / "population.csv",
         "--geometry", root / "sim" / "geometry.csv", "--offsets", root / "offsets.csv", "--agesplit",
         "--out", root / "split"],
        ["diagnose", root / "mort" / "fit.json", "--out", root / "qq.csv"],
        ["diagnose", root / "delay.json", "--out", root / "qq_delay.csv"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    t = time.perf_counter()
    a = _run_all_commands(tmp_path / "a")
    b = _run_all_commands(tmp_path / "b")
    differ = sorted(str(k) for k in a if a[k] != b.get(k))
    secs = time.perf_counter() - t
    ok = a.keys() == b.keys() and not differ and secs < 60
    record(11, ok, f"{len(a)} output files from 5 commands byte-identical; differing {differ}; {secs:.1f} s")
    assert ok


@pytest.mark.slow
def test_criterion_12_desk_scale():
    r = experiments.desk_scale_timing()
    ok = r["fit_mortality_s"] < 300 and r["bootstrap_s"] < 120 and r["converged"]
    record(12, ok, f"{r['cells']} cells; fit_mortality {r['fit_mortality_s']:.0f} s, "
                   f"bootstrap_nowcast(10000) {r['bootstrap_s']:.1f} s on {os.cpu_count()} core(s)")
    assert ok
