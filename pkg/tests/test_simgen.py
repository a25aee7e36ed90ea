import datetime as dt
import json

import numpy as np
import pytest
from pydantic import ValidationError

from fatalnowcast import simgen
from fatalnowcast.delay import assemble_delay_rows, fit_delay, survival_curve
from fatalnowcast.triangle import build_triangle, emit_snapshot, ingest_directory


def one_district(**kw):
    cfg = {
        "seed": kw.pop("seed", 0),
        "t0": "2020-04-01",
        "T": kw.pop("T", "2020-04-21"),
        "districts": [{"id": "R1", "lon": 10.0, "lat": 50.0,
                       "pop": {f"{a}:{g}": 100000 for a in ("A15-34", "A35-59", "A60-79", "A80+") for g in "MF"}}],
        "fixed": {"intercept": kw.pop("intercept", -11.0)},
    }
    cfg.update(kw)
    return simgen.SimConfig.model_validate(cfg)


def test_zero_intensity():
    cfg = simgen.synthetic_config(5, 10, seed=1, expected_deaths=0.0)
    truth, snaps = simgen.simulate(cfg)
    assert truth.N.sum() == 0
    assert all(len(s) == 0 for s in snaps)


def test_all_reported_at_delay_one():
    cfg = one_district(delay={"kind": "table", "pi": [0.0] * 29})
    truth, _ = simgen.simulate(cfg)
    assert truth.N.sum() > 0
    assert truth.N[:, 1:].sum() == 0


def test_pipeline_closure(tmp_path):
    cfg = simgen.synthetic_config(8, 25, seed=4, expected_deaths=1500.0)
    truth, snaps = simgen.simulate(cfg)
    simgen.write_simulation(tmp_path, truth, snaps)
    events, warns, days = ingest_directory(tmp_path / "snapshots", cfg.d_max)
    tri = build_triangle(events, days[0], days[-1], cfg.d_max)
    mask = tri.observed_mask
    assert np.array_equal(tri.N[mask], truth.N[mask])
    assert tri.N[~mask].sum() == 0 and not warns


def test_true_F_closed_form():
    p = 0.15
    cfg = one_district(delay={"kind": "table", "pi": [p] * 29})
    F = simgen.true_F(cfg, 3)
    assert F[-1] == 1.0
    assert np.allclose(F, (1 - p) ** (30 - np.arange(1, 31)), rtol=1e-12)


def test_true_F_matches_large_sample_fit():
    cfg = simgen.synthetic_config(40, 50, seed=8, expected_deaths=60000.0)
    truth, _ = simgen.simulate(cfg)
    tri = build_triangle(truth.events(), cfg.t0, cfg.T, cfg.d_max)
    dfit = fit_delay(assemble_delay_rows(tri))
    worst = max(np.max(np.abs(survival_curve(dfit, t).F - simgen.true_F(cfg, t))) for t in range(0, cfg.n_days, 3))
    assert worst <= 0.02


def test_seed_determinism(tmp_path):
    cfg = simgen.synthetic_config(6, 15, seed=2, expected_deaths=500.0)
    a = [emit_snapshot(s) for s in simgen.simulate(cfg)[1]]
    b = [emit_snapshot(s) for s in simgen.simulate(cfg)[1]]
    assert a == b
    other = simgen.synthetic_config(6, 15, seed=3, expected_deaths=500.0)
    assert [emit_snapshot(s) for s in simgen.simulate(other)[1]] != a


def test_conservation():
    cfg = simgen.synthetic_config(6, 20, seed=5, expected_deaths=800.0)
    truth, snaps = simgen.simulate(cfg)
    last = snaps[-1].rows["cum_deaths"].sum()
    assert last == len(truth.events())
    assert truth.N.sum() == truth.counts["count"].sum()
    assert np.array_equal(truth.N.sum(axis=1)[: cfg.n_days], truth.national_Y()[: cfg.n_days])


def test_monte_carlo_mean():
    ys = []
    for seed in range(200):
        cfg = one_district(seed=seed, T="2020-04-02", intercept=-9.0)
        truth, _ = simgen.simulate(cfg)
        y = truth.cell_Y()
        sel = (y["age_group"] == "A80+") & (y["gender"] == "F")
        ys.append(int(y.loc[sel, "Y"].sum()))
    lam = truth.lam
    lam = lam[(lam["age_group"] == "A80+") & (lam["gender"] == "F")]["lam"].item()
    assert abs(np.mean(ys) - lam) <= 3 * np.sqrt(lam / 200)


def test_adding_districts_keeps_existing_draws():
    small = simgen.synthetic_config(4, 12, seed=6, expected_deaths=600.0)
    raw = json.loads(small.model_dump_json())
    extra = dict(raw["districts"][0], id="D999")
    raw["districts"].append(extra)
    big = simgen.SimConfig.model_validate(raw)
    a = simgen.simulate(small)[0].effects
    b = simgen.simulate(big)[0].effects
    assert a.equals(b[b["district_id"] != "D999"].reset_index(drop=True))


def test_invalid_config_names_field():
    with pytest.raises(ValidationError) as err:
        one_district(delay={"kind": "table", "pi": [1.5] * 29})
    assert "delay" in str(err.value) or "pi" in str(err.value)
    with pytest.raises(ValidationError) as err:
        simgen.SimConfig.model_validate({"t0": "2020-04-01", "T": "2020-04-05", "districts": [{"id": "R", "lon": 1}]})
    assert "districts.0" in str(err.value)


def test_lognormal_delays():
    cfg = one_district(delay={"kind": "lognormal", "meanlog": 2.0, "sdlog": 0.5})
    F = simgen.true_F(cfg, 0)
    assert F[-1] == 1.0 and np.all(np.diff(F) >= 0)
    truth, _ = simgen.simulate(cfg)
    assert truth.N.sum() == truth.counts["count"].sum()


def test_truth_json_serializable(tmp_path):
    cfg = simgen.synthetic_config(3, 8, seed=1, expected_deaths=100.0)
    truth, _ = simgen.simulate(cfg)
    doc = json.loads(json.dumps(truth.to_json()))
    assert doc["T"] == cfg.T.isoformat() and len(doc["national_Y"]) == cfg.n_days
