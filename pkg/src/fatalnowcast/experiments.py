"""Replicate runners shared by the acceptance tests and ``scripts/``.

Each function simulates one synthetic data set from a seed, runs the
relevant part of the pipeline and returns plain numbers, so loops over
replicates stay short and reproducible.
"""
from __future__ import annotations

import datetime as dt
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import delay, fitcore, mortality, simgen, triangle
from .basis import BasisSpec, bspline_design
from .fitcore import Family, ModelSpec, SmoothTerm


def _pipeline(cfg: simgen.SimConfig):
    truth, _ = simgen.simulate(cfg)
    events = truth.events()
    tri = triangle.build_triangle(events, cfg.t0, cfg.T, cfg.d_max)
    dfit = delay.fit_delay(delay.assemble_delay_rows(tri))
    return truth, events, tri, dfit


def _cells(cfg, events, offsets):
    return mortality.assemble_cells(
        events, simgen.population_frame(cfg), simgen.geometry_frame(cfg), offsets,
        (cfg.t0, cfg.T - dt.timedelta(days=1)), cfg.T,
    )


@dataclass
class CalibrationRun:
    Y_true: np.ndarray
    lag: np.ndarray  # T - t per target day
    Y_hat: np.ndarray
    param_lo: np.ndarray
    param_hi: np.ndarray
    pred_lo: np.ndarray
    pred_hi: np.ndarray


def calibration_replicate(seed: int, n_boot: int = 2000, n_districts: int = 50, n_days: int = 50,
                          expected_deaths: float = 5000.0) -> CalibrationRun:
    """National nowcast against truth, with parameter-only and predictive intervals."""
    cfg = simgen.synthetic_config(n_districts, n_days, seed=seed, expected_deaths=expected_deaths)
    truth, _, tri, dfit = _pipeline(cfg)
    par = delay.bootstrap_nowcast(tri, dfit, n_boot=n_boot, seed=seed)
    pred = delay.bootstrap_nowcast(tri, dfit, n_boot=n_boot, seed=seed, process_noise=True)
    targets = np.flatnonzero(par["F_hat"].to_numpy() < 1.0)
    Y = truth.national_Y()[targets]
    return CalibrationRun(
        Y_true=Y,
        lag=tri.T_index - targets,
        Y_hat=par["Y_hat"].to_numpy()[targets],
        param_lo=par["pi_lower"].to_numpy()[targets],
        param_hi=par["pi_upper"].to_numpy()[targets],
        pred_lo=pred["pi_lower"].to_numpy()[targets],
        pred_hi=pred["pi_upper"].to_numpy()[targets],
    )


def dispersion_replicate(seed: int, n: int = 600) -> float:
    """phi-hat from a P-spline Poisson regression on Poisson-true data."""
    rng = np.random.default_rng([seed, 7])
    x = rng.uniform(0.0, 1.0, n)
    mu = np.exp(1.0 + np.sin(2 * np.pi * x))
    y = rng.poisson(mu)
    block = bspline_design(x, BasisSpec(num_basis=10, domain=((0.0, 1.0),)))
    spec = ModelSpec(Family.QUASI_POISSON, np.ones((n, 1)), ["intercept"], smooths=[SmoothTerm("s", block)])
    return fitcore.fit(spec, y).phi


def hotspot_replicate(seed: int, n_districts: int = 50, n_days: int = 35, multiplier: float = 5.0,
                      expected_deaths: float = 5000.0) -> tuple[str, str]:
    """(injected district, argmax of the recent district effect)."""
    rng = np.random.default_rng([seed, 11])
    target = f"D{int(rng.integers(n_districts)):03d}"
    cfg = simgen.synthetic_config(
        n_districts, n_days, seed=seed, expected_deaths=expected_deaths,
        hotspots=[{"district": target, "multiplier": multiplier, "last_days": 14}],
    )
    _, events, _, dfit = _pipeline(cfg)
    mfit = mortality.fit_mortality(_cells(cfg, events, delay.offsets_frame(dfit)))
    re = mfit.random_effects()
    return target, str(re.loc[re["u1"].idxmax(), "district_id"])


def agesplit_replicate(seed: int, n_districts: int = 50, n_days: int = 35, expected_deaths: float = 5000.0,
                       sd_young: float = 0.2, sd_old: float = 0.7) -> tuple[float, float]:
    """(sd of 80+ effects, sd of under-80 effects), each pooled over the level and recent blocks."""
    cfg = simgen.synthetic_config(
        n_districts, n_days, seed=seed, expected_deaths=expected_deaths, sd0=sd_young, sd1=sd_young,
        effect_groups=[{"ages": ["A80+"], "sd0": sd_old, "sd1": sd_old}],
    )
    _, events, _, dfit = _pipeline(cfg)
    mfit = mortality.fit_mortality_agesplit(_cells(cfg, events, delay.offsets_frame(dfit)))
    re = mfit.random_effects()
    old = np.concatenate([re["u0_80plus"], re["u1_80plus"]])
    young = np.concatenate([re["u0_80minus"], re["u1_80minus"]])
    return float(np.std(old)), float(np.std(young))


def offset_bound_replicate(seed: int, n_districts: int = 30, n_days: int = 40, n_boot: int = 2000,
                           expected_deaths: float = 1500.0, last: int = 10) -> np.ndarray:
    """Worst-case minus baseline trend over the last ``last`` fitted days.

    The small death total inflates nowcast uncertainty.
    """
    cfg = simgen.synthetic_config(n_districts, n_days, seed=seed, expected_deaths=expected_deaths)
    _, events, tri, dfit = _pipeline(cfg)
    nc = delay.bootstrap_nowcast(tri, dfit, n_boot=n_boot, seed=seed)
    cells = _cells(cfg, events, delay.offsets_frame(dfit))
    base = mortality.fit_mortality(cells)
    worst_off, best_off = mortality.bound_offsets(nc)
    worst, _ = mortality.refit_offset_bounds(cells, None, worst_off, best_off, base=base)
    b = mortality.time_trend_curve(base)["rate"].to_numpy()
    w = mortality.time_trend_curve(worst)["rate"].to_numpy()
    return (w - b)[-last:]


def desk_scale_timing(seed: int = 0, n_districts: int = 412, n_days: int = 50, n_boot: int = 10_000) -> dict:
    cfg = simgen.synthetic_config(n_districts, n_days, seed=seed, expected_deaths=8000.0)
    _, events, tri, dfit = _pipeline(cfg)
    t = time.perf_counter()
    delay.bootstrap_nowcast(tri, dfit, n_boot=n_boot, seed=seed)
    boot = time.perf_counter() - t
    cells = _cells(cfg, events, delay.offsets_frame(dfit))
    t = time.perf_counter()
    mfit = mortality.fit_mortality(cells)
    fit_s = time.perf_counter() - t
    return {"cells": len(cells), "bootstrap_s": boot, "fit_mortality_s": fit_s, "converged": mfit.fit.converged}


def summarize_calibration(runs: list[CalibrationRun], min_deaths: int = 10, min_lag: int = 5) -> dict:
    Y = np.concatenate([r.Y_true for r in runs]).astype(float)
    lag = np.concatenate([r.lag for r in runs])
    keep = Y >= min_deaths

    def cover(lo, hi):
        lo = np.concatenate(lo)
        hi = np.concatenate(hi)
        return float(np.mean((lo[keep] <= Y[keep]) & (Y[keep] <= hi[keep])))

    Yh = np.concatenate([r.Y_hat for r in runs])
    sel = (lag >= min_lag) & (Y > 0)
    rel = np.abs(Yh[sel] - Y[sel]) / Y[sel]
    return {
        "cells": int(keep.sum()),
        "coverage_parameter": cover([r.param_lo for r in runs], [r.param_hi for r in runs]),
        "coverage_predictive": cover([r.pred_lo for r in runs], [r.pred_hi for r in runs]),
        "median_rel_error": float(np.median(rel)),
    }


def as_frame(rows: list[dict]) -> pd.DataFrame:
    return pd.DataFrame(rows)


def save_csv(frame: pd.DataFrame, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(p, index=False, lineterminator="\n")


def save_json(obj, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
