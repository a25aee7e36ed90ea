"""Sequential-binomial reporting-delay model and nowcasts.

For a death registered on day t, ``pi(d; t) = P(D = d | D <= d)``. Given the
``C[t, d]`` deaths with delay at most d, ``N[t, d]`` of them have delay
exactly d, so each observed cell with ``d >= 2`` is a binomial observation
with ``C[t, d]`` trials. The fitted hazards give the reporting distribution
``F_t(d) = prod_{k>d} (1 - pi(k; t))`` and the nowcast ``C[t, T-t] / F_t(T-t)``.
"""
from __future__ import annotations

import datetime as dt
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import pandas as pd
from scipy.special import expit

from . import fitcore
from .basis import BasisSpec, DesignBlock, bspline_design
from .fitcore import Family, FitResult, ModelSpec, SmoothTerm
from .triangle import ReportingTriangle

log = logging.getLogger(__name__)

WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
NOWCAST_COLUMNS = ["t", "C_observed", "F_hat", "Y_hat", "pi_lower", "pi_upper"]
RULE_OF_THREE = 3.0


class NowcastError(ValueError):
    pass


@dataclass(frozen=True)
class DelaySpecs:
    time: BasisSpec = field(default_factory=lambda: BasisSpec(num_basis=10))
    duration: BasisSpec = field(default_factory=lambda: BasisSpec(num_basis=10))
    grid: tuple[float, ...] = fitcore.DEFAULT_GRID
    lambdas: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class DelayData:
    """Binomial rows ``(t, d, successes=N[t,d], trials=C[t,d], weekday)`` plus the triangle frame."""

    frame: pd.DataFrame
    t0: dt.date
    T: dt.date
    d_max: int

    @property
    def T_index(self) -> int:
        return (self.T - self.t0).days

    def __len__(self):
        return len(self.frame)


def _weekday_of(t0: dt.date, t: np.ndarray) -> np.ndarray:
    return (t0.weekday() + np.asarray(t, dtype=int)) % 7


def assemble_delay_rows(tri: ReportingTriangle) -> DelayData:
    """One row per observed cell with ``d >= 2`` and at least one trial."""
    N, C, obs = tri.N, tri.C, tri.observed_mask
    t_idx, d_idx = np.nonzero(obs & (C > 0))
    keep = d_idx >= 1
    t_idx, d_idx = t_idx[keep], d_idx[keep]
    frame = pd.DataFrame({
        "t": t_idx,
        "d": d_idx + 1,
        "successes": N[t_idx, d_idx],
        "trials": C[t_idx, d_idx],
        "weekday": _weekday_of(tri.t0, t_idx),
    })
    return DelayData(frame=frame, t0=tri.t0, T=tri.T, d_max=tri.d_max)


@dataclass(frozen=True, eq=False)
class DelayFit:
    fit: FitResult
    t0: dt.date
    T: dt.date
    d_max: int
    weekdays: tuple[int, ...]  # weekday levels with their own dummy; the reference has none
    reference_weekday: int
    time_block: DesignBlock | None = None
    duration_block: DesignBlock | None = None

    @property
    def T_index(self) -> int:
        return (self.T - self.t0).days

    @property
    def gamma(self) -> dict[str, float]:
        return {WEEKDAYS[w]: self.fit.coef(f"weekday[{WEEKDAYS[w]}]") for w in self.weekdays}

    def design(self, t, d) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        d = np.asarray(d, dtype=float)
        wd = _weekday_of(self.t0, t.astype(int))
        cols = [np.ones_like(t)]
        cols += [(wd == w).astype(float) for w in self.weekdays]
        parts = [np.column_stack(cols)]
        if self.time_block is not None:
            parts.append(self.time_block.evaluate(t))
        if self.duration_block is not None:
            parts.append(self.duration_block.evaluate(d))
        return np.hstack(parts)

    def eta(self, t, d, beta=None) -> np.ndarray:
        """Logit hazard at ``(t, d)``; ``beta`` may be one vector or a (draws, p) array."""
        X = self.design(t, d)
        if beta is None:
            return X @ self.fit.beta
        return X @ np.asarray(beta).T

    def pi(self, t, d, beta=None) -> np.ndarray:
        return expit(self.eta(t, d, beta))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "delay_fit",
            "t0": self.t0.isoformat(),
            "T": self.T.isoformat(),
            "d_max": self.d_max,
            "weekdays": list(self.weekdays),
            "reference_weekday": self.reference_weekday,
            "time_block": None if self.time_block is None else self.time_block.to_dict(),
            "duration_block": None if self.duration_block is None else self.duration_block.to_dict(),
            "fit": fitcore.fit_to_dict(self.fit),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DelayFit":
        if d.get("kind") != "delay_fit":
            raise ValueError("not a delay fit document")
        return cls(
            fit=fitcore.fit_from_dict(d["fit"]),
            t0=dt.date.fromisoformat(d["t0"]),
            T=dt.date.fromisoformat(d["T"]),
            d_max=int(d["d_max"]),
            weekdays=tuple(d["weekdays"]),
            reference_weekday=int(d["reference_weekday"]),
            time_block=None if d["time_block"] is None else DesignBlock.from_dict(d["time_block"]),
            duration_block=None if d["duration_block"] is None else DesignBlock.from_dict(d["duration_block"]),
        )


def delay_model_spec(data: DelayData, specs: DelaySpecs | None = None):
    """Model spec for the delay fit plus the pieces needed to rebuild its design."""
    specs = specs or DelaySpecs()
    fr = data.frame
    if len(fr) == 0:
        raise NowcastError("no delay rows to fit (need observed cells with d >= 2 and C > 0)")
    t = fr["t"].to_numpy(dtype=float)
    d = fr["d"].to_numpy(dtype=float)
    wd = fr["weekday"].to_numpy(dtype=int)
    present = sorted(set(wd.tolist()))
    ref = 0 if 0 in present else present[0]
    for w in range(7):
        if w not in present:
            log.warning("no delay rows registered on a %s; weekday level dropped", WEEKDAYS[w])
    if ref != 0:
        log.warning("Monday absent from delay rows; %s used as reference weekday", WEEKDAYS[ref])
    levels = tuple(w for w in present if w != ref)
    fixed = np.column_stack([np.ones_like(t)] + [(wd == w).astype(float) for w in levels])
    names = ["intercept"] + [f"weekday[{WEEKDAYS[w]}]" for w in levels]
    smooths = []
    time_block = duration_block = None
    last_t = data.T_index - 1
    if len(np.unique(t)) >= 2 and last_t > 0:
        ts = replace(specs.time, domain=((0.0, float(last_t)),))
        time_block = bspline_design(t, ts)
        smooths.append(SmoothTerm("s_time", time_block))
    if len(np.unique(d)) >= 2 and data.d_max > 2:
        k = max(specs.duration.degree + 1, min(specs.duration.num_basis, data.d_max - 1))
        ds = replace(specs.duration, num_basis=k, domain=((2.0, float(data.d_max)),))
        duration_block = bspline_design(d, ds)
        smooths.append(SmoothTerm("s_duration", duration_block))
    spec = ModelSpec(Family.QUASI_BINOMIAL, fixed, names, smooths=smooths)
    return spec, levels, ref, time_block, duration_block


def fit_delay(data: DelayData, specs: DelaySpecs | None = None) -> DelayFit:
    """Quasi-binomial logit fit of ``s_time(t) + s_duration(d) + weekday(t)``."""
    specs = specs or DelaySpecs()
    spec, levels, ref, tb, db = delay_model_spec(data, specs)
    fr = data.frame
    y = fr["successes"].to_numpy(dtype=float)
    n = fr["trials"].to_numpy(dtype=float)
    if specs.lambdas is not None:
        res = fitcore.fit(spec, y, trials=n, lambdas=specs.lambdas[: len(spec.smooths)])
    else:
        res = fitcore.fit(spec, y, trials=n, grid=[specs.grid] * len(spec.smooths))
    return DelayFit(
        fit=res, t0=data.t0, T=data.T, d_max=data.d_max,
        weekdays=levels, reference_weekday=ref, time_block=tb, duration_block=db,
    )


def _as_index(fit: DelayFit, t) -> int:
    if isinstance(t, dt.date):
        return (t - fit.t0).days
    return int(t)


@dataclass(frozen=True)
class DelaySurvival:
    t: dt.date
    F: np.ndarray  # F_t(d) for d = 1..d_max


def _survival_from_pi(pi_k: np.ndarray) -> np.ndarray:
    """F(d), d = 1..d_max, from hazards ``pi_k`` at k = 2..d_max (last axis)."""
    out = np.ones(pi_k.shape[:-1] + (pi_k.shape[-1] + 1,))
    for j in range(pi_k.shape[-1] - 1, -1, -1):
        out[..., j] = (1.0 - pi_k[..., j]) * out[..., j + 1]
    return out


def survival_curve(fit: DelayFit, t) -> DelaySurvival:
    ti = _as_index(fit, t)
    if not 0 <= ti <= fit.T_index - 1:
        raise NowcastError(
            f"t = {fit.t0 + dt.timedelta(days=ti)} outside the fitted registration range "
            f"[{fit.t0}, {fit.T - dt.timedelta(days=1)}]"
        )
    k = np.arange(2, fit.d_max + 1)
    pi_k = fit.pi(np.full(k.shape, ti), k)
    return DelaySurvival(t=fit.t0 + dt.timedelta(days=ti), F=_survival_from_pi(pi_k))


def _check_pair(tri: ReportingTriangle, fit: DelayFit):
    if tri.t0 != fit.t0 or tri.T != fit.T or tri.d_max != fit.d_max:
        raise NowcastError("triangle and delay fit disagree on t0, T or d_max")


def _targets(tri: ReportingTriangle):
    T = tri.T_index
    return [t for t in range(max(0, T - tri.d_max + 1), T)]


def _log_F_targets(fit: DelayFit, targets, betas) -> np.ndarray:
    """``log F_t(T-t)`` for each target t (rows) and each coefficient draw (columns)."""
    T = fit.T_index
    ts, ks, seg = [], [], []
    for i, t in enumerate(targets):
        k = np.arange(T - t + 1, fit.d_max + 1)
        ts.append(np.full(k.shape, t))
        ks.append(k)
        seg.append(np.full(k.shape, i))
    if not ts:
        return np.zeros((0, betas.shape[0]))
    t_all, k_all, seg = np.concatenate(ts), np.concatenate(ks), np.concatenate(seg)
    X = fit.design(t_all, k_all)
    eta = X @ betas.T  # (rows, draws)
    # log(1 - expit(eta)) = -log1p(exp(eta))
    l1m = -np.logaddexp(0.0, eta)
    out = np.zeros((len(targets), betas.shape[0]))
    np.add.at(out, seg, l1m)
    return out


def nowcast(tri: ReportingTriangle, fit: DelayFit) -> pd.DataFrame:
    """Point nowcasts for every registration day ``t0 .. T-1``; interval columns are NaN."""
    _check_pair(tri, fit)
    T = tri.T_index
    C_obs = tri.observed_total()[:T]
    F = np.ones(T)
    targets = _targets(tri)
    if targets:
        logF = _log_F_targets(fit, targets, fit.fit.beta[None, :])[:, 0]
        F[targets] = np.exp(logF)
    if np.any(F <= 0):
        raise NowcastError("fitted F_t(T - t) is zero; the nowcast ratio is undefined")
    Y = C_obs / F
    return pd.DataFrame({
        "t": tri.dates[:T],
        "C_observed": C_obs,
        "F_hat": F,
        "Y_hat": Y,
        "pi_lower": np.nan,
        "pi_upper": np.nan,
    }, columns=NOWCAST_COLUMNS)


def covariance_root(V: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """``L`` with ``L L' = V`` for a symmetric PSD ``V`` (zero or singular allowed)."""
    V = np.asarray(V, dtype=float)
    if not np.all(np.isfinite(V)) or not np.allclose(V, V.T, rtol=1e-8, atol=1e-14):
        raise NowcastError("coefficient covariance is not a finite symmetric matrix")
    w, Q = np.linalg.eigh(0.5 * (V + V.T))
    scale = max(float(np.max(np.abs(w), initial=0.0)), 1e-300)
    if np.min(w, initial=0.0) < -tol * scale:
        raise NowcastError("coefficient covariance is not positive semidefinite")
    return Q * np.sqrt(np.clip(w, 0.0, None))


def draw_coefficients(beta: np.ndarray, V: np.ndarray, n_boot: int, seed: int, threads: int | None = None) -> np.ndarray:
    """``n_boot`` draws from Normal(beta, V); draw i uses the substream keyed by (seed, i)."""
    L = covariance_root(V)
    p = len(beta)

    def chunk(lo_hi):
        lo, hi = lo_hi
        Z = np.empty((hi - lo, p))
        for j, i in enumerate(range(lo, hi)):
            Z[j] = np.random.default_rng([seed & 0xFFFFFFFF, i]).standard_normal(p)
        return Z

    threads = threads or int(os.environ.get("FATALNOWCAST_THREADS", "1"))
    bounds = np.linspace(0, n_boot, max(1, threads) + 1).astype(int)
    parts = list(zip(bounds[:-1], bounds[1:]))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            Z = np.vstack(list(ex.map(chunk, parts)))
    else:
        Z = np.vstack([chunk(b) for b in parts])
    return beta[None, :] + Z @ L.T


def bootstrap_nowcast(
    tri: ReportingTriangle,
    fit: DelayFit,
    n_boot: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
    threads: int | None = None,
    process_noise: bool = False,
) -> pd.DataFrame:
    """Nowcasts with parametric-bootstrap prediction intervals.

    Coefficients are drawn from their asymptotic normal distribution; each
    draw gives ``C / F_t^(i)(T-t)``, and the bounds are the empirical
    ``(1-level)/2`` and ``(1+level)/2`` quantiles. Days with nothing reported
    yet get ``Y_hat = 0`` and an upper bound from ``3 / F^(i)`` (rule of three).

    These bounds reflect estimation uncertainty in F only. With
    ``process_noise=True`` each draw instead adds the deaths still to be
    reported, ``Y^(i) = C + R^(i)`` with ``R^(i) ~ NegBin(C + 1/2, F^(i))``
    (Poisson deaths, Jeffreys prior on the rate), which yields prediction
    intervals for the eventual count.
    """
    out = nowcast(tri, fit)
    out.attrs["n_boot"] = int(n_boot)
    out.attrs["process_noise"] = bool(process_noise)
    if n_boot <= 0:
        return out
    T = tri.T_index
    out["pi_lower"] = out["Y_hat"].astype(float)
    out["pi_upper"] = out["Y_hat"].astype(float)
    targets = _targets(tri)
    if not targets:
        return out
    betas = draw_coefficients(fit.fit.beta, fit.fit.V, n_boot, seed, threads)
    F_draws = np.exp(_log_F_targets(fit, targets, betas))
    C = out["C_observed"].to_numpy(dtype=float)[targets]
    a = (1.0 - level) / 2.0
    point_F = out["F_hat"].to_numpy()[targets]
    if process_noise:
        Y_draws = C[:, None] + _pending_deaths(C, F_draws, seed)
        lo, hi = np.quantile(Y_draws, [a, 1.0 - a], axis=1)
    else:
        Y_draws = C[:, None] / F_draws
        lo, hi = np.quantile(Y_draws, [a, 1.0 - a], axis=1)
        zero = C == 0
        if zero.any():
            lo[zero] = 0.0
            hi[zero] = np.quantile(RULE_OF_THREE / F_draws[zero], 1.0 - a, axis=1)
    lower = out["pi_lower"].to_numpy()
    upper = out["pi_upper"].to_numpy()
    lower[targets] = lo
    upper[targets] = hi
    out["pi_lower"] = lower
    out["pi_upper"] = upper
    out.attrs["F_draw_quantiles"] = np.quantile(F_draws, [a, 1.0 - a], axis=1)
    out.attrs["point_F"] = point_F
    return out


def _pending_deaths(C: np.ndarray, F_draws: np.ndarray, seed: int) -> np.ndarray:
    """Negative-binomial draws of not-yet-reported deaths; column i uses substream (seed, i, 1)."""
    out = np.empty(F_draws.shape)
    shape = C + 0.5
    p = np.clip(F_draws, 1e-12, 1.0)
    for i in range(F_draws.shape[1]):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, i, 1])
        out[:, i] = rng.negative_binomial(shape, p[:, i])
    return out


def offset_log_F(fit: DelayFit, dates, T: dt.date | None = None) -> np.ndarray:
    """``log F_t(T - t)`` per registration date; 0 where ``T - t >= d_max``."""
    T = fit.T if T is None else T
    Ti = (T - fit.t0).days
    idx = np.array([_as_index(fit, d) for d in dates], dtype=int)
    out = np.zeros(len(idx))
    lag = Ti - idx
    if np.any(lag < 1):
        raise NowcastError("offset requested for a registration date on or after the analysis day")
    need = lag < fit.d_max
    if need.any():
        if np.any(idx[need] < 0) or np.any(idx[need] > fit.T_index - 1):
            raise NowcastError("offset requested outside the fitted registration range")
        uniq = sorted(set(idx[need].tolist()))
        fit_T = replace(fit, T=T) if T != fit.T else fit
        vals = _log_F_targets(fit_T, uniq, fit.fit.beta[None, :])[:, 0]
        lookup = dict(zip(uniq, vals))
        out[need] = [lookup[i] for i in idx[need]]
    return out


def offsets_frame(fit: DelayFit) -> pd.DataFrame:
    dates = [fit.t0 + dt.timedelta(days=i) for i in range(fit.T_index)]
    return pd.DataFrame({"t": dates, "log_F": offset_log_F(fit, dates)})
