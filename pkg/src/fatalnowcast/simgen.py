"""Synthetic epidemics drawn from the mortality and delay observation models.

Deaths per (day, district, age, gender) are Poisson with a log-linear
intensity (fixed effects, time trend, linear spatial surface, district
effects for the whole period and the last 14 days, hotspot multipliers and
log population). Each death receives a reporting delay by sequential
binomial thinning from ``d_max`` down to 2, and daily cumulative snapshots
are emitted from the resulting event log.
"""
from __future__ import annotations

import datetime as dt
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_validator, model_validator
from scipy.special import expit
from scipy.stats import norm

from .triangle import (
    AGE_GROUPS,
    GENDERS,
    KEY_COLUMNS,
    SnapshotTable,
    snapshot_filename,
    write_snapshot,
)

CONFIG_VERSION = 1
RECENT_DAYS = 14
GROUPS = [(a, g) for a in AGE_GROUPS for g in GENDERS]
REFERENCE_WEEKDAY = (0.0, 0.188, 0.241, 0.255, 0.107, -0.128, -0.406)
REFERENCE_AGE_EFFECTS = {"A15-34": -2.572, "A35-59": 0.0, "A60-79": 2.261, "A80+": 4.645}


def group_key(age: str, gender: str) -> str:
    return f"{age}:{gender}"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DistrictConfig(_Strict):
    id: str
    lon: float
    lat: float
    pop: dict[str, PositiveInt]

    @field_validator("pop")
    @classmethod
    def _complete(cls, v):
        want = {group_key(a, g) for a, g in GROUPS}
        missing = want - set(v)
        extra = set(v) - want
        if missing or extra:
            raise ValueError(f"pop keys must be {sorted(want)}; missing {sorted(missing)}, unknown {sorted(extra)}")
        return v


class FixedEffectsConfig(_Strict):
    intercept: float = -16.0
    age: dict[str, float] = Field(default_factory=lambda: dict(REFERENCE_AGE_EFFECTS))
    gender: dict[str, float] = Field(default_factory=lambda: {"M": 0.0, "F": -0.503})
    weekday: list[float] = Field(default_factory=lambda: list(REFERENCE_WEEKDAY), min_length=7, max_length=7)


class TrendConfig(_Strict):
    # piecewise-linear m1 over day offsets from t0, constant beyond the ends
    points: list[tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.0)])


class SpatialConfig(_Strict):
    lon: float = 0.0
    lat: float = 0.0


class EffectGroupConfig(_Strict):
    ages: list[str]
    sd0: float = Field(0.0, ge=0)
    sd1: float = Field(0.0, ge=0)


class RandomEffectsConfig(_Strict):
    sd0: float = Field(0.0, ge=0)
    sd1: float = Field(0.0, ge=0)
    groups: list[EffectGroupConfig] = Field(default_factory=list)


class HotspotConfig(_Strict):
    district: str
    multiplier: float = Field(gt=0)
    last_days: PositiveInt = RECENT_DAYS
    ages: list[str] | None = None


class DelayConfig(_Strict):
    kind: Literal["logit", "table", "lognormal"] = "logit"
    intercept: float = -2.8
    duration_points: list[tuple[float, float]] = Field(default_factory=list)
    weekday: list[float] = Field(default_factory=lambda: [0.0] * 7, min_length=7, max_length=7)
    time_slope: float = 0.0
    pi: list[float] | None = None
    meanlog: float = 2.3
    sdlog: float = 0.6


class SimConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    seed: int = 0
    t0: dt.date
    T: dt.date
    d_max: int = Field(30, ge=1)
    districts: list[DistrictConfig] = Field(min_length=1)
    fixed: FixedEffectsConfig = Field(default_factory=FixedEffectsConfig)
    trend: TrendConfig = Field(default_factory=TrendConfig)
    spatial: SpatialConfig = Field(default_factory=SpatialConfig)
    random_effects: RandomEffectsConfig = Field(default_factory=RandomEffectsConfig)
    hotspots: list[HotspotConfig] = Field(default_factory=list)
    delay: DelayConfig = Field(default_factory=DelayConfig)
    intensity_scale: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.T <= self.t0:
            raise ValueError("T must be after t0")
        ids = [d.id for d in self.districts]
        if len(set(ids)) != len(ids):
            raise ValueError("district ids must be unique")
        for h in self.hotspots:
            if h.district not in ids:
                raise ValueError(f"hotspot district {h.district!r} is not configured")
        d = self.delay
        if d.kind == "table":
            if d.pi is None or len(d.pi) != self.d_max - 1:
                raise ValueError(f"delay.pi needs d_max - 1 = {self.d_max - 1} values (delays 2..d_max)")
            if any(not 0.0 <= p <= 1.0 for p in d.pi):
                raise ValueError("delay.pi values must lie in [0, 1]")
        return self

    @property
    def n_days(self) -> int:
        """Number of registration days ``t0 .. T-1``."""
        return (self.T - self.t0).days


def load_config(path) -> SimConfig:
    return SimConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def true_pi(config: SimConfig, t) -> np.ndarray:
    """Conditional probabilities ``pi(d)`` for ``d = 1..d_max`` (``pi(1) = 1``) at day offset(s) ``t``.

    Returns shape ``(d_max,)`` for scalar ``t`` or ``(len(t), d_max)``.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=int))
    dmax = config.d_max
    dc = config.delay
    d = np.arange(1, dmax + 1)
    if dc.kind == "table":
        pi = np.concatenate([[1.0], dc.pi])
        out = np.tile(pi, (len(t), 1))
    elif dc.kind == "lognormal":
        edges = norm.cdf((np.log(np.arange(1, dmax + 1)) - dc.meanlog) / dc.sdlog)
        p = np.diff(np.concatenate([[0.0], edges]))
        p = p / p.sum()
        F = np.cumsum(p)
        with np.errstate(invalid="ignore", divide="ignore"):
            pi = np.where(F > 0, p / F, 0.0)
        pi[0] = 1.0
        out = np.tile(pi, (len(t), 1))
    else:
        if dc.duration_points:
            xs, ys = zip(*sorted(dc.duration_points))
            dur = np.interp(d, xs, ys)
        else:
            dur = np.zeros(dmax)
        wd = np.array([weekday(config.t0, ti) for ti in t])
        eta = (
            dc.intercept
            + dur[None, :]
            + np.asarray(dc.weekday)[wd][:, None]
            + dc.time_slope * (t / max(config.n_days, 1))[:, None]
        )
        out = expit(eta)
        out[:, 0] = 1.0
    return out[0] if scalar else out


def F_from_pi(pi: np.ndarray) -> np.ndarray:
    """``F(d) = prod_{k>d} (1 - pi(k))`` along the last axis; ``F(d_max) = 1``."""
    surv = 1.0 - pi[..., 1:]
    rev = np.cumprod(surv[..., ::-1], axis=-1)[..., ::-1]
    ones = np.ones(pi.shape[:-1] + (1,))
    return np.concatenate([rev, ones], axis=-1)


def true_F(config: SimConfig, t) -> np.ndarray:
    return F_from_pi(true_pi(config, t))


def weekday(t0: dt.date, t: int) -> int:
    return (t0 + dt.timedelta(days=int(t))).weekday()


def district_stream(seed: int, district_id: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(district_id.encode("utf-8"))])


def trend_value(config: SimConfig, t) -> np.ndarray:
    xs, ys = zip(*sorted(config.trend.points))
    return np.interp(np.asarray(t, dtype=float), xs, ys)


def spatial_reference(config: SimConfig) -> tuple[float, float]:
    return (
        float(np.mean([d.lon for d in config.districts])),
        float(np.mean([d.lat for d in config.districts])),
    )


@dataclass(frozen=True, eq=False)
class SimTruth:
    config: SimConfig
    counts: pd.DataFrame  # KEY_COLUMNS + delay + count, one row per (cell, delay) with count > 0
    effects: pd.DataFrame  # district_id, effect group, u0, u1
    N: np.ndarray  # national triangle over registration days t0..T, all delays (observed or not)
    lam: pd.DataFrame  # expected deaths per cell: KEY_COLUMNS + lam

    @property
    def d_max(self) -> int:
        return self.config.d_max

    def national_Y(self) -> np.ndarray:
        return self.N.sum(axis=1)

    def F_grid(self) -> np.ndarray:
        return true_F(self.config, np.arange(self.config.n_days))

    def observed_mask(self) -> np.ndarray:
        nt = self.N.shape[0]
        t = np.arange(nt)[:, None]
        d = np.arange(1, self.d_max + 1)[None, :]
        return t + d <= self.config.n_days

    def events(self) -> pd.DataFrame:
        """All deaths reported up to ``T``, one row per death, in event-log layout."""
        c = self.counts
        report = [r + dt.timedelta(days=int(d)) for r, d in zip(c["registration_date"], c["delay"])]
        c = c.assign(report_date=report)
        c = c[c["report_date"] <= self.config.T]
        rep = c.loc[c.index.repeat(c["count"])]
        return rep[KEY_COLUMNS + ["report_date", "delay"]].reset_index(drop=True)

    def cell_Y(self) -> pd.DataFrame:
        return self.counts.groupby(KEY_COLUMNS, sort=True)["count"].sum().rename("Y").reset_index()

    def to_json(self) -> dict:
        cfg = self.config
        Y = self.cell_Y()
        return {
            "format_version": CONFIG_VERSION,
            "t0": cfg.t0.isoformat(),
            "T": cfg.T.isoformat(),
            "d_max": cfg.d_max,
            "national_Y": [
                {"t": (cfg.t0 + dt.timedelta(days=i)).isoformat(), "Y": int(y)}
                for i, y in enumerate(self.national_Y()[: cfg.n_days])
            ],
            "triangle_N": self.N.tolist(),
            "F": self.F_grid().tolist(),
            "effects": self.effects.to_dict(orient="records"),
            "hotspots": [h.model_dump() for h in cfg.hotspots],
            "cell_Y": [
                [r.district_id, r.age_group, r.gender, r.registration_date.isoformat(), int(r.Y)]
                for r in Y.itertuples(index=False)
            ],
        }


def _effect_groups(config: SimConfig) -> list[tuple[str, set[str], float, float]]:
    re = config.random_effects
    covered: set[str] = set()
    out = []
    for i, g in enumerate(re.groups):
        ages = set(g.ages)
        out.append((f"g{i}:" + "+".join(sorted(ages)), ages, g.sd0, g.sd1))
        covered |= ages
    rest = set(AGE_GROUPS) - covered
    if rest:
        out.insert(0, ("all", rest, re.sd0, re.sd1))
    return out


def simulate(config: SimConfig):
    """Draw one epidemic; returns ``(truth, snapshots)`` with snapshots for days ``t0 .. T``."""
    cfg = config
    nd = cfg.n_days
    dmax = cfg.d_max
    t = np.arange(nd)
    days = [cfg.t0 + dt.timedelta(days=int(i)) for i in t]
    wd = np.array([d.weekday() for d in days])
    fx = cfg.fixed
    base_t = fx.intercept + np.asarray(fx.weekday)[wd] + trend_value(cfg, t)
    recent = t >= nd - RECENT_DAYS
    lon0, lat0 = spatial_reference(cfg)
    pi_t = true_pi(cfg, t)  # (nd, dmax)
    groups = _effect_groups(cfg)
    # hotspot multipliers per district: list of (mask over t, ages or None, multiplier)
    hot: dict[str, list] = {}
    for h in cfg.hotspots:
        hot.setdefault(h.district, []).append((t >= cfg.n_days - h.last_days, h.ages, h.multiplier))

    count_rows, effect_rows, lam_rows = [], [], []
    N = np.zeros((nd + 1, dmax), dtype=np.int64)
    for dist in cfg.districts:
        rng = district_stream(cfg.seed, dist.id)
        m2 = cfg.spatial.lon * (dist.lon - lon0) + cfg.spatial.lat * (dist.lat - lat0)
        u = {}
        for name, ages, sd0, sd1 in groups:
            z = rng.standard_normal(2)
            u[name] = (sd0 * z[0], sd1 * z[1])
            effect_rows.append({"district_id": dist.id, "group": name, "u0": u[name][0], "u1": u[name][1]})
        lam_cells, keys = [], []
        for age, gender in GROUPS:
            gname = next(n for n, ages, _, _ in groups if age in ages)
            u0, u1 = u[gname]
            eta = (
                base_t + fx.age.get(age, 0.0) + fx.gender.get(gender, 0.0) + m2 + u0 + recent * u1
                + np.log(dist.pop[group_key(age, gender)])
            )
            lam = cfg.intensity_scale * np.exp(eta)
            for mask, ages, mult in hot.get(dist.id, []):
                if ages is None or age in ages:
                    lam = np.where(mask, lam * mult, lam)
            lam_cells.append(lam)
            keys.append((age, gender))
        lam_cells = np.array(lam_cells)  # (groups, nd)
        Y = rng.poisson(lam_cells)
        # sequential thinning: at k = d_max..2 a death not yet placed is placed at k w.p. pi(k)
        remaining = Y.copy()
        placed = np.zeros(Y.shape + (dmax,), dtype=np.int64)
        for k in range(dmax, 1, -1):
            nk = rng.binomial(remaining, np.broadcast_to(pi_t[:, k - 1], remaining.shape))
            placed[..., k - 1] = nk
            remaining -= nk
        placed[..., 0] = remaining
        N[:nd] += placed.sum(axis=0)
        gi, ti, di = np.nonzero(placed)
        for g_i, t_i, d_i in zip(gi, ti, di):
            age, gender = keys[g_i]
            count_rows.append((dist.id, age, gender, days[t_i], d_i + 1, int(placed[g_i, t_i, d_i])))
        for g_i, (age, gender) in enumerate(keys):
            for t_i in range(nd):
                lam_rows.append((dist.id, age, gender, days[t_i], lam_cells[g_i, t_i]))

    counts = pd.DataFrame(count_rows, columns=KEY_COLUMNS + ["delay", "count"])
    truth = SimTruth(
        config=cfg,
        counts=counts,
        effects=pd.DataFrame(effect_rows, columns=["district_id", "group", "u0", "u1"]),
        N=N,
        lam=pd.DataFrame(lam_rows, columns=KEY_COLUMNS + ["lam"]),
    )
    return truth, snapshots_from_counts(counts, cfg.t0, cfg.T)


def snapshots_from_counts(counts: pd.DataFrame, t0: dt.date, T: dt.date) -> list[SnapshotTable]:
    """Cumulative snapshots for download days ``t0 .. T`` from per-delay counts."""
    c = counts.copy()
    c["report_date"] = [r + dt.timedelta(days=int(d)) for r, d in zip(c["registration_date"], c["delay"])]
    out = []
    day = t0
    while day <= T:
        seen = c[c["report_date"] <= day]
        rows = seen.groupby(KEY_COLUMNS, sort=True)["count"].sum().rename("cum_deaths").reset_index()
        rows = rows[rows["cum_deaths"] > 0].reset_index(drop=True)
        out.append(SnapshotTable(day, rows))
        day += dt.timedelta(days=1)
    return out


def population_frame(config: SimConfig) -> pd.DataFrame:
    rows = [
        (d.id, a, g, d.pop[group_key(a, g)]) for d in config.districts for a, g in GROUPS
    ]
    return pd.DataFrame(rows, columns=["district_id", "age_group", "gender", "pop"])


def geometry_frame(config: SimConfig) -> pd.DataFrame:
    return pd.DataFrame(
        [(d.id, d.lon, d.lat) for d in config.districts], columns=["district_id", "lon", "lat"]
    )


def write_simulation(out_dir, truth: SimTruth, snapshots: list[SnapshotTable]) -> list[Path]:
    """Write snapshots, ``truth.json``, population and geometry CSVs; returns the written paths."""
    out = Path(out_dir)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in snapshots:
        p = snap_dir / snapshot_filename(s.download_date)
        write_snapshot(s, p)
        written.append(p)
    p = out / "truth.json"
    p.write_text(json.dumps(truth.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written.append(p)
    p = out / "population.csv"
    p.write_text(population_frame(truth.config).to_csv(index=False, lineterminator="\n"), encoding="utf-8")
    written.append(p)
    p = out / "geometry.csv"
    p.write_text(
        geometry_frame(truth.config).to_csv(index=False, lineterminator="\n", float_format="%.17g"),
        encoding="utf-8",
    )
    written.append(p)
    return written


# age/gender population shares, roughly German adult structure
_POP_SHARES = {
    "A15-34:M": 0.120, "A15-34:F": 0.113,
    "A35-59:M": 0.183, "A35-59:F": 0.180,
    "A60-79:M": 0.106, "A60-79:F": 0.117,
    "A80+:M": 0.030, "A80+:F": 0.051,
}

REFERENCE_DELAY = {
    "kind": "logit",
    "intercept": -4.0,
    "duration_points": [(2, 3.0), (5, 2.0), (10, 1.0), (20, 0.0), (30, -0.5)],
    "weekday": [0.0, 0.05, 0.12, 0.23, 0.24, 0.27, 0.22],
}


def synthetic_config(
    n_districts: int = 50,
    n_days: int = 50,
    *,
    seed: int = 0,
    t0: dt.date = dt.date(2020, 3, 26),
    d_max: int = 30,
    expected_deaths: float = 5000.0,
    sd0: float = 0.3,
    sd1: float = 0.3,
    spatial: tuple[float, float] = (0.05, -0.1),
    trend: list[tuple[float, float]] | None = None,
    delay: dict | None = None,
    hotspots: list[dict] | None = None,
    effect_groups: list[dict] | None = None,
    mean_pop: float = 200_000.0,
) -> SimConfig:
    """A random desk-scale configuration whose expected death total is ``expected_deaths``.

    District layout and populations are drawn from ``seed``; the intercept is
    tuned so the expected national total (ignoring random effects and
    hotspots) matches ``expected_deaths``.
    """
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5EED])
    lon = rng.uniform(6.0, 15.0, n_districts)
    lat = rng.uniform(47.3, 55.0, n_districts)
    size = np.exp(rng.normal(np.log(mean_pop), 0.5, n_districts))
    districts = []
    for i in range(n_districts):
        pop = {k: max(1, int(round(size[i] * s))) for k, s in _POP_SHARES.items()}
        districts.append({"id": f"D{i:03d}", "lon": float(lon[i]), "lat": float(lat[i]), "pop": pop})
    if trend is None:
        trend = [(0.0, 0.4), (8.0, 0.6), (n_days * 0.6, -0.2), (n_days - 1.0, -0.3)]
    cfg = {
        "seed": seed,
        "t0": t0.isoformat(),
        "T": (t0 + dt.timedelta(days=n_days)).isoformat(),
        "d_max": d_max,
        "districts": districts,
        "fixed": {"intercept": 0.0},
        "trend": {"points": trend},
        "spatial": {"lon": spatial[0], "lat": spatial[1]},
        "random_effects": {"sd0": sd0, "sd1": sd1, "groups": effect_groups or []},
        "hotspots": hotspots or [],
        "delay": delay if delay is not None else REFERENCE_DELAY,
    }
    config = SimConfig.model_validate(cfg)
    total = _expected_total(config)
    if expected_deaths > 0 and total > 0:
        cfg["fixed"]["intercept"] = float(np.log(expected_deaths / total))
    else:
        cfg["intensity_scale"] = 0.0
    return SimConfig.model_validate(cfg)


def _expected_total(config: SimConfig) -> float:
    t = np.arange(config.n_days)
    wd = np.array([weekday(config.t0, i) for i in t])
    fx = config.fixed
    per_t = np.exp(fx.intercept + np.asarray(fx.weekday)[wd] + trend_value(config, t)).sum()
    lon0, lat0 = spatial_reference(config)
    total = 0.0
    for d in config.districts:
        m2 = config.spatial.lon * (d.lon - lon0) + config.spatial.lat * (d.lat - lat0)
        for a, g in GROUPS:
            total += d.pop[group_key(a, g)] * np.exp(fx.age.get(a, 0.0) + fx.gender.get(g, 0.0) + m2)
    return float(per_t * total)
