"""District-level quasi-Poisson mortality model.

Deaths per (registration day, district, age group, gender) have log mean

    intercept + age + gender + weekday + m1(t) + m2(lon, lat)
    + u0[district] + 1{t >= T - 14} (shift + u1[district]) + log(pop) + log F_t(T - t)

where m1 is a P-spline time trend, m2 a tensor-product P-spline surface over
district centroids, and u0, u1 ridge-penalized district effects. The last
offset term carries the nowcast: recent days are only partially reported.
The unpenalized ``shift`` keeps the recent district effects centred.
"""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from . import fitcore
from .basis import BasisKind, BasisSpec, DesignBlock, bspline_design, tensor_design
from .fitcore import Family, FitResult, ModelSpec, RandomBlock, SmoothTerm
from .triangle import AGE_GROUPS, GENDERS

log = logging.getLogger(__name__)

RECENT_DAYS = 14
REFERENCE_AGE = "A35-59"
REFERENCE_GENDER = "M"
OLD_AGE = "A80+"
WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
PER = 100_000.0
RECENT_NAME = "recent"
RECENT_OLD_NAME = "recent:age[A80+]"
Z95 = 1.959963984540054


class MortalityError(ValueError):
    pass


@dataclass(frozen=True)
class MortalitySpecs:
    trend: BasisSpec = field(default_factory=lambda: BasisSpec(num_basis=10))
    spatial: BasisSpec = field(default_factory=lambda: BasisSpec(kind=BasisKind.TENSOR_2D, num_basis=8))
    grid: tuple[float, ...] = fitcore.DEFAULT_GRID
    lambdas: tuple[float, ...] | None = None


def read_population(path) -> pd.DataFrame:
    pop = pd.read_csv(path, comment="#", dtype={"district_id": str})
    return validate_population(pop)


def validate_population(pop: pd.DataFrame) -> pd.DataFrame:
    need = {"district_id", "age_group", "gender", "pop"}
    if not need <= set(pop.columns):
        raise MortalityError(f"population table needs columns {sorted(need)}")
    if (pop["pop"] <= 0).any():
        bad = pop[pop["pop"] <= 0].iloc[0]
        raise MortalityError(
            f"population must be positive: {bad.district_id}/{bad.age_group}/{bad.gender} has {bad['pop']}"
        )
    if pop.duplicated(["district_id", "age_group", "gender"]).any():
        raise MortalityError("duplicate population keys")
    return pop.reset_index(drop=True)


def read_geometry(path) -> pd.DataFrame:
    geo = pd.read_csv(path, comment="#", dtype={"district_id": str})
    if not {"district_id", "lon", "lat"} <= set(geo.columns):
        raise MortalityError("geometry table needs columns district_id, lon, lat")
    if not np.all(np.isfinite(geo[["lon", "lat"]].to_numpy())):
        raise MortalityError("geometry coordinates must be finite")
    if geo["district_id"].duplicated().any():
        raise MortalityError("duplicate district ids in geometry")
    return geo.reset_index(drop=True)


def assemble_cells(
    events: pd.DataFrame,
    pop: pd.DataFrame,
    geo: pd.DataFrame,
    offsets,
    window: tuple[dt.date, dt.date],
    T: dt.date,
    groups: list[tuple[str, str]] | None = None,
) -> pd.DataFrame:
    """Full (day, district, age, gender) cross product with death counts and offsets.

    ``offsets`` maps registration dates to ``log F_t(T - t)`` (a Series indexed
    by date, a dict, or a frame with ``t`` and ``log_F`` columns) and must
    cover every day of ``window``.
    """
    start, end = window
    if end < start:
        raise MortalityError("empty window")
    if end >= T:
        raise MortalityError(f"window end {end} must precede the analysis day {T}")
    days = [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]
    off = _offset_lookup(offsets)
    missing = [d for d in days if d not in off]
    if missing:
        raise MortalityError(f"no nowcast offset for {missing[0]} ({len(missing)} days missing)")
    districts = list(geo["district_id"])
    groups = groups or [(a, g) for a in AGE_GROUPS for g in GENDERS]
    pop_map = {(r.district_id, r.age_group, r.gender): r.pop for r in pop.itertuples(index=False)}
    for r in districts:
        for a, g in groups:
            if (r, a, g) not in pop_map:
                raise MortalityError(f"missing population for district {r}, age {a}, gender {g}")

    nd, nr, ng = len(days), len(districts), len(groups)
    t_idx = np.repeat(np.arange(nd), nr * ng)
    r_idx = np.tile(np.repeat(np.arange(nr), ng), nd)
    g_idx = np.tile(np.arange(ng), nd * nr)
    y = np.zeros(nd * nr * ng, dtype=np.int64)
    if len(events):
        ev = events[(events["registration_date"] >= start) & (events["registration_date"] <= end)]
        ev = ev[ev["report_date"] <= T]
        if len(ev):
            unknown = set(ev["district_id"]) - set(districts)
            if unknown:
                raise MortalityError(f"events for district(s) without geometry: {sorted(unknown)[:5]}")
            gpos = {k: i for i, k in enumerate(groups)}
            gi = np.array([gpos.get((a, g), -1) for a, g in zip(ev["age_group"], ev["gender"])])
            if (gi < 0).any():
                raise MortalityError("events in an age/gender group that is not modeled")
            rpos = {k: i for i, k in enumerate(districts)}
            ri = ev["district_id"].map(rpos).to_numpy()
            ti = np.array([(d - start).days for d in ev["registration_date"]])
            np.add.at(y, (ti * nr + ri) * ng + gi, 1)
    lon = geo["lon"].to_numpy(dtype=float)
    lat = geo["lat"].to_numpy(dtype=float)
    ages = np.array([a for a, _ in groups])
    genders = np.array([g for _, g in groups])
    dist_arr = np.array(districts, dtype=object)
    log_pop = np.log(np.array([pop_map[(districts[r], *groups[g])] for r, g in zip(r_idx[: nr * ng], g_idx[: nr * ng])], dtype=float))
    log_pop = np.tile(log_pop, nd)
    log_F = np.repeat(np.array([off[d] for d in days], dtype=float), nr * ng)
    day_arr = np.array(days, dtype=object)
    recent_from = T - dt.timedelta(days=RECENT_DAYS)
    cells = pd.DataFrame({
        "t": day_arr[t_idx],
        "t_idx": t_idx,
        "district_id": dist_arr[r_idx],
        "age_group": ages[g_idx],
        "gender": genders[g_idx],
        "y": y,
        "log_pop": log_pop,
        "log_F": log_F,
        "offset_total": log_pop + log_F,
        "weekday": np.array([d.weekday() for d in days])[t_idx],
        "is_recent": (day_arr[t_idx] >= recent_from).astype(int),
        "lon": lon[r_idx],
        "lat": lat[r_idx],
    })
    cells.attrs.update(T=T, window=(start, end))
    return cells


def _offset_lookup(offsets) -> dict[dt.date, float]:
    if isinstance(offsets, pd.DataFrame):
        t = pd.to_datetime(offsets["t"]).dt.date
        return dict(zip(t, offsets["log_F"].astype(float)))
    if isinstance(offsets, pd.Series):
        return {pd.Timestamp(k).date(): float(v) for k, v in offsets.items()}
    return {pd.Timestamp(k).date(): float(v) for k, v in dict(offsets).items()}


def with_offsets(cells: pd.DataFrame, offsets) -> pd.DataFrame:
    """Copy of ``cells`` with ``log_F`` (and the total offset) replaced from ``offsets``."""
    off = _offset_lookup(offsets)
    missing = set(cells["t"]) - set(off)
    if missing:
        raise MortalityError(f"no offset for {min(missing)}")
    out = cells.copy()
    out["log_F"] = out["t"].map(off).astype(float)
    out["offset_total"] = out["log_pop"] + out["log_F"]
    out.attrs.update(cells.attrs)
    return out


def _fixed_design(cells: pd.DataFrame, agesplit: bool = False):
    cols, names = [np.ones(len(cells))], ["intercept"]
    for a in AGE_GROUPS:
        if a != REFERENCE_AGE:
            cols.append((cells["age_group"].to_numpy() == a).astype(float))
            names.append(f"age[{a}]")
    cols.append((cells["gender"].to_numpy() == "F").astype(float))
    names.append("gender[F]")
    wd = cells["weekday"].to_numpy()
    for w in range(1, 7):
        cols.append((wd == w).astype(float))
        names.append(f"weekday[{WEEKDAYS[w]}]")
    # Unpenalized level shift for the recent window. Without it the mean of the
    # recent district effects stands in for any common recent change the smooth
    # trend cannot follow; with it those effects are centred by construction.
    recent = cells["is_recent"].to_numpy(dtype=float)
    cols.append(recent)
    names.append(RECENT_NAME)
    if agesplit:
        cols.append(recent * (cells["age_group"].to_numpy() == OLD_AGE))
        names.append(RECENT_OLD_NAME)
    X = np.column_stack(cols)
    keep = [0] + [j for j in range(1, X.shape[1]) if X[:, j].any() and not X[:, j].all()]
    dropped = [names[j] for j in range(X.shape[1]) if j not in keep]
    if dropped:
        log.warning("fixed-effect levels absent from the cells, dropped: %s", dropped)
    return X[:, keep], [names[j] for j in keep]


def _random_blocks(cells: pd.DataFrame, districts: list[str], agesplit: bool) -> list[RandomBlock]:
    pos = {d: i for i, d in enumerate(districts)}
    codes = cells["district_id"].map(pos).to_numpy()
    recent = cells["is_recent"].to_numpy(dtype=float)
    if not agesplit:
        return [
            RandomBlock("u0", codes, districts),
            RandomBlock("u1", codes, districts, values=recent),
        ]
    old = cells["age_group"].to_numpy() == OLD_AGE
    young_codes = np.where(old, -1, codes)
    old_codes = np.where(old, codes, -1)
    return [
        RandomBlock("u0_80minus", young_codes, districts),
        RandomBlock("u1_80minus", young_codes, districts, values=recent),
        RandomBlock("u0_80plus", old_codes, districts),
        RandomBlock("u1_80plus", old_codes, districts, values=recent),
    ]


def mortality_model_spec(cells: pd.DataFrame, specs: MortalitySpecs | None = None, agesplit: bool = False):
    specs = specs or MortalitySpecs()
    if len(cells) == 0:
        raise MortalityError("no cells to fit")
    districts = list(dict.fromkeys(cells["district_id"]))
    if len(districts) < 2:
        raise MortalityError("the mortality model needs at least two districts")
    X, names = _fixed_design(cells, agesplit)
    smooths = []
    t = cells["t_idx"].to_numpy(dtype=float)
    n_days = int(t.max()) + 1
    trend = None
    if n_days >= 3:
        trend = bspline_design(t, replace(specs.trend, domain=((0.0, float(n_days - 1)),)))
        smooths.append(SmoothTerm("m1", trend))
    coords = cells[["lon", "lat"]].to_numpy(dtype=float)
    spatial = tensor_design(coords, specs.spatial)
    smooths.append(SmoothTerm("m2", spatial))
    random = _random_blocks(cells, districts, agesplit)
    spec = ModelSpec(
        Family.QUASI_POISSON, X, names, smooths=smooths, random=random,
        offset=cells["offset_total"].to_numpy(dtype=float),
    )
    return spec, districts, trend, spatial


@dataclass(frozen=True, eq=False)
class MortalityFit:
    fit: FitResult
    districts: list[str]
    trend_block: DesignBlock | None
    spatial_block: DesignBlock
    start: dt.date
    T: dt.date
    n_days: int
    agesplit: bool
    centroids: np.ndarray  # (districts, 2)
    district_pop: np.ndarray
    cells: pd.DataFrame | None = field(default=None, repr=False)

    @property
    def fixed_effects(self) -> dict[str, float]:
        f = self.fit
        n_fixed = f.block_slices[0][0] if f.block_slices else len(f.beta)
        return {name: float(b) for name, b in zip(f.coef_names[:n_fixed], f.beta[:n_fixed])}

    @property
    def random_block_names(self) -> list[str]:
        if self.agesplit:
            return ["u0_80minus", "u1_80minus", "u0_80plus", "u1_80plus"]
        return ["u0", "u1"]

    def random_effects(self) -> pd.DataFrame:
        data = {"district_id": self.districts}
        for name in self.random_block_names:
            data[name] = self.fit.block(name)
        return pd.DataFrame(data)

    @property
    def Sigma_u(self) -> np.ndarray:
        """Diagonal prior covariance ``phi / lambda`` per random block; covariances are not estimated."""
        lam = np.array([self.fit.block_lambda(b) for b in self.random_block_names])
        return np.diag(self.fit.phi / lam)

    @property
    def phi(self) -> float:
        return self.fit.phi

    def trend_values(self, t_idx) -> np.ndarray:
        if self.trend_block is None:
            return np.zeros(len(np.atleast_1d(t_idx)))
        return self.trend_block.evaluate(np.asarray(t_idx, dtype=float)) @ self.fit.block("m1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "mortality_fit",
            "agesplit": self.agesplit,
            "start": self.start.isoformat(),
            "T": self.T.isoformat(),
            "n_days": self.n_days,
            "districts": list(self.districts),
            "centroids": self.centroids.tolist(),
            "district_pop": self.district_pop.tolist(),
            "fixed_effects": self.fixed_effects,
            "Sigma_u": self.Sigma_u.tolist(),
            "Sigma_u_offdiagonal": "not estimated (diagonal ridge approximation)",
            "trend_block": None if self.trend_block is None else self.trend_block.to_dict(),
            "spatial_block": self.spatial_block.to_dict(),
            "fit": fitcore.fit_to_dict(self.fit),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MortalityFit":
        if d.get("kind") != "mortality_fit":
            raise ValueError("not a mortality fit document")
        return cls(
            fit=fitcore.fit_from_dict(d["fit"]),
            districts=list(d["districts"]),
            trend_block=None if d["trend_block"] is None else DesignBlock.from_dict(d["trend_block"]),
            spatial_block=DesignBlock.from_dict(d["spatial_block"]),
            start=dt.date.fromisoformat(d["start"]),
            T=dt.date.fromisoformat(d["T"]),
            n_days=int(d["n_days"]),
            agesplit=bool(d["agesplit"]),
            centroids=np.asarray(d["centroids"], dtype=float),
            district_pop=np.asarray(d["district_pop"], dtype=float),
        )


def _fit(cells, specs, agesplit, lambdas=None, phi=None) -> MortalityFit:
    specs = specs or MortalitySpecs()
    spec, districts, trend, spatial = mortality_model_spec(cells, specs, agesplit)
    lam = lambdas if lambdas is not None else specs.lambdas
    y = cells["y"].to_numpy(dtype=float)
    if lam is not None:
        res = fitcore.fit(spec, y, lambdas=lam, phi=phi)
    else:
        res = fitcore.fit(spec, y, grid=[specs.grid] * len(spec.block_names), phi=phi)
    first = cells.drop_duplicates("district_id").set_index("district_id").loc[districts]
    dpop = cells[cells["t_idx"] == cells["t_idx"].min()].groupby("district_id")["log_pop"].apply(
        lambda s: float(np.exp(s).sum())
    ).loc[districts].to_numpy()
    T = cells.attrs.get("T")
    start = min(cells["t"])
    if T is None:
        T = max(cells["t"]) + dt.timedelta(days=1)
    out = cells.copy()
    out["eta"] = res.eta
    out["mu"] = res.mu
    out["expected"] = np.exp(res.eta + out["log_pop"].to_numpy())
    out.attrs.update(cells.attrs)
    return MortalityFit(
        fit=res,
        districts=districts,
        trend_block=trend,
        spatial_block=spatial,
        start=start,
        T=T,
        n_days=int(cells["t_idx"].max()) + 1,
        agesplit=agesplit,
        centroids=first[["lon", "lat"]].to_numpy(dtype=float),
        district_pop=dpop,
        cells=out,
    )


def fit_mortality(cells: pd.DataFrame, specs: MortalitySpecs | None = None, *, lambdas=None, phi=None) -> MortalityFit:
    """Fit the mortality model; block order for ``lambdas`` is ``m1, m2, u0, u1``."""
    return _fit(cells, specs, agesplit=False, lambdas=lambdas, phi=phi)


def fit_mortality_agesplit(cells: pd.DataFrame, specs: MortalitySpecs | None = None, *, lambdas=None, phi=None) -> MortalityFit:
    """Variant with separate district effects for ages under 80 and 80+.

    Block order for ``lambdas`` is ``m1, m2, u0_80minus, u1_80minus, u0_80plus, u1_80plus``.
    """
    ages = set(cells["age_group"])
    if OLD_AGE not in ages:
        raise MortalityError(f"age-split model needs {OLD_AGE} cells; none present")
    if not ages - {OLD_AGE}:
        raise MortalityError("age-split model needs cells under 80; none present")
    return _fit(cells, specs, agesplit=True, lambdas=lambdas, phi=phi)


def predictor_components(fit: MortalityFit) -> pd.DataFrame:
    """Per-cell pieces of the linear predictor; they add up to ``eta + offset``."""
    cells = fit.cells
    f = fit.fit
    spec, _, _, _ = mortality_model_spec(cells, MortalitySpecs(
        trend=fit.trend_block.spec if fit.trend_block is not None else MortalitySpecs().trend,
        spatial=fit.spatial_block.spec,
    ), fit.agesplit)
    n_fixed = spec.fixed.shape[1]
    fixed = spec.fixed @ f.beta[:n_fixed]
    out = {"fixed": fixed}
    for s in spec.smooths:
        out[s.name] = s.block.X @ f.block(s.name)
    u = np.zeros(len(cells))
    for r in spec.random:
        u += r.matrix() @ f.block(r.name)
    out["u"] = u
    out["offset"] = cells["offset_total"].to_numpy()
    frame = pd.DataFrame(out)
    frame["eta_total"] = f.eta + f.offset
    return frame


def expected_deaths_map(fit: MortalityFit, window: tuple[dt.date, dt.date] | None = None) -> pd.DataFrame:
    """Expected (nowcast-corrected) deaths and rate per 100 000 per district over ``window``."""
    cells = fit.cells
    if cells is None:
        raise MortalityError("fit carries no cells; refit to build maps")
    last = fit.start + dt.timedelta(days=fit.n_days - 1)
    a, b = window if window is not None else (last - dt.timedelta(days=6), last)
    if a < fit.start or b > last or b < a:
        raise MortalityError(f"window [{a}, {b}] outside the fitted range [{fit.start}, {last}]")
    sel = cells[(cells["t"] >= a) & (cells["t"] <= b)]
    exp_d = sel.groupby("district_id")["expected"].sum().reindex(fit.districts).fillna(0.0).to_numpy()
    out = pd.DataFrame({
        "district_id": fit.districts,
        "expected_deaths": exp_d,
        "rate_per_100k": PER * exp_d / fit.district_pop,
    })
    re = fit.random_effects()
    if fit.agesplit:
        out["u0"] = re["u0_80minus"].to_numpy()
        out["u1"] = re["u1_80minus"].to_numpy()
        out["u0_80plus"] = re["u0_80plus"].to_numpy()
        out["u1_80plus"] = re["u1_80plus"].to_numpy()
    else:
        out["u0"] = re["u0"].to_numpy()
        out["u1"] = re["u1"].to_numpy()
    out.attrs["window"] = (a, b)
    return out


def time_trend_curve(fit: MortalityFit, reference_group: tuple[str, str] = (REFERENCE_AGE, REFERENCE_GENDER)) -> pd.DataFrame:
    """Death rate per 100 000 in an average district for one age/gender group.

    Weekday effects are averaged with weight 1/7 (Monday contributes 0);
    district effects and the spatial surface are set to zero, while the common
    shift of the last 14 days is included. Bands are
    ``+-1.96`` standard errors of the linear predictor, mapped through exp.
    """
    f = fit.fit
    age, gender = reference_group
    names = f.coef_names
    a = np.zeros(len(f.beta))
    a[names.index("intercept")] = 1.0
    if age != REFERENCE_AGE:
        a[names.index(f"age[{age}]")] = 1.0
    if gender != REFERENCE_GENDER:
        a[names.index(f"gender[{gender}]")] = 1.0
    for w in WEEKDAYS[1:]:
        key = f"weekday[{w}]"
        if key in names:
            a[names.index(key)] = 1.0 / 7.0
    t_idx = np.arange(fit.n_days)
    G = np.tile(a, (fit.n_days, 1))
    dates = [fit.start + dt.timedelta(days=int(i)) for i in t_idx]
    recent = np.array([d >= fit.T - dt.timedelta(days=RECENT_DAYS) for d in dates])
    if RECENT_NAME in names:
        G[recent, names.index(RECENT_NAME)] = 1.0
    if age == OLD_AGE and RECENT_OLD_NAME in names:
        G[recent, names.index(RECENT_OLD_NAME)] = 1.0
    if fit.trend_block is not None:
        lo, hi = f.block_slices[f.block_names.index("m1")]
        G[:, lo:hi] = fit.trend_block.evaluate(t_idx.astype(float))
    eta = G @ f.beta
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", G, f.V, G), 0.0, None))
    return pd.DataFrame({
        "t": dates,
        "rate": PER * np.exp(eta),
        "lower": PER * np.exp(eta - Z95 * se),
        "upper": PER * np.exp(eta + Z95 * se),
    })


def bound_offsets(nowcast_frame: pd.DataFrame) -> tuple[pd.Series, pd.Series]:
    """``log(C / Y_bound)`` per date from nowcast intervals: (worst case, best case).

    The worst case uses the upper bound (smaller F, more deaths still to come).
    Days with nothing reported yet use the rule-of-three equivalent ``3 / upper``
    for the worst case and the point offset for the best case.
    """
    nc = nowcast_frame
    t = pd.to_datetime(nc["t"]).dt.date
    C = nc["C_observed"].to_numpy(dtype=float)
    point = np.log(nc["F_hat"].to_numpy(dtype=float))
    up = nc["pi_upper"].to_numpy(dtype=float)
    lo = nc["pi_lower"].to_numpy(dtype=float)
    if np.isnan(up).any() or np.isnan(lo).any():
        raise MortalityError("nowcast has no intervals; run the bootstrap first")
    with np.errstate(divide="ignore", invalid="ignore"):
        worst = np.where(C > 0, np.log(C / up), np.log(3.0 / up))
        best = np.where((C > 0) & (lo > 0), np.log(C / lo), point)
    worst = np.where(np.isfinite(worst), worst, point)
    worst = np.minimum(worst, 0.0)
    best = np.minimum(best, 0.0)
    return pd.Series(worst, index=t), pd.Series(best, index=t)


def refit_offset_bounds(
    cells: pd.DataFrame,
    specs: MortalitySpecs | None,
    offsets_lower,
    offsets_upper,
    base: MortalityFit | None = None,
    agesplit: bool = False,
):
    """Refit under two alternative nowcast offsets; returns ``(fit_lower, fit_upper)``.

    With ``base`` given, its smoothing parameters are reused so that the
    refits differ from the baseline only through the offsets.
    """
    lam = None if base is None else base.fit.lambdas
    fitter = fit_mortality_agesplit if agesplit else fit_mortality
    lower = fitter(with_offsets(cells, offsets_lower), specs, lambdas=lam)
    upper = fitter(with_offsets(cells, offsets_upper), specs, lambdas=lam)
    return lower, upper


def write_json(obj: dict, path) -> None:
    import json

    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")
