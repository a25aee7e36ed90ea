"""Command-line front end: simulate, ingest, nowcast, fit-mortality, diagnose.

Exit codes: 0 success, 1 runtime failure, 2 bad input. Every CSV written
here starts with a ``# manifest: <sha256>`` line pointing at the run
manifest stored next to it; readers skip it as a comment.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy import stats

from . import __version__, delay, fitcore, mortality, simgen, triangle

FLOAT_FORMAT = "%.17g"
EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(ValueError):
    """Input files or flags break the declared contract."""


# --- manifests -------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _created() -> str | None:
    # wall-clock time would break byte-identical reruns; honour SOURCE_DATE_EPOCH only
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    return dt.datetime.fromtimestamp(int(epoch), tz=dt.timezone.utc).isoformat()


def build_manifest(command: str, inputs: dict[str, Path], flags: dict, seed=None, extra=None) -> dict:
    files = {}
    for name, p in sorted(inputs.items()):
        p = Path(p)
        if p.is_dir():
            files[name] = {
                "path": p.name,
                "files": {q.name: sha256_file(q) for q in sorted(p.iterdir()) if q.is_file()},
            }
        elif p.exists():
            files[name] = {"path": p.name, "sha256": sha256_file(p)}
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(flags.items())}
    m = {
        "command": command,
        "tool_version": __version__,
        "format_version": fitcore.FORMAT_VERSION,
        "inputs": files,
        "config_sha256": hashlib.sha256(json.dumps(flags, sort_keys=True).encode()).hexdigest(),
        "flags": flags,
        "seed": seed,
        "timestamps": {"created": _created()},
    }
    if extra:
        m.update(extra)
    return m


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def _target(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(manifest: dict, path) -> str:
    h = manifest_hash(manifest)
    _target(path).write_text(json.dumps({**manifest, "sha256": h}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return h


def write_csv(frame: pd.DataFrame, path, mhash: str) -> None:
    body = frame.to_csv(index=False, lineterminator="\n", float_format=FLOAT_FORMAT, na_rep="")
    _target(path).write_text(f"# manifest: {mhash}\n" + body, encoding="utf-8")


def write_text(text: str, path, mhash: str) -> None:
    _target(path).write_text(f"# manifest: {mhash}\n" + text, encoding="utf-8")


def _json_dump(obj, path) -> None:
    _target(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def _iso(frame: pd.DataFrame, cols=("t",)) -> pd.DataFrame:
    out = frame.copy()
    for c in cols:
        out[c] = [x.isoformat() if hasattr(x, "isoformat") else x for x in out[c]]
    return out


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"input not found: {p}")
    return p


# --- commands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg_path = _require(args.config)
    raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    if args.seed is not None:
        raw["seed"] = args.seed
    config = simgen.SimConfig.model_validate(raw)
    truth, snaps = simgen.simulate(config)
    out = Path(args.out)
    written = simgen.write_simulation(out, truth, snaps)
    m = build_manifest(
        "simulate", {"config": cfg_path}, {"seed": args.seed}, seed=config.seed,
        extra={"outputs": {str(p.relative_to(out)): sha256_file(p) for p in written}},
    )
    write_manifest(m, out / "manifest.json")
    print(f"simulated {int(truth.national_Y().sum())} deaths; {len(snaps)} snapshots in {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    snap_dir = _require(args.snapshots)
    out = Path(args.out)
    events_path = Path(args.events) if args.events else out.with_name("events.csv")
    warn_path = Path(args.warnings) if args.warnings else out.with_name("warnings.log")
    events, warns, days = triangle.ingest_directory(snap_dir, args.dmax)
    if not days:
        raise InputError(f"no snapshot files in {snap_dir}")
    tri = triangle.build_triangle(events, days[0], days[-1], args.dmax)
    m = build_manifest("ingest", {"snapshots": snap_dir}, {"dmax": args.dmax})
    h = write_manifest(m, out.with_name(out.name + ".manifest.json"))
    write_csv(tri.to_frame(), out, h)
    write_text(triangle.events_to_csv(events), events_path, h)
    lines = [json.dumps(w, sort_keys=True, default=str) for w in warns]
    write_text("".join(line + "\n" for line in lines), warn_path, h)
    print(f"{len(events)} death events over {len(days) - 1} snapshot diffs; {len(warns)} warnings")
    return EXIT_OK


def _read_triangle(path, d_max: int | None) -> triangle.ReportingTriangle:
    frame = pd.read_csv(_require(path), comment="#")
    tri = triangle.triangle_from_frame(frame)
    if d_max is None or d_max == tri.d_max:
        return tri
    if d_max > tri.d_max:
        raise InputError(f"--dmax {d_max} exceeds the triangle's maximum delay {tri.d_max}")
    N = tri.N[:, :d_max].copy()
    N[:, d_max - 1] += tri.N[:, d_max:].sum(axis=1)
    return triangle.ReportingTriangle(tri.t0, tri.T, d_max, N)


def coverage_report(nc: pd.DataFrame, truth: dict, min_deaths: int = 0) -> tuple[float, int]:
    Y = {dt.date.fromisoformat(r["t"]): r["Y"] for r in truth["national_Y"]}
    sub = nc[nc["F_hat"] < 1.0]
    y = np.array([Y.get(t, np.nan) for t in sub["t"]], dtype=float)
    keep = np.isfinite(y) & (y >= min_deaths) & sub["pi_lower"].notna().to_numpy()
    if not keep.any():
        return float("nan"), 0
    inside = (sub["pi_lower"].to_numpy()[keep] <= y[keep]) & (y[keep] <= sub["pi_upper"].to_numpy()[keep])
    return float(inside.mean()), int(keep.sum())


def cmd_nowcast(args) -> int:
    tri_path = _require(args.triangle)
    tri = _read_triangle(tri_path, args.dmax)
    data = delay.assemble_delay_rows(tri)
    if len(data) == 0:
        raise InputError("triangle holds no usable delay information")
    fit = delay.fit_delay(data)
    nc = delay.bootstrap_nowcast(tri, fit, n_boot=args.nboot, seed=args.seed, process_noise=args.process_noise)
    out = Path(args.out)
    inputs = {"triangle": tri_path}
    if args.truth:
        inputs["truth"] = _require(args.truth)
    m = build_manifest(
        "nowcast", inputs,
        {"dmax": tri.d_max, "nboot": args.nboot, "process_noise": args.process_noise},
        seed=args.seed,
        extra={"interval": "predictive" if args.process_noise else "parameter", "zero_count_rule": "rule of three"},
    )
    h = write_manifest(m, out.with_name(out.name + ".manifest.json"))
    write_csv(_iso(nc[delay.NOWCAST_COLUMNS]), out, h)
    offsets_path = Path(args.offsets_out) if args.offsets_out else out.with_name("offsets.csv")
    write_csv(_iso(delay.offsets_frame(fit)), offsets_path, h)
    if args.fit_out:
        _json_dump(fit.to_dict(), args.fit_out)
    print(f"nowcast for {tri.T}: dispersion {fit.fit.phi:.4g}, {int(np.sum(nc['F_hat'] < 1))} partially reported days")
    if args.truth:
        truth = json.loads(Path(args.truth).read_text(encoding="utf-8"))
        cov, n = coverage_report(nc, truth)
        print(f"coverage: {cov:.3f} of {n} partially reported days inside the interval")
    return EXIT_OK


_LAST = re.compile(r"^last-(\d+)-days?$")


def parse_window(spec: str | None, first: dt.date, last: dt.date) -> tuple[dt.date, dt.date]:
    if spec is None:
        spec = "last-7-days"
    m = _LAST.match(spec)
    if m:
        n = int(m.group(1))
        if n < 1:
            raise InputError("window must cover at least one day")
        a = last - dt.timedelta(days=n - 1)
    elif ":" in spec:
        a_s, b_s = spec.split(":", 1)
        a, last = dt.date.fromisoformat(a_s), dt.date.fromisoformat(b_s)
    else:
        raise InputError(f"cannot parse window {spec!r}; use last-N-days or START:END")
    if a < first:
        raise InputError(f"window starts {a}, before the first modeled day {first}")
    return a, last


def cmd_fit_mortality(args) -> int:
    paths = {
        "events": _require(args.events),
        "population": _require(args.population),
        "geometry": _require(args.geometry),
        "offsets": _require(args.offsets),
    }
    if args.nowcast:
        paths["nowcast"] = _require(args.nowcast)
    events = triangle.read_events(paths["events"])
    pop = mortality.read_population(paths["population"])
    geo = mortality.read_geometry(paths["geometry"])
    offsets = pd.read_csv(paths["offsets"], comment="#")
    offsets["t"] = pd.to_datetime(offsets["t"]).dt.date
    if offsets.empty:
        raise InputError("offsets file is empty")
    first, last = min(offsets["t"]), max(offsets["t"])
    T = last + dt.timedelta(days=1)
    groups = list(dict.fromkeys(
        (a, g) for a in triangle.AGE_GROUPS for g in triangle.GENDERS
        if ((pop["age_group"] == a) & (pop["gender"] == g)).any()
    ))
    if args.agesplit:
        if mortality.OLD_AGE not in {a for a, _ in groups} or not (events["age_group"] == mortality.OLD_AGE).any():
            raise InputError(f"--agesplit needs deaths and population in age group {mortality.OLD_AGE}; none found")
    cells = mortality.assemble_cells(events, pop, geo, offsets, (first, last), T, groups=groups)
    fitter = mortality.fit_mortality_agesplit if args.agesplit else mortality.fit_mortality
    base = fitter(cells)
    window = parse_window(args.window, first, last)
    dmap = mortality.expected_deaths_map(base, window)
    trend = mortality.time_trend_curve(base)
    trend["rate_worst"] = np.nan
    trend["rate_best"] = np.nan
    if args.nowcast:
        nc = pd.read_csv(paths["nowcast"], comment="#")
        if nc["pi_upper"].notna().all():
            worst_off, best_off = mortality.bound_offsets(nc)
            worst, best = mortality.refit_offset_bounds(cells, None, worst_off, best_off, base=base, agesplit=args.agesplit)
            trend["rate_worst"] = mortality.time_trend_curve(worst)["rate"].to_numpy()
            trend["rate_best"] = mortality.time_trend_curve(best)["rate"].to_numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = build_manifest(
        "fit-mortality", paths, {"agesplit": args.agesplit, "window": args.window},
        extra={
            "map_window": [window[0].isoformat(), window[1].isoformat()],
            "map_dates": (window[1] - window[0]).days + 1,
            "trend_weekday_effect": "averaged with weight 1/7",
            "random_effect_covariance": "diagonal; off-diagonal terms not estimated",
        },
    )
    h = write_manifest(m, out / "manifest.json")
    _json_dump(base.to_dict(), out / "fit.json")
    write_csv(dmap, out / "map.csv", h)
    write_csv(_iso(trend), out / "trend.csv", h)
    top = dmap.loc[dmap["u1"].idxmax(), "district_id"]
    print(f"dispersion {base.phi:.4g}; largest recent district effect: {top}")
    return EXIT_OK


def _load_fit(doc: dict) -> fitcore.FitResult:
    if doc.get("kind") in ("mortality_fit", "delay_fit"):
        return fitcore.fit_from_dict(doc["fit"])
    return fitcore.fit_from_dict(doc)


def qq_table(fit: fitcore.FitResult) -> pd.DataFrame:
    r = fitcore.pearson_residuals(fit)
    order = np.argsort(r, kind="mergesort")
    n = len(r)
    q = stats.norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    return pd.DataFrame({"index": order, "theoretical_quantile": q, "pearson_residual": r[order]})


def cmd_diagnose(args) -> int:
    fit_path = _require(args.fit)
    doc = json.loads(fit_path.read_text(encoding="utf-8"))
    fit = _load_fit(doc)
    table = qq_table(fit)
    out = Path(args.out)
    m = build_manifest("diagnose", {"fit": fit_path}, {})
    h = write_manifest(m, out.with_name(out.name + ".manifest.json"))
    write_csv(table, out, h)
    print(f"phi_hat = {fit.phi!r}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fatalnowcast", description=__doc__.splitlines()[0])
    p.add_argument(
        "--version", action="version",
        version=f"fatalnowcast {__version__} (fit format {fitcore.FORMAT_VERSION}, config format {simgen.CONFIG_VERSION})",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic snapshots and truth")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="diff daily snapshots into a reporting triangle")
    s.add_argument("snapshots", help="directory of snapshot_YYYY-MM-DD.csv files")
    s.add_argument("--out", required=True, help="triangle CSV")
    s.add_argument("--events", help="event log CSV (default: events.csv next to --out)")
    s.add_argument("--warnings", help="warnings log (default: warnings.log next to --out)")
    s.add_argument("--dmax", type=int, default=triangle.DEFAULT_DMAX)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("nowcast", help="fit the delay model and nowcast recent days")
    s.add_argument("triangle")
    s.add_argument("--dmax", type=int, default=None)
    s.add_argument("--nboot", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--offsets-out", default=None)
    s.add_argument("--fit-out", default=None)
    s.add_argument("--truth", default=None, help="truth.json from simulate; prints interval coverage")
    s.add_argument("--process-noise", action="store_true", help="predictive intervals including unreported deaths")
    s.set_defaults(func=cmd_nowcast)

    s = sub.add_parser("fit-mortality", help="fit the district mortality model")
    s.add_argument("--events", required=True)
    s.add_argument("--population", required=True)
    s.add_argument("--geometry", required=True)
    s.add_argument("--offsets", required=True)
    s.add_argument("--nowcast", default=None, help="nowcast CSV with intervals; adds best/worst trend curves")
    s.add_argument("--agesplit", action="store_true")
    s.add_argument("--window", default="last-7-days", help="map window: last-N-days or START:END")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_fit_mortality)

    s = sub.add_parser("diagnose", help="Pearson residual QQ table")
    s.add_argument("fit")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diagnose)
    return p


_INPUT_ERRORS = (
    InputError,
    triangle.SnapshotError,
    triangle.DateGapError,
    mortality.MortalityError,
    ValidationError,
    json.JSONDecodeError,
    KeyError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (delay.NowcastError, fitcore.FitError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
