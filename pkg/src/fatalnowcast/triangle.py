"""Snapshot ingestion and reporting triangles.

A snapshot is the cumulative death count per (district, age group, gender,
registration date) as downloaded on one day. Differencing consecutive
snapshots dates each death by the day it first appeared, which gives the
reporting delay relative to the registration date.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

AGE_GROUPS = ("A15-34", "A35-59", "A60-79", "A80+")
GENDERS = ("M", "F")
SNAPSHOT_HEADER = ("download_date", "district_id", "age_group", "gender", "registration_date", "cum_deaths")
KEY_COLUMNS = ["district_id", "age_group", "gender", "registration_date"]
EVENT_COLUMNS = ["district_id", "age_group", "gender", "registration_date", "report_date", "delay"]
TRIANGLE_HEADER = ("t", "d", "N", "C", "observed")
DEFAULT_DMAX = 30
_SNAPSHOT_NAME = re.compile(r"(\d{4}-\d{2}-\d{2})")


class SnapshotError(ValueError):
    pass


class SnapshotParseError(SnapshotError):
    pass


class SnapshotValidationError(SnapshotError):
    pass


class DateGapError(ValueError):
    def __init__(self, missing: list[dt.date]):
        self.missing = missing
        shown = ", ".join(d.isoformat() for d in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        super().__init__(f"snapshot dates are not contiguous; missing {shown}{more}")


def parse_date(s: str) -> dt.date:
    return dt.date.fromisoformat(s.strip())


def day_index(dates, origin: dt.date) -> np.ndarray:
    """Integer day offsets of ``dates`` relative to ``origin``."""
    d = pd.to_datetime(pd.Series(dates)).values.astype("datetime64[D]").astype(np.int64)
    return d - np.datetime64(origin, "D").astype(np.int64)


def _age_rank(a):
    return AGE_GROUPS.index(a)


@dataclass(frozen=True, eq=False)
class SnapshotTable:
    download_date: dt.date
    rows: pd.DataFrame  # KEY_COLUMNS + cum_deaths; registration_date holds datetime.date

    def __len__(self):
        return len(self.rows)

    def counts(self) -> dict[tuple, int]:
        r = self.rows
        return dict(zip(zip(*(r[c] for c in KEY_COLUMNS)), r["cum_deaths"].astype(int)))


def make_snapshot(download_date: dt.date, records: Iterable[tuple]) -> SnapshotTable:
    """Build and validate a snapshot from ``(district, age, gender, reg_date, cum)`` tuples."""
    recs = list(records)
    frame = pd.DataFrame(recs, columns=KEY_COLUMNS + ["cum_deaths"])
    table = SnapshotTable(download_date, frame)
    validate_snapshot(table)
    return table


def validate_snapshot(table: SnapshotTable, lines: list[int] | None = None) -> None:
    rows = table.rows
    where = (lambda i: f"line {lines[i]}") if lines else (lambda i: f"row {i}")
    seen: dict[tuple, int] = {}
    for i, rec in enumerate(rows.itertuples(index=False)):
        if rec.age_group not in AGE_GROUPS:
            raise SnapshotValidationError(f"{where(i)}: unknown age_group {rec.age_group!r}")
        if rec.gender not in GENDERS:
            raise SnapshotValidationError(f"{where(i)}: unknown gender {rec.gender!r}")
        if rec.cum_deaths < 0:
            raise SnapshotValidationError(f"{where(i)}: negative cum_deaths {rec.cum_deaths}")
        if rec.registration_date > table.download_date:
            raise SnapshotValidationError(
                f"{where(i)}: registration_date {rec.registration_date} after download_date {table.download_date}"
            )
        key = (rec.district_id, rec.age_group, rec.gender, rec.registration_date)
        if key in seen:
            raise SnapshotValidationError(f"{where(i)}: duplicate key {key} (first seen at {where(seen[key])})")
        seen[key] = i


def _date_from_name(path: Path) -> dt.date | None:
    m = _SNAPSHOT_NAME.search(path.name)
    return parse_date(m.group(1)) if m else None


def parse_snapshot(path, download_date: dt.date | None = None) -> SnapshotTable:
    """Read one snapshot CSV.

    The download date comes from the rows; a file without data rows takes it
    from ``download_date`` or from a ``YYYY-MM-DD`` stamp in the file name.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    return parse_snapshot_text(text, download_date or _date_from_name(path), source=str(path))


def parse_snapshot_text(text: str, download_date: dt.date | None = None, source: str = "<text>") -> SnapshotTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SnapshotParseError(f"{source}: empty file, header required") from None
    if tuple(h.strip() for h in header) != SNAPSHOT_HEADER:
        raise SnapshotParseError(f"{source} line 1: expected header {','.join(SNAPSHOT_HEADER)}")
    recs, lines = [], []
    file_date = None
    for row in reader:
        lineno = reader.line_num
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(SNAPSHOT_HEADER):
            raise SnapshotParseError(f"{source} line {lineno}: expected 6 fields, got {len(row)}")
        try:
            dl = parse_date(row[0])
            reg = parse_date(row[4])
            cum = int(row[5].strip())
        except ValueError as exc:
            raise SnapshotParseError(f"{source} line {lineno}: {exc}") from None
        if file_date is None:
            file_date = dl
        elif dl != file_date:
            raise SnapshotValidationError(f"{source} line {lineno}: mixed download dates {file_date} and {dl}")
        recs.append((row[1].strip(), row[2].strip(), row[3].strip(), reg, cum))
        lines.append(lineno)
    if file_date is None:
        if download_date is None:
            raise SnapshotParseError(f"{source}: no rows and no download date available")
        file_date = download_date
    elif download_date is not None and download_date != file_date:
        raise SnapshotValidationError(f"{source}: rows dated {file_date}, expected {download_date}")
    frame = pd.DataFrame(recs, columns=KEY_COLUMNS + ["cum_deaths"])
    table = SnapshotTable(file_date, frame)
    validate_snapshot(table, lines)
    return table


def _sort_key(rec):
    district, age, gender, reg = rec[:4]
    return (district, _age_rank(age), gender, reg)


def emit_snapshot(table: SnapshotTable) -> str:
    """Canonical CSV text: header, rows sorted by key, ``\\n`` line endings."""
    recs = sorted(table.rows.itertuples(index=False, name=None), key=_sort_key)
    out = [",".join(SNAPSHOT_HEADER)]
    day = table.download_date.isoformat()
    for district, age, gender, reg, cum in recs:
        out.append(f"{day},{district},{age},{gender},{reg.isoformat()},{int(cum)}")
    return "\n".join(out) + "\n"


def write_snapshot(table: SnapshotTable, path) -> None:
    Path(path).write_text(emit_snapshot(table), encoding="utf-8")


def snapshot_filename(day: dt.date) -> str:
    return f"snapshot_{day.isoformat()}.csv"


def diff_snapshots(prev: SnapshotTable, curr: SnapshotTable, d_max: int = DEFAULT_DMAX):
    """Deaths that first appear in ``curr``.

    Returns ``(events, warnings)``: one event row per new death, and one
    warning dict per key whose cumulative count went down (no events are
    emitted for such keys).
    """
    if curr.download_date - prev.download_date != dt.timedelta(days=1):
        raise ValueError(
            f"snapshots must be consecutive days, got {prev.download_date} and {curr.download_date}"
        )
    before = prev.counts()
    keys, incs, warns = [], [], []
    for key, cum in curr.counts().items():
        delta = cum - before.get(key, 0)
        if delta > 0:
            keys.append(key)
            incs.append(delta)
        elif delta < 0:
            warns.append({
                "download_date": curr.download_date.isoformat(),
                "district_id": key[0], "age_group": key[1], "gender": key[2],
                "registration_date": key[3].isoformat(),
                "previous": before[key], "current": cum,
            })
    curr_keys = set(curr.counts())
    for key, cum in before.items():
        if key not in curr_keys and cum > 0:
            warns.append({
                "download_date": curr.download_date.isoformat(),
                "district_id": key[0], "age_group": key[1], "gender": key[2],
                "registration_date": key[3].isoformat(),
                "previous": cum, "current": 0,
            })
    for w in warns:
        log.warning("negative decrement dropped: %s", w)
    report = curr.download_date
    rows = []
    for key, n in zip(keys, incs):
        delay = min(max((report - key[3]).days, 1), d_max)
        rows.extend([(*key, report, delay)] * n)
    events = pd.DataFrame(rows, columns=EVENT_COLUMNS)
    return events, warns


def empty_events() -> pd.DataFrame:
    return pd.DataFrame(columns=EVENT_COLUMNS)


def snapshot_paths(directory) -> list[tuple[dt.date, Path]]:
    out = []
    for p in sorted(Path(directory).glob("*.csv")):
        day = _date_from_name(p)
        if day is not None:
            out.append((day, p))
    out.sort()
    return out


def check_contiguous(days: list[dt.date]) -> None:
    if not days:
        raise ValueError("no snapshot files found")
    have = set(days)
    missing = []
    d = days[0]
    while d <= days[-1]:
        if d not in have:
            missing.append(d)
        d += dt.timedelta(days=1)
    if missing:
        raise DateGapError(missing)


def ingest_directory(directory, d_max: int = DEFAULT_DMAX):
    """Parse and diff every snapshot in ``directory``; returns ``(events, warnings, days)``.

    The first snapshot is the baseline: deaths already present in it carry no
    report date and are not turned into events.
    """
    paths = snapshot_paths(directory)
    days = [d for d, _ in paths]
    check_contiguous(days)
    tables = [parse_snapshot(p, d) for d, p in paths]
    frames, warns = [], []
    for prev, curr in zip(tables, tables[1:]):
        ev, w = diff_snapshots(prev, curr, d_max)
        frames.append(ev)
        warns.extend(w)
    events = pd.concat(frames, ignore_index=True) if frames else empty_events()
    return events, warns, days


@dataclass(frozen=True, eq=False)
class ReportingTriangle:
    """Counts ``N[t, d-1]`` of deaths registered on day ``t0 + t`` and reported ``d`` days later.

    Rows cover registration days ``t0 .. T``; columns cover delays ``1 .. d_max``.
    """

    t0: dt.date
    T: dt.date
    d_max: int
    N: np.ndarray

    @property
    def n_days(self) -> int:
        return (self.T - self.t0).days + 1

    @property
    def T_index(self) -> int:
        return (self.T - self.t0).days

    @property
    def C(self) -> np.ndarray:
        return np.cumsum(self.N, axis=1)

    @property
    def observed_mask(self) -> np.ndarray:
        t = np.arange(self.n_days)[:, None]
        d = np.arange(1, self.d_max + 1)[None, :]
        return t + d <= self.T_index

    @property
    def dates(self) -> list[dt.date]:
        return [self.t0 + dt.timedelta(days=i) for i in range(self.n_days)]

    def observed_delay(self, t: int) -> int:
        """Largest observed delay for row ``t``, capped at ``d_max`` (0 if none)."""
        return int(min(max(self.T_index - t, 0), self.d_max))

    def observed_total(self) -> np.ndarray:
        """``C[t, T - t]`` per row: deaths reported so far for each registration day."""
        C = self.C
        out = np.zeros(self.n_days, dtype=np.int64)
        for t in range(self.n_days):
            dd = self.observed_delay(t)
            if dd > 0:
                out[t] = C[t, dd - 1]
        return out

    def to_frame(self) -> pd.DataFrame:
        nt, nd = self.N.shape
        t = np.repeat(np.arange(nt), nd)
        d = np.tile(np.arange(1, nd + 1), nt)
        dates = np.array(self.dates)[t]
        return pd.DataFrame({
            "t": [x.isoformat() for x in dates],
            "d": d,
            "N": self.N.ravel(),
            "C": self.C.ravel(),
            "observed": self.observed_mask.ravel().astype(int),
        })


def build_triangle(events: pd.DataFrame, t0: dt.date, T: dt.date, d_max: int = DEFAULT_DMAX) -> ReportingTriangle:
    """Count events by registration day and delay.

    Delays come from the report and registration dates, are at least 1 and
    are folded into ``d_max`` when longer.
    """
    if T < t0:
        raise ValueError(f"analysis day {T} precedes t0 {t0}")
    nt = (T - t0).days + 1
    N = np.zeros((nt, d_max), dtype=np.int64)
    if len(events):
        t = day_index(events["registration_date"], t0)
        bad = (t < 0) | (t >= nt)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"event registered {events['registration_date'].iloc[i]} outside [{t0}, {T}]"
            )
        rep = day_index(events["report_date"], t0)
        d = np.clip(rep - t, 1, d_max)
        np.add.at(N, (t, d - 1), 1)
    return ReportingTriangle(t0=t0, T=T, d_max=d_max, N=N)


def triangle_from_frame(frame: pd.DataFrame) -> ReportingTriangle:
    """Inverse of :meth:`ReportingTriangle.to_frame`."""
    dates = pd.to_datetime(frame["t"]).dt.date
    t0 = min(dates)
    t = np.asarray([(x - t0).days for x in dates])
    d = frame["d"].to_numpy(dtype=int)
    nt, d_max = t.max() + 1, d.max()
    N = np.zeros((nt, d_max), dtype=np.int64)
    N[t, d - 1] = frame["N"].to_numpy(dtype=np.int64)
    obs = frame["observed"].to_numpy(dtype=int).astype(bool)
    T_index = int((t + d)[obs].max()) if obs.any() else nt - 1
    tri = ReportingTriangle(t0=t0, T=t0 + dt.timedelta(days=T_index), d_max=int(d_max), N=N)
    if tri.n_days != nt:
        raise ValueError("triangle rows do not end at the analysis day")
    if not np.array_equal(tri.C[t, d - 1], frame["C"].to_numpy(dtype=np.int64)):
        raise ValueError("triangle C column is not the cumulative sum of N")
    return tri


def aggregate_events(events: pd.DataFrame, keys: Iterable[str] = ()) -> pd.DataFrame:
    """Event counts grouped by ``keys`` (a subset of the key columns); no keys gives the total."""
    aliases = {"district": "district_id", "age": "age_group"}
    keys = [aliases.get(k, k) for k in keys]
    unknown = set(keys) - set(KEY_COLUMNS)
    if unknown:
        raise ValueError(f"cannot aggregate by {sorted(unknown)}")
    if not keys:
        return pd.DataFrame({"count": [len(events)]})
    return events.groupby(keys, sort=True).size().rename("count").reset_index()


def read_events(path) -> pd.DataFrame:
    frame = pd.read_csv(path, comment="#", dtype={"district_id": str})
    for c in ("registration_date", "report_date"):
        frame[c] = pd.to_datetime(frame[c]).dt.date
    return frame[EVENT_COLUMNS]


def events_to_csv(events: pd.DataFrame) -> str:
    ev = events.copy()
    for c in ("registration_date", "report_date"):
        ev[c] = [x.isoformat() for x in ev[c]]
    ev = ev.sort_values(EVENT_COLUMNS, kind="mergesort")
    return ev.to_csv(index=False, lineterminator="\n")
