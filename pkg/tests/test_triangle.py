import datetime as dt
import random

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fatalnowcast import simgen
from fatalnowcast.triangle import (
    EVENT_COLUMNS,
    DateGapError,
    SnapshotParseError,
    SnapshotValidationError,
    aggregate_events,
    build_triangle,
    diff_snapshots,
    emit_snapshot,
    ingest_directory,
    make_snapshot,
    parse_snapshot,
    parse_snapshot_text,
    triangle_from_frame,
    write_snapshot,
)

D = dt.date(2020, 4, 1)
HEADER = "download_date,district_id,age_group,gender,registration_date,cum_deaths\n"


def day(i):
    return D + dt.timedelta(days=i)


def events_frame(rows):
    return pd.DataFrame(rows, columns=EVENT_COLUMNS)


def test_parse_three_rows(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(
        HEADER
        + "2020-04-03,R1,A80+,F,2020-04-01,2\n"
        + "2020-04-03,R1,A35-59,M,2020-04-02,1\n"
        + "2020-04-03,R2,A60-79,F,2020-04-01,0\n"
    )
    snap = parse_snapshot(p)
    assert len(snap) == 3
    assert snap.download_date == day(2)


def test_negative_count_rejected():
    with pytest.raises(SnapshotValidationError, match="negative"):
        parse_snapshot_text(HEADER + "2020-04-03,R1,A80+,F,2020-04-01,-1\n")


def test_duplicate_key_rejected():
    row = "2020-04-03,R1,A80+,F,2020-04-01,2\n"
    with pytest.raises(SnapshotValidationError, match="duplicate"):
        parse_snapshot_text(HEADER + row + row)


def test_malformed_row_reports_line():
    with pytest.raises(SnapshotParseError, match="line 3"):
        parse_snapshot_text(HEADER + "2020-04-03,R1,A80+,F,2020-04-01,2\n" + "2020-04-03,R1,A80+\n")


def test_registration_after_download_rejected():
    with pytest.raises(SnapshotValidationError):
        parse_snapshot_text(HEADER + "2020-04-03,R1,A80+,F,2020-04-05,2\n")


def test_roundtrip_canonical(tmp_path):
    raw = (
        HEADER
        + "2020-04-03,R2,A80+,M,2020-04-01,4\n"
        + "2020-04-03,R1,A80+,F,2020-04-02,2\n"
        + "2020-04-03,R1,A15-34,F,2020-04-01,1\n"
    )
    canonical = emit_snapshot(parse_snapshot_text(raw))
    p = tmp_path / "c.csv"
    p.write_text(canonical)
    assert emit_snapshot(parse_snapshot(p)) == canonical
    # rows ordered by district, age rank, gender, registration date
    assert canonical.splitlines()[1].startswith("2020-04-03,R1,A15-34")


def test_diff_increment_and_decrement():
    prev = make_snapshot(day(1), [("R1", "A80+", "F", day(0), 2), ("R2", "A80+", "F", day(0), 5)])
    curr = make_snapshot(day(2), [("R1", "A80+", "F", day(0), 5), ("R2", "A80+", "F", day(0), 4)])
    ev, warns = diff_snapshots(prev, curr)
    assert len(ev) == 3
    assert set(ev["district_id"]) == {"R1"}
    assert (ev["report_date"] == day(2)).all() and (ev["delay"] == 2).all()
    assert len(warns) == 1 and warns[0]["district_id"] == "R2"


def test_diff_new_key_counts_from_zero():
    prev = make_snapshot(day(1), [])
    curr = make_snapshot(day(2), [("R1", "A60-79", "M", day(2), 2)])
    ev, _ = diff_snapshots(prev, curr)
    assert len(ev) == 2
    assert (ev["delay"] == 1).all()  # reported on the registration day -> delay 1


def test_diff_requires_consecutive_days():
    a = make_snapshot(day(1), [])
    with pytest.raises(ValueError):
        diff_snapshots(a, make_snapshot(day(3), []))


def test_long_delay_folded_into_dmax():
    prev = make_snapshot(day(40), [])
    curr = make_snapshot(day(41), [("R1", "A80+", "M", day(0), 1)])
    ev, _ = diff_snapshots(prev, curr, d_max=30)
    assert ev["delay"].tolist() == [30]


@given(st.lists(st.integers(0, 6), min_size=3, max_size=3))
def test_diff_additive(counts):
    a, b, c = sorted(counts)
    s0 = make_snapshot(day(1), [("R1", "A80+", "F", day(0), a)])
    s1 = make_snapshot(day(2), [("R1", "A80+", "F", day(0), b)])
    s2 = make_snapshot(day(3), [("R1", "A80+", "F", day(0), c)])
    e01, _ = diff_snapshots(s0, s1)
    e12, _ = diff_snapshots(s1, s2)
    assert len(e01) + len(e12) == c - a


def test_empty_triangle():
    tri = build_triangle(events_frame([]), day(0), day(10), 30)
    assert tri.N.sum() == 0 and tri.C.sum() == 0


def test_single_event_triangle():
    ev = events_frame([("R1", "A80+", "F", day(0), day(3), 3)])
    tri = build_triangle(ev, day(0), day(10), 30)
    assert tri.N[0, 2] == 1 and tri.N.sum() == 1
    assert (tri.C[0, 2:] == 1).all() and (tri.C[0, :2] == 0).all()


def test_event_outside_range_rejected():
    ev = events_frame([("R1", "A80+", "F", day(11), day(12), 1)])
    with pytest.raises(ValueError):
        build_triangle(ev, day(0), day(10), 30)


def _random_events(rng, n, nt=20, d_max=30):
    rows = []
    for _ in range(n):
        t = int(rng.integers(nt))
        d = int(rng.integers(-2, 40))
        rows.append(("R1", "A80+", "F", day(t), day(t + d), min(max(d, 1), d_max)))
    return events_frame(rows)


def test_triangle_matches_bruteforce():
    rng = np.random.default_rng(1)
    ev = _random_events(rng, 500)
    tri = build_triangle(ev, day(0), day(19), 30)
    N = np.zeros((20, 30), dtype=int)
    for r in ev.itertuples(index=False):
        t = (r.registration_date - day(0)).days
        d = min(max((r.report_date - r.registration_date).days, 1), 30)
        N[t, d - 1] += 1
    C = np.zeros_like(N)
    for t in range(20):
        for d in range(30):
            C[t, d] = N[t, : d + 1].sum()
    assert np.array_equal(tri.N, N)
    assert np.array_equal(tri.C, C)
    assert tri.N.sum() == len(ev)


@given(st.integers(0, 2**32 - 1))
def test_triangle_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ev = _random_events(rng, 60)
    perm = ev.sample(frac=1.0, random_state=random.Random(seed).randrange(2**31)).reset_index(drop=True)
    a = build_triangle(ev, day(0), day(19), 30)
    b = build_triangle(perm, day(0), day(19), 30)
    assert np.array_equal(a.N, b.N)


@given(st.integers(0, 2**32 - 1))
def test_cumulative_identities(seed):
    rng = np.random.default_rng(seed)
    tri = build_triangle(_random_events(rng, 80), day(0), day(19), 30)
    C = tri.C
    diffs = np.diff(np.hstack([np.zeros((C.shape[0], 1), dtype=int), C]), axis=1)
    assert np.array_equal(diffs, tri.N)
    assert (np.diff(C, axis=1) >= 0).all()


def test_observed_mask():
    tri = build_triangle(events_frame([]), day(0), day(5), 30)
    m = tri.observed_mask
    assert m[0, 4] and not m[0, 5]  # t + d <= T with T index 5
    assert not m[5].any()


def test_triangle_frame_roundtrip():
    rng = np.random.default_rng(3)
    tri = build_triangle(_random_events(rng, 100), day(0), day(19), 30)
    back = triangle_from_frame(tri.to_frame())
    assert back.T == tri.T and np.array_equal(back.N, tri.N)


def test_aggregate_total_and_partition():
    rng = np.random.default_rng(4)
    ev = _random_events(rng, 50)
    assert aggregate_events(ev)["count"].tolist() == [50]
    by_day = aggregate_events(ev, ["registration_date"])
    assert by_day["count"].sum() == 50


def test_national_daily_counts_match_truth(tmp_path):
    cfg = simgen.synthetic_config(5, 20, seed=2, expected_deaths=400)
    truth, snaps = simgen.simulate(cfg)
    for s in snaps:
        write_snapshot(s, tmp_path / f"snapshot_{s.download_date}.csv")
    events, warns, days = ingest_directory(tmp_path)
    assert not warns
    daily = aggregate_events(events, ["registration_date"]).set_index("registration_date")["count"]
    expected = truth.events().groupby("registration_date").size()
    assert daily.to_dict() == expected.to_dict()


def test_gap_detected(tmp_path):
    for i in (0, 1, 3):
        write_snapshot(make_snapshot(day(i), []), tmp_path / f"snapshot_{day(i)}.csv")
    with pytest.raises(DateGapError) as err:
        ingest_directory(tmp_path)
    assert err.value.missing == [day(2)]
