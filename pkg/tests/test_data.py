import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softtraj.data import (RawSeries, SplitSpec, ar2_lag1_autocorrelation, gen_synthetic,
                           ingest_csv, make_windows, split_series, windows_to_arrays,
                           write_csv)
from softtraj.exceptions import ConfigurationError, ContractError, ParseError


def _write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ingest_three_rows(tmp_path):
    p = _write(tmp_path, "series_id,timestamp,value\na,0,1\na,300,2\na,600,3\n")
    res = ingest_csv(p)
    assert len(res) == 1
    np.testing.assert_array_equal(res[0].values, [1, 2, 3])
    assert res.dropped_rows == 0


def test_ingest_drops_nan(tmp_path):
    p = _write(tmp_path, "series_id,timestamp,value\na,0,1\na,300,nan\na,600,3\n")
    res = ingest_csv(p)
    assert len(res[0]) == 2
    assert res.dropped_rows == 1


def test_ingest_interleaved_ids_matches_sort_and_group(tmp_path, rng):
    rows = []
    for sid in ("x", "y"):
        for t in rng.permutation(20):
            rows.append((sid, int(t) * 300, float(rng.normal(120, 20))))
    order = rng.permutation(len(rows))
    text = "series_id,timestamp,value\n" + "".join(
        f"{rows[i][0]},{rows[i][1]},{rows[i][2]!r}\n" for i in order)
    res = ingest_csv(_write(tmp_path, text))
    assert [s.series_id for s in res] == ["x", "y"]
    for s in res:
        expect = sorted((r[1], r[2]) for r in rows if r[0] == s.series_id)
        np.testing.assert_array_equal(s.timestamps, [e[0] for e in expect])
        np.testing.assert_array_equal(s.values, [e[1] for e in expect])


def test_ingest_duplicates_and_bounds(tmp_path):
    p = _write(tmp_path, "series_id,timestamp,value\na,0,1\na,0,5\na,300,900\na,600,3\n")
    res = ingest_csv(p, value_bounds=(0, 600))
    assert res.duplicate_rows == 1
    assert res.implausible_rows == 1
    np.testing.assert_array_equal(res[0].values, [1, 3])


def test_ingest_iso_timestamps_and_schema(tmp_path):
    p = _write(tmp_path, "pid,time,bg\nq,2024-01-01T00:00:00Z,100\nq,2024-01-01T00:05:00Z,110\n")
    res = ingest_csv(p, schema={"id": "pid", "timestamp": "time", "value": "bg"})
    assert np.diff(res[0].timestamps)[0] == 300


def test_ingest_parse_error_has_line_number(tmp_path):
    p = _write(tmp_path, "series_id,timestamp,value\na,0,1\na,300,abc\n")
    with pytest.raises(ParseError, match="line 3"):
        ingest_csv(p)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_csv(tmp_path / "missing.csv")


def test_csv_round_trip(tmp_path):
    series = gen_synthetic("seasonal", 2, 50, seed=1)
    write_csv(series, tmp_path / "o.csv")
    back = ingest_csv(tmp_path / "o.csv")
    for a, b in zip(series, back):
        assert a.series_id == b.series_id
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)


def _series(n, gap_at=None, gap=3):
    ts = np.arange(n, dtype=float) * 300
    if gap_at is not None:
        ts[gap_at:] += (gap - 1) * 300
    return RawSeries("s", ts, np.arange(n, dtype=float))


def test_window_count_formula():
    assert len(make_windows(_series(10), 4, 2, stride=1)) == 5
    assert make_windows(_series(5), 4, 2) == []


def test_windows_skip_gap_brute_force():
    s = _series(20, gap_at=10)
    got = {w.origin_index for w in make_windows(s, 4, 2, stride=1, max_gap=300)}
    expect = set()
    for start in range(0, 20 - 6 + 1):
        d = np.diff(s.timestamps[start:start + 6])
        if np.all(d <= 300):
            expect.add(start)
    assert got == expect
    assert all(not (w <= 9 < w + 5) for w in got)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), T=st.integers(1, 10), L=st.integers(1, 10), stride=st.integers(1, 5))
def test_window_count_property(n, T, L, stride):
    ws = make_windows(_series(n), T, L, stride)
    expect = 0 if n < T + L else math.floor((n - T - L) / stride) + 1
    assert len(ws) == expect
    for w in ws:
        assert len(w.history) == T and len(w.target) == L
        np.testing.assert_array_equal(w.history, np.arange(w.origin_index, w.origin_index + T))


def test_windows_to_arrays_shapes():
    X, y = windows_to_arrays(make_windows(_series(30), 8, 4, stride=2))
    assert X.shape[1] == 8 and y.shape[1] == 4 and len(X) == len(y)


def test_gen_synthetic_deterministic():
    a = gen_synthetic("regime-switch", 3, 500, seed=7)
    b = gen_synthetic("regime-switch", 3, 500, seed=7)
    for x, y in zip(a, b):
        assert x.values.tobytes() == y.values.tobytes()


def test_ar2_degenerate_is_constant():
    s = gen_synthetic("ar2", 1, 100, seed=0, noise=0.0, a1=0.0, a2=0.0, mean=120.0)[0]
    assert np.all(s.values == 120.0)


def test_ar2_lag1_autocorrelation():
    a1, a2 = 0.5, 0.2
    x = gen_synthetic("ar2", 1, 10_000, seed=3, a1=a1, a2=a2)[0].values
    x = x - x.mean()
    r1 = float(np.dot(x[:-1], x[1:]) / np.dot(x, x))
    assert abs(r1 - ar2_lag1_autocorrelation(a1, a2)) < 0.05


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        gen_synthetic("walk", 1, 10, seed=0)


def test_split_disjoint_and_covering():
    ids = [f"p{i}" for i in range(20)]
    sp = split_series(ids, seed=4)
    assert not (sp.train_ids & sp.val_ids or sp.train_ids & sp.test_ids
                or sp.val_ids & sp.test_ids)
    assert sp.train_ids | sp.val_ids | sp.test_ids == set(ids)
    with pytest.raises(ContractError):
        SplitSpec(frozenset({"a"}), frozenset({"a"}), frozenset())


def test_raw_series_rejects_unsorted():
    with pytest.raises(ContractError):
        RawSeries("a", [0, 0], [1, 2])
