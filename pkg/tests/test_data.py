import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgmjepa import data
from cgmjepa.data import (GRID, GRID_LEN, SENTINEL, AlignedTrace, DataError, GlucoseSeries,
                          SynthSpec, align_to_grid, generate_synthetic, mean_stream,
                          parse_csv, write_csv)


def _write(tmp_path, text, name="obs.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


HEADER = "subject_id,stream,timepoint_min,glucose_mg_dl\n"


def test_parse_single_series(tmp_path):
    p = _write(tmp_path, HEADER + "S1,ctru_venous,30,150\nS1,ctru_venous,-10,90\nS1,ctru_venous,0,92\n")
    (s,) = parse_csv(p)
    assert s.subject_id == "S1" and s.stream == "ctru_venous"
    np.testing.assert_array_equal(s.timepoints, [-10, 0, 30])
    np.testing.assert_array_equal(s.glucose, [90, 92, 150])


def test_parse_groups_subjects_and_streams(tmp_path):
    rows = [f"{sid},{st},{t},{100 + t}" for sid in ("A", "B") for st in ("ctru_cgm", "home_cgm_1")
            for t in (0, 5)]
    out = parse_csv(_write(tmp_path, HEADER + "\n".join(rows) + "\n"))
    assert len(out) == 4
    assert {(s.subject_id, s.stream) for s in out} == {
        ("A", "ctru_cgm"), ("A", "home_cgm_1"), ("B", "ctru_cgm"), ("B", "home_cgm_1")}


def test_parse_rejects_non_numeric_with_line(tmp_path):
    p = _write(tmp_path, HEADER + "S1,ctru_venous,0,90\nS1,ctru_venous,5,abc\n")
    with pytest.raises(DataError, match="line 3"):
        parse_csv(p)


def test_parse_rejects_duplicate_timepoint(tmp_path):
    p = _write(tmp_path, HEADER + "S1,ctru_venous,0,90\nS1,ctru_venous,0,91\n")
    with pytest.raises(DataError, match="duplicate"):
        parse_csv(p)


def test_parse_rejects_bad_header(tmp_path):
    with pytest.raises(DataError, match="header"):
        parse_csv(_write(tmp_path, "a,b,c,d\n"))


def test_csv_round_trip(tmp_path):
    series, _ = generate_synthetic(SynthSpec(n_subjects=3, days_per_subject=1, seed=5))
    p = tmp_path / "rt.csv"
    write_csv(series, p)
    back = {(s.subject_id, s.stream): s for s in parse_csv(p)}
    for s in series:
        b = back[(s.subject_id, s.stream)]
        np.testing.assert_array_equal(b.glucose, s.glucose)
        np.testing.assert_array_equal(b.timepoints, s.timepoints)


def test_align_venous_draws():
    t = np.array(data.VENOUS_TIMEPOINTS, dtype=float)
    tr = align_to_grid(GlucoseSeries("S", "ctru_venous", t, 100 + t / 10 + 20))
    assert tr.mask.sum() == 9
    assert np.sum(tr.values == SENTINEL) == 30


def test_align_full_cgm():
    tr = align_to_grid(GlucoseSeries("S", "ctru_cgm", GRID.astype(float), np.full(GRID_LEN, 110.0)))
    assert tr.mask.all() and tr.dropped == 0


def test_align_does_not_round():
    tr = align_to_grid(GlucoseSeries("S", "ctru_cgm", np.array([0.0, 17.0]), np.array([100.0, 120.0])))
    assert tr.dropped == 1
    assert tr.mask.sum() == 1
    assert 120.0 not in tr.values


def test_align_drops_outside_grid():
    tr = align_to_grid(GlucoseSeries("S", "ctru_cgm", np.array([-15.0, 0.0, 185.0]), np.full(3, 99.0)))
    assert tr.dropped == 2 and tr.mask.sum() == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-2, 36), min_size=1, max_size=39, unique=True))
def test_align_idempotent_and_counts(slots):
    t = np.sort(np.array(slots, dtype=float)) * 5.0
    s = GlucoseSeries("S", "home_cgm_1", t, 80 + np.abs(t))
    tr = align_to_grid(s)
    assert tr.mask.sum() + np.sum(tr.values == SENTINEL) == GRID_LEN
    again = align_to_grid(data.trace_as_series(tr))
    np.testing.assert_array_equal(again.values, tr.values)
    np.testing.assert_array_equal(again.mask, tr.mask)


def _trace(values, mask=None, stream="home_cgm_1", sid="S"):
    v = np.asarray(values, dtype=float)
    m = np.ones(GRID_LEN, bool) if mask is None else np.asarray(mask)
    return AlignedTrace(sid, stream, np.where(m, v, SENTINEL), m)


def test_mean_stream_arithmetic():
    a = _trace(np.full(GRID_LEN, 100.0))
    b = _trace(np.full(GRID_LEN, 120.0), stream="home_cgm_2")
    out = mean_stream([a, b], "cgm_home_mean")
    assert out.values[0] == 110.0 and out.stream == "cgm_home_mean"


def test_mean_stream_omits_missing_component():
    m = np.ones(GRID_LEN, bool)
    m[5] = False
    a = _trace(np.full(GRID_LEN, 100.0), m)
    b = _trace(np.full(GRID_LEN, 130.0), stream="home_cgm_2")
    out = mean_stream([a, b], "cgm_home_mean")
    assert out.values[5] == 130.0 and out.values[4] == 115.0 and out.mask.all()


def test_mean_stream_single_component_identity():
    a = _trace(np.linspace(90, 180, GRID_LEN))
    out = mean_stream([a], "cgm_home_mean")
    np.testing.assert_array_equal(out.values, a.values)
    np.testing.assert_array_equal(out.mask, a.mask)


def test_mean_stream_errors():
    with pytest.raises(DataError):
        mean_stream([], "cgm_home_mean")
    with pytest.raises(DataError):
        mean_stream([_trace(np.full(GRID_LEN, 1.0)), _trace(np.full(GRID_LEN, 1.0), sid="T")], "cgm_all_mean")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_mean_stream_order_invariant(seed):
    rng = np.random.default_rng(seed)
    comps = [_trace(rng.uniform(60, 250, GRID_LEN), rng.random(GRID_LEN) < 0.7, stream=s)
             for s in ("ctru_cgm", "home_cgm_1", "home_cgm_2")]
    a = mean_stream(comps, "cgm_all_mean")
    b = mean_stream(comps[::-1], "cgm_all_mean")
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(a.mask, b.mask)


def _split_dict(n):
    subs = [f"S{i}" for i in range(n)]
    return {"subjects": subs, "labels": {s: {"ir": i % 2, "beta": (i // 2) % 2} for i, s in enumerate(subs)},
            "demographics": {s: {"sex": "F"} for s in subs}}


def test_load_split(tmp_path):
    p = tmp_path / "train_split.json"
    p.write_text(json.dumps(_split_dict(27)))
    sp = data.load_split(p)
    assert len(sp.subjects) == 27 and sp.name == "initial"


def test_load_split_rejections(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"subjects": [], "labels": {}}))
    with pytest.raises(DataError):
        data.load_split(p)
    d = _split_dict(3)
    del d["labels"]["S1"]["beta"]
    p.write_text(json.dumps(d))
    with pytest.raises(DataError, match="missing label"):
        data.load_split(p)
    d = _split_dict(3)
    d["labels"]["S1"]["hba1c"] = 1
    p.write_text(json.dumps(d))
    with pytest.raises(DataError, match="unknown label"):
        data.load_split(p)


def test_split_disjointness():
    a = data.split_from_dict({**_split_dict(3), "name": "initial"})
    b = data.split_from_dict({**_split_dict(2), "name": "validation"})
    with pytest.raises(DataError, match="both"):
        data.check_disjoint(a, b)


def test_synthetic_deterministic(tmp_path):
    spec = SynthSpec(n_subjects=6, days_per_subject=1, seed=123)
    for name in ("a", "b"):
        series, split = generate_synthetic(spec)
        write_csv(series, tmp_path / f"{name}.csv")
        data.save_split(split, tmp_path / f"{name}.json")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_synthetic_balance():
    spec = SynthSpec(n_subjects=40, class_balance=0.5, days_per_subject=0, seed=1)
    cls = data.latent_classes(spec)
    assert np.bincount(cls).tolist() == [20, 20]


def test_synthetic_noise_controls_roughness():
    def rough(sd):
        series, _ = generate_synthetic(SynthSpec(n_subjects=4, days_per_subject=1, noise_sd=sd, seed=3))
        return np.mean([np.sqrt(np.mean(np.diff(s.glucose, 2) ** 2)) for s in series
                        if s.stream in ("ctru_cgm", "free_living")])
    assert rough(4.0) > 2 * rough(0.0)


def test_synthetic_streams_and_kinetics():
    spec = SynthSpec(n_subjects=20, days_per_subject=1, noise_sd=0.0, seed=9)
    series, split = generate_synthetic(spec)
    cls = data.latent_classes(spec)
    by = data.group_by_subject(series)
    assert set(by[split.subjects[0]]) == {"ctru_venous", "ctru_cgm", "home_cgm_1", "home_cgm_2", "free_living"}
    peak = {0: [], 1: []}
    for sid, c in zip(split.subjects, cls):
        v = by[sid]["ctru_cgm"]
        peak[int(c)].append(v.timepoints[np.argmax(v.glucose)])
    assert np.mean(peak[1]) > np.mean(peak[0]) + 15
    assert len(by[split.subjects[0]]["free_living"]) == 288


def test_synth_spec_validation():
    with pytest.raises(DataError):
        SynthSpec(n_subjects=1)
    with pytest.raises(DataError):
        SynthSpec(class_balance=1.0)
