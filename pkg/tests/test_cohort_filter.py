import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bobqc.cohort_filter import (
    FEATURES,
    ManifestMismatchError,
    SolfConfig,
    apply_filter,
    distribution_report,
    flagged_samples,
    iqr_bounds,
    iqr_verdicts,
    percentile,
    read_feature_csv,
    read_verdict_csv,
    solf_bounds,
    solf_verdicts,
    write_feature_csv,
    write_verdict_csv,
)
from bobqc.shape_features import OrganFeatures

from .oracles import sorted_percentile


def row(sid, cid, v, phi=0.5, ecc=0.5, present=True):
    if not present:
        return OrganFeatures(sid, cid, 0, 0.0, 0.0, None, None)
    return OrganFeatures(sid, cid, 10, v, 5.0, phi, ecc)


def table_from(vals, phis=None, eccs=None, class_id=2):
    n = len(vals)
    phis = phis if phis is not None else [0.5] * n
    eccs = eccs if eccs is not None else [0.5] * n
    return [row(f"s{i:03d}", class_id, vals[i], phis[i], eccs[i]) for i in range(n)]


def random_table(rng, n, classes=(2, 3), missing_rate=0.0):
    rows = []
    for i in range(n):
        for c in classes:
            if rng.random() < missing_rate:
                rows.append(row(f"s{i:03d}", c, 0, present=False))
            else:
                rows.append(row(f"s{i:03d}", c, *rng.gamma(2.0, 1.0, size=3)))
    return rows


# --- percentile -----------------------------------------------------------------

def test_percentile_examples():
    vals = list(range(1, 101))
    assert percentile(vals, 25) == 25.75
    assert percentile(vals, 0) == 1
    assert percentile(vals, 100) == 100
    assert percentile([4.2], 37.0) == 4.2
    with pytest.raises(ValueError):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile([1.0, float("nan")], 50)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0, 100))
def test_percentile_matches_sorted_oracle(vals, p):
    ref = sorted_percentile(vals, p)
    assert abs(percentile(vals, p) - ref) <= 1e-12 * max(abs(ref), 1e-300) or percentile(vals, p) == ref


# --- SOLF bounds and verdicts -----------------------------------------------------

def test_solf_bounds_example():
    rows = table_from([i / 1000 for i in range(1, 101)])
    b = solf_bounds(rows, SolfConfig(epsilon=2.0))[2]
    lo, hi = b.bounds["volume"]
    assert lo == pytest.approx(0.00199, rel=1e-12)
    assert hi == pytest.approx(0.09901, rel=1e-12)


def test_epsilon_zero_is_min_max_and_flags_nothing():
    rng = np.random.default_rng(0)
    rows = random_table(rng, 30)
    cfg = SolfConfig(epsilon=0.0, k=1)
    bounds = solf_bounds(rows, cfg)
    for c in (2, 3):
        vals = [r.normalized_volume for r in rows if r.class_id == c]
        assert bounds[c].bounds["volume"] == (min(vals), max(vals))
    assert not any(v.inaccurate for v in solf_verdicts(rows, bounds, cfg))


@pytest.mark.parametrize("kwargs", [
    {"epsilon": 100.0}, {"epsilon": -1.0}, {"k": 0}, {"k": 4},
    {"features": ("volume",), "k": 2}, {"features": ("colour",)}, {"scope": "bogus"},
])
def test_config_rejections(kwargs):
    with pytest.raises(ValueError):
        SolfConfig(**kwargs)


def _two_of_three_table():
    n = 20
    vals = [0.1 + 0.001 * i for i in range(n)]
    phis = [0.5 + 0.001 * i for i in range(n)]
    eccs = [0.3 + 0.001 * i for i in range(n)]
    rows = table_from(vals, phis, eccs)
    rows.append(row("volonly", 2, 5.0, 0.505, 0.305))
    rows.append(row("volsph", 2, 5.0, 0.01, 0.305))
    return rows


def test_k_rule():
    rows = _two_of_three_table()
    cfg = SolfConfig(epsilon=10.0)
    verdicts = {v.sample_id: v for v in solf_verdicts(rows, solf_bounds(rows, cfg), cfg)}
    assert verdicts["volonly"].out_of_range["volume"]
    assert not verdicts["volonly"].inaccurate
    assert verdicts["volsph"].inaccurate
    cfg1 = SolfConfig(epsilon=10.0, k=1)
    v1 = {v.sample_id: v for v in solf_verdicts(rows, solf_bounds(rows, cfg1), cfg1)}
    assert v1["volonly"].inaccurate


def test_missing_policy_and_unusable_class():
    rows = table_from([0.1, 0.2, 0.3]) + [row("s003", 2, 0, present=False)]
    rows.append(row("s000", 9, 0.5))  # only one present row: unusable
    cfg = SolfConfig(epsilon=0.0, k=1)
    bounds = solf_bounds(rows, cfg)
    assert not bounds[9].usable
    verdicts = solf_verdicts(rows, bounds, cfg)
    miss = [v for v in verdicts if v.missing]
    assert len(miss) == 1 and not miss[0].inaccurate
    assert flagged_samples(verdicts) == {"s003"}
    assert flagged_samples(verdicts, include_missing=False) == set()
    cfg_m = SolfConfig(epsilon=0.0, k=1, missing_is_inaccurate=True)
    assert [v.inaccurate for v in solf_verdicts(rows, bounds, cfg_m) if v.missing] == [True]


def test_verdicts_sorted():
    rng = np.random.default_rng(5)
    rows = random_table(rng, 15)
    rng.shuffle(rows)
    cfg = SolfConfig()
    verdicts = solf_verdicts(rows, solf_bounds(rows, cfg), cfg)
    keys = [(v.sample_id, v.class_id) for v in verdicts]
    assert keys == sorted(keys)


def test_duplicate_rows_rejected():
    rows = table_from([0.1, 0.2]) + [row("s000", 2, 0.3)]
    with pytest.raises(ValueError):
        solf_bounds(rows, SolfConfig())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_monotone_in_epsilon(seed, k):
    rows = random_table(np.random.default_rng(seed), 40)
    prev = set()
    for eps in (0, 1, 2, 3, 4, 5, 10, 25, 50, 99):
        cfg = SolfConfig(epsilon=float(eps), k=k)
        bad = {(v.sample_id, v.class_id) for v in solf_verdicts(rows, solf_bounds(rows, cfg), cfg) if v.inaccurate}
        assert prev <= bad
        prev = bad


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 3.0, 1000.0, 1e-4]))
def test_volume_scale_invariance(seed, scale):
    rows = random_table(np.random.default_rng(seed), 30)
    scaled = [
        OrganFeatures(r.sample_id, r.class_id, r.voxel_count, r.normalized_volume * scale,
                      r.surface_area, r.sphericity, r.eccentricity) if r.class_id == 2 else r
        for r in rows
    ]
    cfg = SolfConfig(epsilon=5.0)
    a = solf_verdicts(rows, solf_bounds(rows, cfg), cfg)
    b = solf_verdicts(scaled, solf_bounds(scaled, cfg), cfg)
    assert [v.inaccurate for v in a] == [v.inaccurate for v in b]


def _brute_verdicts(rows, eps, k):
    out = {}
    classes = sorted({r.class_id for r in rows})
    for c in classes:
        present = [r for r in rows if r.class_id == c and r.present]
        for r in rows:
            if r.class_id != c:
                continue
            if not r.present:
                out[(r.sample_id, c)] = False
                continue
            n_out = 0
            for attr in ("normalized_volume", "sphericity", "eccentricity"):
                vals = [getattr(q, attr) for q in present]
                lo = sorted_percentile(vals, eps / 2)
                hi = sorted_percentile(vals, 100 - eps / 2)
                n_out += not (lo <= getattr(r, attr) <= hi)
            out[(r.sample_id, c)] = n_out >= k
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.floats(0, 99), st.integers(1, 3))
def test_brute_force_equivalence(seed, n, eps, k):
    rows = random_table(np.random.default_rng(seed), n, missing_rate=0.1)
    cfg = SolfConfig(epsilon=eps, k=k)
    got = {(v.sample_id, v.class_id): v.inaccurate for v in solf_verdicts(rows, solf_bounds(rows, cfg), cfg)}
    for c in (2, 3):
        if sum(r.present for r in rows if r.class_id == c) < 2:
            got = {key: val for key, val in got.items() if key[1] != c}
    ref = _brute_verdicts(rows, eps, k)
    for key, val in got.items():
        assert val == ref[key]


# --- IQR ----------------------------------------------------------------------------

def test_iqr_example():
    rows = table_from([float(i) for i in range(1, 101)])
    assert iqr_bounds(rows)[2].bounds["volume"] == (-48.5, 149.5)
    assert not any(v.inaccurate for v in iqr_verdicts(rows))


def test_iqr_flags_injected_outlier():
    vals = [1.0 + 0.001 * i for i in range(40)]
    vals.append(10 * max(vals))
    verdicts = iqr_verdicts(table_from(vals))
    assert [v.sample_id for v in verdicts if v.inaccurate] == ["s040"]


def test_iqr_constant_class():
    vals = [0.2] * 10 + [0.2 + 1e-9]
    verdicts = iqr_verdicts(table_from(vals))
    assert [v.sample_id for v in verdicts if v.inaccurate] == ["s010"]


def test_iqr_and_solf_agree_on_tight_cluster():
    rng = np.random.default_rng(2)
    n = 200
    rows = table_from(list(0.1 + 1e-4 * rng.normal(size=n)),
                      list(0.6 + 1e-4 * rng.normal(size=n)),
                      list(0.4 + 1e-4 * rng.normal(size=n)))
    cfg = SolfConfig(epsilon=0.0)
    assert not any(v.inaccurate for v in solf_verdicts(rows, solf_bounds(rows, cfg), cfg))
    assert not any(v.inaccurate for v in iqr_verdicts(rows))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50))
def test_iqr_matches_oracle(vals):
    q1, q3 = sorted_percentile(vals, 25), sorted_percentile(vals, 75)
    lo, hi = iqr_bounds(table_from(vals))[2].bounds["volume"]
    assert lo == pytest.approx(q1 - 1.5 * (q3 - q1), rel=1e-12, abs=1e-12)
    assert hi == pytest.approx(q3 + 1.5 * (q3 - q1), rel=1e-12, abs=1e-12)


# --- manifest filtering and reports ----------------------------------------------

def _liver_cohort():
    rows, manifest = [], {"seed": 0, "samples": []}
    for i in range(100):
        sid = f"s{i:03d}"
        manifest["samples"].append({"id": sid, "labels": f"{sid}.nii"})
        bad = i in (10, 50, 90)
        rows.append(row(sid, 2, 9.0 if bad else 0.1 + 0.0001 * i, 0.01 if bad else 0.5, 0.5))
        rows.append(row(sid, 3, 0.05 + 0.0001 * i, 0.5, 0.5))
    return rows, manifest


def test_apply_filter_scopes():
    rows, manifest = _liver_cohort()
    cfg = SolfConfig(epsilon=10.0)
    verdicts = solf_verdicts(rows, solf_bounds(rows, cfg), cfg)
    bad = [(v.sample_id, v.class_id) for v in verdicts if v.inaccurate]
    assert bad == [("s010", 2), ("s050", 2), ("s090", 2)]

    whole = apply_filter(manifest, verdicts, "whole-sample")
    assert len(whole["samples"]) == 97
    per = apply_filter(manifest, verdicts, "per-organ")
    assert len(per["samples"]) == 100
    assert sum(len(s.get("removed_classes", [])) for s in per["samples"]) == 3
    assert apply_filter(manifest, [], "per-organ") == manifest
    assert manifest["samples"][10] == {"id": "s010", "labels": "s010.nii"}

    stray = verdicts + [type(verdicts[0])("ghost", 2, {f: False for f in FEATURES}, False, True)]
    with pytest.raises(ManifestMismatchError):
        apply_filter(manifest, stray)


@pytest.mark.parametrize("scope", ["per-organ", "whole-sample"])
def test_distribution_report_properties(scope):
    rng = np.random.default_rng(4)
    rows = random_table(rng, 60, missing_rate=0.05)
    cfg = SolfConfig(epsilon=10.0, k=1)
    verdicts = solf_verdicts(rows, solf_bounds(rows, cfg), cfg)
    for h in distribution_report(rows, verdicts, bins=20, scope=scope):
        present = [r.normalized_volume for r in rows if r.class_id == h.class_id and r.present]
        assert len(h.edges) == 21
        assert h.edges[0] == min(present) and h.edges[-1] == max(present)
        assert h.count_all.sum() == len(present)
        assert np.all(h.count_kept <= h.count_all)

    cfg0 = SolfConfig(epsilon=0.0)
    v0 = solf_verdicts(rows, solf_bounds(rows, cfg0), cfg0)
    for h in distribution_report(rows, v0, scope=scope):
        assert np.array_equal(h.count_all, h.count_kept)


# --- CSV ---------------------------------------------------------------------------

def test_feature_csv_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    rows = random_table(rng, 12, missing_rate=0.2)
    p = tmp_path / "f.csv"
    write_feature_csv(rows, p)
    assert p.read_text().splitlines()[0] == (
        "sample_id,class_id,present,voxel_count,normalized_volume,surface_area_mm2,sphericity,eccentricity")
    back = read_feature_csv(p)
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        assert (a.sample_id, a.class_id, a.voxel_count, a.present) == (b.sample_id, b.class_id, b.voxel_count, b.present)
        for attr in ("normalized_volume", "surface_area", "sphericity", "eccentricity"):
            x, y = getattr(a, attr), getattr(b, attr)
            if x is None:
                assert y is None
            else:
                assert y == pytest.approx(x, rel=5e-9)


def test_verdict_csv_round_trip(tmp_path):
    rows = _two_of_three_table()
    cfg = SolfConfig(epsilon=10.0)
    verdicts = solf_verdicts(rows, solf_bounds(rows, cfg), cfg)
    p = tmp_path / "v.csv"
    write_verdict_csv(verdicts, p)
    text = p.read_text().splitlines()
    assert text[0] == "sample_id,class_id,oor_volume,oor_sphericity,oor_eccentricity,missing,inaccurate"
    assert all(set(line.split(",")[2:]) <= {"0", "1"} for line in text[1:])
    assert read_verdict_csv(p) == verdicts
