import math

import numpy as np
import pytest

from bobqc import phantom as ph
from bobqc.cohort_filter import SolfConfig, solf_bounds, solf_verdicts
from bobqc.shape_features import compute_features, eccentricity, organ_voxel_count
from bobqc.volume_io import LabelVolume, Spacing, read_nifti


def sphere_spec(radius=8.0, spacing=(1.0, 1.0, 1.0)):
    return ph.PhantomSpec(
        dims=(32, 32, 32), spacing=Spacing(*spacing),
        body_center=(16, 16, 16), body_semi_axes=(15, 15, 15),
        organs=(ph.Organ(2, (16, 16, 16), (radius,) * 3),),
    )


def test_generate_deterministic_and_labelled():
    spec = ph.abdomen_template()
    i1, l1 = ph.generate(spec)
    i2, l2 = ph.generate(spec)
    assert np.array_equal(i1.voxels, i2.voxels) and l1 == l2
    assert i1.voxels.dtype == np.float32
    assert set(np.unique(l1.voxels)) == {0, 1, 2, 3, 4, 5}


@pytest.mark.parametrize("axes, spacing", [
    ((10, 8, 6), (1, 1, 1)),
    ((12, 9, 14), (1.5, 1.5, 2.0)),
    ((6, 6, 6), (1, 1, 1)),
])
def test_organ_volume_matches_ellipsoid(axes, spacing):
    spec = ph.PhantomSpec(
        dims=(48, 40, 40), spacing=Spacing(*spacing),
        body_center=tuple(d * s / 2 for d, s in zip((48, 40, 40), spacing)),
        body_semi_axes=tuple(d * s / 2 - 1 for d, s in zip((48, 40, 40), spacing)),
        organs=(ph.Organ(2, tuple(d * s / 2 for d, s in zip((48, 40, 40), spacing)), axes),),
    )
    _, labels = ph.generate(spec)
    expected = 4 / 3 * math.pi * np.prod(axes) / np.prod(spacing)
    assert abs(organ_voxel_count(labels, 2) - expected) / expected < 0.05


def test_sphere_eccentricity_small():
    _, labels = ph.generate(sphere_spec(radius=9.0))
    assert eccentricity(labels, 2) < 0.1


def test_later_organ_wins_and_body_check():
    spec = ph.PhantomSpec(
        dims=(20, 20, 20), spacing=Spacing(1, 1, 1),
        body_center=(10, 10, 10), body_semi_axes=(9.5, 9.5, 9.5),
        organs=(ph.Organ(2, (10, 10, 10), (5, 5, 5)), ph.Organ(3, (10, 10, 10), (3, 3, 3))),
    )
    _, labels = ph.generate(spec)
    assert labels.voxels[10, 10, 10] == 3
    bad = ph.PhantomSpec(
        dims=(20, 20, 20), spacing=Spacing(1, 1, 1),
        body_center=(10, 10, 10), body_semi_axes=(5, 5, 5),
        organs=(ph.Organ(2, (17, 10, 10), (4, 4, 4)),),
    )
    with pytest.raises(ph.PhantomError):
        ph.generate(bad)


def _cube_labels():
    v = np.ones((14, 14, 14), int)
    v[2:12, 2:12, 2:12] = 2  # 1000 organ voxels
    return LabelVolume(v)


def test_erode_fraction_exact():
    out = ph.corrupt(_cube_labels(), ph.Corruption("erode", 2, fraction=0.5))
    assert organ_voxel_count(out, 2) == 500
    # removed voxels are re-labelled body, never background
    assert organ_voxel_count(out, 1) == 14**3 - 500
    # outermost first: the 8^3 core of the cube is untouched
    assert np.all(out.voxels[3:11, 3:11, 3:11][1:-1, 1:-1, 1:-1] == 2)


def test_drop_and_spill():
    labels = _cube_labels()
    dropped = ph.corrupt(labels, ph.Corruption("drop", 2))
    assert organ_voxel_count(dropped, 2) == 0
    spilled = ph.corrupt(labels, ph.Corruption("spill", 2, steps=1))
    assert organ_voxel_count(spilled, 2) == 1000 + 6 * 100
    with pytest.raises(ph.PhantomError):
        ph.corrupt(labels, ph.Corruption("drop", 9))


def test_elongate_increases_eccentricity():
    _, labels = ph.generate(sphere_spec(radius=6.0))
    before = eccentricity(labels, 2)
    out = ph.corrupt(labels, ph.Corruption("elongate", 2, length=8))
    assert eccentricity(out, 2) > before
    assert organ_voxel_count(out, 2) == organ_voxel_count(labels, 2) + 8


@pytest.mark.parametrize("corruption", [
    ph.Corruption("erode", 2, fraction=0.3),
    ph.Corruption("elongate", 2, length=5),
    ph.Corruption("drop", 2),
    ph.Corruption("spill", 2, steps=2),
])
def test_corruption_volume_direction(corruption):
    _, labels = ph.generate(sphere_spec())
    n0 = organ_voxel_count(labels, 2)
    n1 = organ_voxel_count(ph.corrupt(labels, corruption), 2)
    if corruption.kind == "spill":
        assert n1 > n0
    elif corruption.kind == "elongate":
        # the rod adds voxels; it is the only growth besides spill
        assert n1 >= n0
    else:
        assert n1 <= n0


@pytest.mark.parametrize("kwargs", [
    {"kind": "erode", "target": 2, "fraction": 0.0},
    {"kind": "erode", "target": 2, "fraction": 1.0},
    {"kind": "elongate", "target": 2, "length": 0},
    {"kind": "spill", "target": 2, "steps": 0},
    {"kind": "melt", "target": 2},
])
def test_corruption_validation(kwargs):
    with pytest.raises(ValueError):
        ph.Corruption(**kwargs)


def test_jitter_bounded():
    template = ph.abdomen_template()
    rng = np.random.default_rng(0)
    for _ in range(200):
        spec = ph.jitter_spec(template, rng)
        for o, t in zip(spec.organs, template.organs):
            ratio = np.asarray(o.semi_axes) / np.asarray(t.semi_axes)
            assert np.all(np.abs(ratio - 1) <= ph.JITTER)
            assert np.all(np.abs(np.subtract(o.center, t.center)) <= ph.JITTER * np.asarray(t.semi_axes))


def test_cohort_manifest_and_seeds(tmp_path):
    t = ph.mini_template()
    idx = [1, 4, 7]
    samples = ph.cohort(t, 10, idx, ph.default_corruptions(t, 3), seed=5)
    manifest = ph.write_cohort(samples, tmp_path, seed=5)
    assert sum(e["corrupted"] for e in manifest["samples"]) == 3
    assert [e["corruption"] for e in manifest["samples"] if e["corrupted"]] == ["erode", "elongate", "drop"]
    assert set(manifest["samples"][0]) == {"id", "intensity_path", "label_path", "corrupted", "corruption"}
    back = ph.read_manifest(tmp_path / "manifest.json")
    lab = read_nifti(ph.resolve(back, back["samples"][4]["label_path"]))
    assert lab == samples[4].labels

    again = ph.cohort(t, 10, idx, ph.default_corruptions(t, 3), seed=5)
    assert all(a.labels == b.labels for a, b in zip(samples, again))
    other = ph.cohort(t, 10, idx, ph.default_corruptions(t, 3), seed=6)
    assert any(a.labels != b.labels for a, b in zip(samples, other))

    # sample i is independent of cohort size (per-sample PRNG streams)
    single = ph.cohort_sample(t, 4, 5, ph.default_corruptions(t, 3)[1])
    assert single.labels == samples[4].labels


def test_cohort_rejects_bad_indices():
    t = ph.mini_template()
    with pytest.raises(ValueError):
        ph.cohort(t, 3, [3], [ph.Corruption("drop", 2)])
    with pytest.raises(ValueError):
        ph.cohort(t, 3, [0, 1], [ph.Corruption("drop", 2)])


def test_clean_cohort_false_positive_rate():
    t = ph.abdomen_template()
    rows = []
    for s in ph.cohort(t, 100, seed=11):
        r, _ = compute_features(s.labels, s.id, t.class_ids)
        rows.extend(r)
    cfg = SolfConfig(epsilon=2.0)
    verdicts = solf_verdicts(rows, solf_bounds(rows, cfg), cfg)
    flagged = {v.sample_id for v in verdicts if v.inaccurate}
    assert len(flagged) <= 2
