import json
import math

import numpy as np
import pytest

from reportseg.phantom import (
    GenerationError,
    PhantomSpec,
    generate,
    load_corpus,
    load_manifest,
    with_overrides,
    write_corpus,
)
from reportseg.report import Attenuation, estimate_volume
from reportseg.volgrid import BinaryMask, dilate

SMALL = PhantomSpec(shape=(32, 32, 32), organs=tuple(
    type(o)(o.name, tuple(c * 32 / 48 for c in o.center), tuple(r * 0.8 for r in o.radii_mm), o.base_hu)
    for o in PhantomSpec().organs[:2]))


def test_no_tumors_all_negative():
    case = generate(with_overrides(PhantomSpec(), organ_tumor_prob=0.0), seed=1)
    assert case.report.findings == ()
    assert set(case.report.negative_organs) == set(PhantomSpec().organ_names)
    assert all(not m.mask.any() for m in case.gt_tumor_masks.values())


def test_healthy_flag_all_negative():
    case = generate(PhantomSpec(), seed=5, healthy=True)
    assert case.healthy and case.report.findings == ()


def test_deterministic_per_seed():
    a, b = generate(PhantomSpec(), 11), generate(PhantomSpec(), 11)
    assert a.ct.data.tobytes() == b.ct.data.tobytes()
    assert np.array_equal(a.organs.labels, b.organs.labels)
    assert a.report == b.report
    c = generate(PhantomSpec(), 12)
    assert a.ct.data.tobytes() != c.ct.data.tobytes()


def test_diameter_noise_monte_carlo():
    spec = with_overrides(PhantomSpec(), sigma_d=0.05, p_nosize=0.0, noise_hu=0.0)
    rel = []
    for s in range(100):
        case = generate(spec, s)
        for f, t in zip(case.report.findings, case.truth):
            # the report keeps the leading true diameters; pair both in descending order
            true = sorted(t.diameters_mm[: len(f.diameters_mm)], reverse=True)
            rel += [abs(a - b) / b for a, b in zip(f.diameters_mm, true)]
    expected = 0.05 * math.sqrt(2 / math.pi)
    assert abs(expected - 0.0399) < 1e-3
    assert abs(np.mean(rel) - expected) <= 0.01


def test_invariants_over_corpus():
    spec = PhantomSpec()
    for s in range(12):
        case = generate(spec, s)
        assert case.ct.data.min() >= spec.hu_clip[0] and case.ct.data.max() <= spec.hu_clip[1]
        for t in case.truth:
            lo, hi = spec.diameter_range_mm
            assert lo <= t.diameters_mm[0] <= hi
            assert t.diameters_mm[0] / t.diameters_mm[2] <= spec.max_axis_ratio + 1e-9
        for organ, m in case.gt_tumor_masks.items():
            om = case.organs.mask(organ)
            assert np.all(m.mask <= om.mask)
            assert np.all(m.mask <= dilate(om, 20.0).mask)
            has = case.report.status(organ)
            assert has == bool(m.mask.any())
            if m.mask.any():
                assert m.mask.sum() * 8.0 >= spec.min_tumor_mm3


def test_zero_noise_volume_matches_voxelization():
    spec = with_overrides(PhantomSpec(), sigma_d=0.0, p_nosize=0.0, n_diameter_weights=(0, 0, 1), noise_hu=0.0)
    v = float(np.prod(spec.spacing))
    shell = math.sqrt(3) * spec.spacing[0] / 2
    checked = 0
    for s in range(10):
        case = generate(spec, s)
        for f, t in zip(case.report.findings, case.truth):
            est = estimate_volume(f)
            d = np.asarray(t.diameters_mm)
            assert abs(est - math.pi * np.prod(d) / 6) <= 0.01 * est
            outer = math.pi * np.prod(d + 2 * shell) / 6
            inner = math.pi * np.prod(np.maximum(d - 2 * shell, 0)) / 6
            assert inner <= t.n_voxels * v <= outer
            checked += 1
    assert checked > 5


def test_hypo_tumors_darker_than_organ():
    spec = with_overrides(PhantomSpec(), noise_hu=10.0, p_hypo=1.0)
    base = {o.name: o.base_hu for o in spec.organs}
    for s in range(6):
        case = generate(spec, s)
        for organ, m in case.gt_tumor_masks.items():
            if m.mask.any():
                assert case.ct.data[m.mask].mean() < base[organ]
        assert all(t.attenuation == Attenuation.HYPO for t in case.truth)


def test_infeasible_placement_raises():
    spec = with_overrides(PhantomSpec(), diameter_range_mm=(100.0, 120.0), max_retries=5)
    with pytest.raises(GenerationError):
        generate(spec, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(diameter_range_mm=(2.0, 10.0))
    with pytest.raises(TypeError):
        PhantomSpec.from_dict({"bogus": 1})


def test_spec_dict_round_trip():
    d = json.loads(json.dumps(PhantomSpec().to_dict()))
    assert PhantomSpec.from_dict(d) == PhantomSpec()


def test_balanced_corpus_and_loader(tmp_path):
    m = write_corpus(SMALL, 4, tmp_path, seed=3)
    assert [c["healthy"] for c in m["cases"]].count(True) == 2
    assert [c["healthy"] for c in m["cases"]].count(False) == 2
    cases = load_corpus(tmp_path / "manifest.json")
    assert len(cases) == 4
    assert sum(not c.report.findings for c in cases) == 2
    assert cases[1].ct.spacing == SMALL.spacing


def test_splits_and_regeneration_checksums(tmp_path):
    m1 = write_corpus(SMALL, 6, tmp_path / "a", seed=9, n_test=2)
    assert [c["split"] for c in m1["cases"]] == ["train"] * 4 + ["test"] * 2
    assert len(load_corpus(tmp_path / "a", split="test")) == 2
    loaded, _ = load_manifest(tmp_path / "a")
    spec = PhantomSpec.from_dict(loaded["spec"])
    m2 = write_corpus(spec, 6, tmp_path / "b", seed=loaded["seed"], n_test=2)
    assert [c["checksums"] for c in m1["cases"]] == [c["checksums"] for c in m2["cases"]]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
