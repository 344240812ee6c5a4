import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import FAMILIES, central_diff, pass_fraction, rel_err
from reportseg.ballconv import BallConfig
from reportseg.losses import (
    EPS,
    AttenuationClassifier,
    VolumeLossConfig,
    attenuation_features,
    attenuation_loss,
    ball_loss,
    build_pseudo_mask,
    negative_organ_loss,
    pseudo_mask_loss,
    report_volume_loss,
    supervised_loss,
    volume_forgiving,
    volume_loss,
)
from reportseg.report import Attenuation, StructuredReport, TumorFinding
from reportseg.volgrid import LabelVolume


def forgiving_oracle(vs, vr, E=500.0, tau=0.1):
    lp = lambda a, b: abs(a - b) / (a + b + E)
    return max(lp(vs, vr) - lp((1 - tau) * vr, vr), 0.0)


def test_forgiving_zero_at_match():
    assert volume_forgiving(1000.0, 1000.0) == (0.0, 0.0)


def test_forgiving_worked_value():
    v, d = volume_forgiving(0.0, 1000.0)
    assert abs(v - 0.6250) <= 1e-6
    assert abs(1000 / 1500 - 100 / 2400 - 0.625) < 1e-12
    assert d < 0


def test_forgiving_inside_band():
    assert volume_forgiving(950.0, 1000.0) == (0.0, 0.0)


@settings(max_examples=300)
@given(st.floats(0, 5000), st.floats(1, 5000), st.floats(1, 1000), st.floats(0.01, 0.99))
def test_forgiving_matches_oracle(vs, vr, E, tau):
    v, _ = volume_forgiving(vs, vr, VolumeLossConfig(E=E, tau=tau))
    assert math.isclose(v, forgiving_oracle(vs, vr, E, tau), abs_tol=1e-12)


@settings(max_examples=200)
@given(st.floats(1, 1e5), st.floats(0, 1))
def test_forgiving_zero_on_lower_band(vr, frac):
    vs = vr * (0.9 + 0.1 * frac)
    assert volume_forgiving(vs, vr) == (0.0, 0.0)


def test_band_upper_edge_follows_symmetric_clamp():
    # the upper zero edge solves L'(V_s) = L'(0.9 V_r); above 1.1 V_r is not guaranteed zero
    vr, E, tau = 1000.0, 500.0, 0.1
    off = tau * vr / ((2 - tau) * vr + E)
    upper = vr * (1 + off) / (1 - off) + E * off / (1 - off)
    assert volume_forgiving(upper - 1e-6, vr)[0] == 0.0
    assert volume_forgiving(upper + 1e-3, vr)[0] > 0.0


def test_forgiving_derivative_matches_fd():
    for vs, vr in [(0.0, 1000.0), (2500.0, 1000.0), (300.0, 80.0)]:
        _, d = volume_forgiving(vs, vr)
        h = 1e-4
        fd = (volume_forgiving(vs + h, vr)[0] - volume_forgiving(vs - h, vr)[0]) / (2 * h) if vs > 0 else \
            (volume_forgiving(vs + h, vr)[0] - volume_forgiving(vs, vr)[0]) / h
        assert abs(d - fd) <= 1e-6


def test_volume_config_invariants():
    for kw in ({"E": 0}, {"tau": 0}, {"tau": 1}, {"V_min": 10, "V_max": 5}):
        with pytest.raises(ValueError):
            VolumeLossConfig(**kw)


def test_volume_loss_empty_prob_positive_organ():
    organ = np.zeros((8, 8, 8), bool)
    organ[2:6, 2:6, 2:6] = True
    p = np.zeros(organ.shape)
    r = volume_loss(p, organ, 1000.0, (1, 1, 1))
    assert r.diagnostics["L_bkg"] == 0.0
    assert abs(r.value - 0.625) <= 1e-6
    g = r.grad[organ]
    assert np.all(g < 0) and np.ptp(g) == 0
    assert np.all(r.grad[~organ] == 0)
    # one-sided differences at the prob=0 boundary
    idx = np.flatnonzero(organ.ravel())[:5]
    f = lambda x: volume_loss(x, organ, 1000.0, (1, 1, 1)).value
    h = 1e-4
    for i in idx:
        q = p.copy().ravel()
        q[i] = h
        fd = (f(q.reshape(p.shape)) - f(p)) / h
        assert rel_err(fd, r.grad.ravel()[i]) < 1e-3


def test_volume_loss_negative_path_zero():
    r = negative_organ_loss(np.zeros((5, 5, 5)))
    assert r.value == 0.0 and np.all(r.grad == 0)


def test_volume_loss_unknown_size_in_prior_range():
    organ = np.zeros((10, 10, 10), bool)
    organ[2:8, 2:8, 2:8] = True
    p = np.zeros(organ.shape)
    p[organ] = 300.0 / organ.sum()
    p[0, 0, 0] = 0.2
    r = volume_loss(p, organ, None, (1, 1, 1))
    assert abs(r.diagnostics["V_s"] - 300.0) < 1e-9
    assert r.diagnostics["L_forg"] == 0.0
    bkg = -np.log(1 - 0.2) / p.size
    assert abs(r.value - bkg) < 1e-12
    assert np.all(r.grad[organ] == 0)
    assert r.grad[0, 0, 0] > 0


def test_volume_loss_unknown_size_below_prior_pushes_up():
    organ = np.zeros((10, 10, 10), bool)
    organ[2:8, 2:8, 2:8] = True
    r = volume_loss(np.zeros(organ.shape), organ, None, (1, 1, 1))
    assert r.diagnostics["V_target"] == 65.0
    assert r.value > 0 and np.all(r.grad[organ] < 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.9, 1.0))
def test_zero_at_consistency(seed, frac):
    rng = np.random.default_rng(seed)
    organ = np.zeros((8, 8, 8), bool)
    organ[1:7, 2:6, 1:5] = True
    p = np.where(organ, rng.random(organ.shape), 0.0)
    V_s = p.sum() * 8.0
    r = volume_loss(p, organ, V_s / frac, (2, 2, 2))
    assert r.value == 0.0
    assert np.all(r.grad == 0)


def test_nonfinite_input_names_term():
    organ = np.ones((3, 3, 3), bool)
    p = np.full((3, 3, 3), 0.1)
    p[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="volume"):
        volume_loss(p, organ, 10.0, (1, 1, 1))


def test_supervised_perfect_match():
    gt = np.zeros((6, 6, 6), bool)
    gt[1:4, 1:4, 1:4] = True
    r = supervised_loss(gt.astype(float), gt)
    assert r.diagnostics["dice"] < 1e-6
    assert r.diagnostics["ce"] <= -math.log(1 - EPS) + 1e-12


def test_supervised_half_empty_gt():
    r = supervised_loss(np.full((4, 4, 4), 0.5), np.zeros((4, 4, 4), bool))
    assert abs(r.diagnostics["ce"] - math.log(2)) < 1e-12


def test_supervised_shape_mismatch():
    with pytest.raises(ValueError):
        supervised_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3), bool))


def labels_two_organs():
    lab = np.zeros((16, 16, 16), np.int32)
    lab[2:8, 2:14, 2:14] = 1
    lab[9:15, 2:14, 2:14] = 2
    return LabelVolume(lab, (1, 1, 1), {1: "spleen", 2: "bladder"})


def test_ball_loss_negative_report_half_prob():
    lv = labels_two_organs()
    p = np.full((2, 16, 16, 16), 0.5)
    rep = StructuredReport(negative_organs=("spleen", "bladder"))
    r = ball_loss(p, ["spleen", "bladder"], lv, rep)
    assert abs(r.value - math.log(2)) < 1e-12
    assert np.all(r.grad[0][lv.labels == 1] > 0) and np.all(r.grad[1][lv.labels == 2] > 0)


def test_ball_loss_perfect_pseudo_mask_match():
    lv = labels_two_organs()
    p = np.zeros((1, 16, 16, 16))
    p[0, 4:7, 6:9, 6:9] = 0.9
    rep = StructuredReport((TumorFinding("spleen", (4.0,)),))
    r = ball_loss(p, ["spleen"], lv, rep, dilation_mm=0.0)
    pm = r.diagnostics["pseudo"]["spleen"]
    q = np.where(pm.positive, 1.0, 0.0)[None]
    r2 = ball_loss(q, ["spleen"], lv, rep, dilation_mm=0.0)
    pm2 = r2.diagnostics["pseudo"]["spleen"]
    assert np.array_equal(pm2.positive, pm.positive)
    assert r2.value < 1e-4


def test_ball_pseudo_mask_size_and_fd(rng):
    sp = (1.0, 1.0, 1.0)
    shape = (16, 16, 16)
    p = rng.uniform(0.02, 0.3, shape)
    g = np.indices(shape)
    blob = ((g - 8) ** 2).sum(0) <= 16
    p[blob] = 0.9
    organ = ((g - 8) ** 2).sum(0) <= 49
    f10 = TumorFinding("o", (10.0,))
    pm = build_pseudo_mask(p, organ, [f10], sp)
    assert pm.positive.sum() == round(math.pi * 1000 / 6)
    cfg = BallConfig()
    r = pseudo_mask_loss(p, pm, cfg)
    idx = rng.choice(np.flatnonzero(~pm.ignore.ravel()), 40, replace=False)
    fd = central_diff(lambda x: pseudo_mask_loss(x, pm, cfg).value, p, idx)
    assert np.all(rel_err(r.grad.ravel()[idx], fd) <= 1e-4)
    assert np.all(r.grad[pm.ignore] == 0)


def test_pseudo_mask_partition_and_counts(rng):
    shape = (16, 16, 16)
    p = rng.random(shape)
    organ = np.zeros(shape, bool)
    organ[2:14, 2:14, 2:14] = True
    fs = [TumorFinding("o", (6.0,)), TumorFinding("o", (4.0, 3.0)), TumorFinding("o", (3.0,))]
    pm = build_pseudo_mask(p, organ, fs, (1, 1, 1))
    assert not np.any(pm.positive & pm.ignore)
    assert np.all(pm.positive <= organ)
    assert len(pm.tumors) == len(fs)
    expected = sorted(round(v) for v in (math.pi * 216 / 6, math.pi * 4 * 3 * 3.5 / 6, math.pi * 27 / 6))
    assert sorted(t.n for t in pm.tumors) == expected


def test_relaxed_variant_ignores_organ(rng):
    shape = (12, 12, 12)
    organ = np.zeros(shape, bool)
    organ[2:10, 2:10, 2:10] = True
    p = rng.random(shape)
    pm = build_pseudo_mask(p, organ, [TumorFinding("o")], (1, 1, 1))
    assert pm.tumors[0].n == round(math.pi * 125 / 6)
    assert np.all(pm.ignore | pm.positive >= organ)
    pm = build_pseudo_mask(p, organ, [TumorFinding("o", (4.0,))], (1, 1, 1), count_known=False)
    assert np.all(pm.ignore | pm.positive >= organ)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.001, 0.5))
def test_negative_organ_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 0.5, (5, 5, 5))
    i = tuple(rng.integers(0, 5, 3))
    q = p.copy()
    q[i] += bump
    assert negative_organ_loss(q).value >= negative_organ_loss(p).value


def test_attenuation_constant_ct_zero_contrast(rng):
    organ = np.zeros((8, 8, 8), bool)
    organ[1:7, 1:7, 1:7] = True
    p = rng.uniform(0.1, 0.9, organ.shape)
    feats, jac = attenuation_features(p, np.full(organ.shape, 0.7), organ)
    assert abs(feats[0] - feats[2]) < 1e-12
    assert all(np.allclose(j, 0) for j in jac)
    r, _ = attenuation_loss(p, np.full(organ.shape, 0.7), organ, Attenuation.HYPO, AttenuationClassifier())
    assert np.allclose(r.grad, 0)


def test_attenuation_unknown_and_empty_skip():
    organ = np.ones((4, 4, 4), bool)
    r, g = attenuation_loss(np.full((4, 4, 4), 0.5), np.zeros((4, 4, 4)), organ, Attenuation.UNKNOWN,
                            AttenuationClassifier())
    assert g is None and r.value == 0
    r, g = attenuation_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), organ, Attenuation.HYPO,
                            AttenuationClassifier())
    assert g is None and r.diagnostics["reason"] == "no tumor mass"


def synthetic_case(rng, tumor_hu, organ_hu=100.0):
    shape = (12, 12, 12)
    g = np.indices(shape)
    organ = ((g - 6) ** 2).sum(0) <= 25
    tumor = ((g - np.reshape(rng.integers(5, 8, 3), (3, 1, 1, 1))) ** 2).sum(0) <= 4
    ct = np.where(organ, organ_hu, -100.0) + 5 * rng.standard_normal(shape)
    ct[tumor] = tumor_hu + 5 * rng.standard_normal(tumor.sum())
    p = np.clip(np.where(tumor, 0.9, 0.05) + 0.02 * rng.standard_normal(shape), 0.01, 0.99)
    return p, (ct - 50) / 100, organ


def test_well_trained_attenuation_classifier_below_chance(rng):
    clf = AttenuationClassifier(rng=np.random.default_rng(0))
    classes = [(Attenuation.HYPO, (20, 60)), (Attenuation.HYPER, (140, 180)), (Attenuation.MIXED_OR_ISO, (95, 105))]
    data = []
    for _ in range(60):
        for lab, (lo, hi) in classes:
            data.append((synthetic_case(rng, rng.uniform(lo, hi)), lab))
    for _ in range(30):
        for (p, ct, organ), lab in data:
            _, g = attenuation_loss(p, ct, organ, lab, clf)
            for k in clf.params:
                clf.params[k] -= 0.05 * g[k]
    p, ct, organ = synthetic_case(rng, 40.0)
    r, _ = attenuation_loss(p, ct, organ, Attenuation.HYPO, clf)
    assert r.value < math.log(3)


def test_report_volume_loss_mean_over_terms():
    lv = labels_two_organs()
    p = np.zeros((2, 16, 16, 16))
    rep = StructuredReport((TumorFinding("spleen", (10.0,)),), ("bladder",))
    r = report_volume_loss(p, ["spleen", "bladder"], lv, rep, dilation_mm=0.0)
    V_r = math.pi * 1000 / 6
    assert abs(r.value - (forgiving_oracle(0, V_r) + 0.0) / 2) < 1e-12
    assert r.diagnostics["V_s:spleen"] == 0.0


def test_unlabeled_organs_excluded():
    lv = labels_two_organs()
    p = np.full((2, 16, 16, 16), 0.3)
    rep = StructuredReport(negative_organs=("spleen",))
    r = ball_loss(p, ["spleen", "bladder"], lv, rep)
    assert np.all(r.grad[1] == 0)
    r = report_volume_loss(p, ["spleen", "bladder"], lv, rep)
    assert np.all(r.grad[1] == 0)


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_gradients_match_central_differences(name):
    frac, n = pass_fraction(FAMILIES[name], 8, seed=7)
    assert frac >= 0.99, (name, frac, n)
