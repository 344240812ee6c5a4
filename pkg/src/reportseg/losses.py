"""Report-supervised and mask-supervised losses with analytic gradients.

Every loss takes post-sigmoid probabilities and returns a :class:`LossResult`
whose ``grad`` is the derivative with respect to those probabilities. The
caller composes the sigmoid derivative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ballconv import BallConfig, LocalizedTumor, localize_tumors
from .report import Attenuation, StructuredReport, TumorFinding, reported_volume_per_organ
from .volgrid import LabelVolume, _dilate_array, slice_band

EPS = 1e-6          # probability clamp inside logarithms
DICE_SMOOTH = 1e-5
STD_EPS = 1e-6      # variance floor for attenuation statistics


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class VolumeLossConfig:
    E: float = 500.0
    tau: float = 0.10
    V_min: float = 65.0
    V_max: float = 904_779.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not self.V_min < self.V_max:
            raise ValueError("V_min must be below V_max")


def _check_finite(name: str, *values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite value in {name}")


# ---------------------------------------------------------------------------
# Volume loss
# ---------------------------------------------------------------------------


def _relative_gap(vs: float, vr: float, E: float) -> tuple[float, float]:
    """|vs - vr| / (vs + vr + E) and its derivative in vs."""
    denom = vs + vr + E
    gap = abs(vs - vr)
    return gap / denom, np.sign(vs - vr) / denom - gap / denom**2


def volume_forgiving(V_s: float, V_r: float, cfg: VolumeLossConfig = VolumeLossConfig()) -> tuple[float, float]:
    """Tolerant relative volume mismatch; returns ``(value, d value / d V_s)``."""
    raw, d_raw = _relative_gap(V_s, V_r, cfg.E)
    offset, _ = _relative_gap((1.0 - cfg.tau) * V_r, V_r, cfg.E)
    value = raw - offset
    if value <= 0.0:
        return 0.0, 0.0
    return value, d_raw


def background_ce(prob: np.ndarray, region: np.ndarray) -> tuple[float, np.ndarray]:
    """-mean ln(1 - t (1 - o)): tumor probability outside ``region``."""
    outside = 1.0 - region.astype(np.float64)
    t = prob * outside
    q = 1.0 - t
    # zero gradient on the clamp boundaries, as in the plain CE terms
    clamped = (q < EPS) | (t <= EPS)
    value = -np.log(np.maximum(q, EPS)).mean() + 0.0
    grad = np.where(clamped, 0.0, outside / np.maximum(q, EPS)) / prob.size
    return float(value), grad


def volume_loss(
    prob: np.ndarray,
    organ_mask: np.ndarray,
    V_r: float | None,
    spacing: Sequence[float],
    cfg: VolumeLossConfig = VolumeLossConfig(),
) -> LossResult:
    """Volume mismatch inside the (dilated, slice-gated) organ plus outside-organ CE.

    ``V_r=None`` selects the prior-based variant: the target is the segmented
    volume clamped to ``[V_min, V_max]``.
    """
    prob = np.asarray(prob, dtype=np.float64)
    o = np.asarray(organ_mask, dtype=np.float64)
    v = float(np.prod(spacing))
    V_s = v * float((prob * o).sum())
    target = V_r if V_r is not None else min(max(V_s, cfg.V_min), cfg.V_max)
    forg, d_forg = volume_forgiving(V_s, target, cfg)
    bkg, g_bkg = background_ce(prob, o > 0)
    _check_finite("volume forgiving term", forg, d_forg)
    _check_finite("volume background term", bkg, g_bkg)
    grad = g_bkg + d_forg * v * o
    return LossResult(
        forg + bkg,
        grad,
        {"V_s": V_s, "V_r": V_r, "V_target": target, "L_forg": forg, "L_bkg": bkg,
         "band_active": forg == 0.0},
    )


def negative_organ_loss(prob: np.ndarray) -> LossResult:
    """Cross-entropy toward 0 over the whole patch (organ reported tumor-free)."""
    value, grad = background_ce(np.asarray(prob, dtype=np.float64), np.zeros(prob.shape, bool))
    _check_finite("negative-organ CE", value)
    return LossResult(value, grad, {"L_neg": value})


# ---------------------------------------------------------------------------
# Dice / cross-entropy building blocks
# ---------------------------------------------------------------------------


def soft_dice(prob: np.ndarray, target: np.ndarray, weight: np.ndarray | None = None,
              smooth: float = DICE_SMOOTH) -> tuple[float, np.ndarray]:
    m = np.ones_like(prob) if weight is None else weight.astype(np.float64)
    g = target.astype(np.float64)
    inter = (m * prob * g).sum()
    denom = (m * prob).sum() + (m * g).sum() + smooth
    num = 2.0 * inter + smooth
    grad = -(2.0 * m * g * denom - num * m) / denom**2
    return float(1.0 - num / denom), grad


def _bce_terms(prob: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.clip(prob, EPS, 1.0 - EPS)
    inside = (prob > EPS) & (prob < 1.0 - EPS)
    ell = -(g * np.log(p) + (1.0 - g) * np.log(1.0 - p))
    d_ell = np.where(inside, -g / p + (1.0 - g) / (1.0 - p), 0.0)
    return ell, d_ell


def bce(prob: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    ell, d_ell = _bce_terms(prob, target.astype(np.float64))
    return float(ell.mean()), d_ell / prob.size


def confidence_weighted_ce(prob: np.ndarray, target: np.ndarray, weight: np.ndarray,
                           base: float = 0.5) -> tuple[float, np.ndarray]:
    """CE with per-voxel weight ``base + t`` normalized over penalized voxels.

    The weight depends on ``t``; the gradient includes that dependence.
    """
    m = weight.astype(np.float64)
    ell, d_ell = _bce_terms(prob, target.astype(np.float64))
    w = m * (base + prob)
    W = w.sum()
    if W <= 0:
        return 0.0, np.zeros_like(prob)
    value = (w * ell).sum() / W
    grad = (w * d_ell + m * ell - m * value) / W
    return float(value), grad


def supervised_loss(prob: np.ndarray, gt_mask: np.ndarray) -> LossResult:
    """Soft dice plus voxel-mean binary cross-entropy against a ground-truth mask."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {prob.shape} vs {gt_mask.shape}")
    d, gd = soft_dice(prob, gt_mask)
    c, gc = bce(prob, gt_mask)
    _check_finite("supervised loss", d, c)
    return LossResult(d + c, gd + gc, {"dice": d, "ce": c})


# ---------------------------------------------------------------------------
# Ball loss
# ---------------------------------------------------------------------------


@dataclass
class PseudoMask:
    positive: np.ndarray
    ignore: np.ndarray
    tumors: list = field(default_factory=list)
    infeasible: int = 0

    @property
    def negative(self) -> np.ndarray:
        return ~(self.positive | self.ignore)


def build_pseudo_mask(
    prob: np.ndarray,
    region: np.ndarray,
    findings: Sequence[TumorFinding],
    spacing: Sequence[float],
    cfg: BallConfig = BallConfig(),
    count_known: bool = True,
) -> PseudoMask:
    """Localize the findings and turn them into a positive/negative/ignore target."""
    located = localize_tumors(prob, region, findings, spacing, cfg)
    positive = np.zeros(prob.shape, dtype=bool)
    ignore = np.zeros(prob.shape, dtype=bool)
    tumors: list[LocalizedTumor] = [t for t in located if t is not None]
    for t in tumors:
        positive[t.voxels[:, 0], t.voxels[:, 1], t.voxels[:, 2]] = True
    for t in tumors:
        blob = np.zeros(prob.shape, dtype=bool)
        blob[t.voxels[:, 0], t.voxels[:, 1], t.voxels[:, 2]] = True
        ignore |= _dilate_array(blob, cfg.margin_frac * t.diameter_mm, spacing)
    relaxed = (not count_known) or any(f.max_diameter is None for f in findings)
    if relaxed:
        ignore |= region
    ignore &= ~positive
    return PseudoMask(positive, ignore, tumors, sum(t is None for t in located))


def pseudo_mask_loss(prob: np.ndarray, pseudo: PseudoMask, cfg: BallConfig = BallConfig()) -> LossResult:
    """Dice + confidence-weighted CE against a fixed pseudo-mask."""
    prob = np.asarray(prob, dtype=np.float64)
    m = ~pseudo.ignore
    d, gd = soft_dice(prob, pseudo.positive, m)
    c, gc = confidence_weighted_ce(prob, pseudo.positive, m, cfg.weight_base)
    _check_finite("ball loss", d, c)
    return LossResult(d + c, gd + gc, {"dice": d, "ce": c})


# ---------------------------------------------------------------------------
# Report-level aggregation
# ---------------------------------------------------------------------------


def location_region(
    labels: LabelVolume,
    location: str,
    findings: Sequence[TumorFinding] = (),
    dilation_mm: float = 20.0,
    gate: bool = True,
) -> np.ndarray:
    """Dilated location mask, zeroed at heights away from every reported slice."""
    mask = labels.labels == labels.code(location)
    mask = _dilate_array(mask, dilation_mm, labels.spacing)
    if gate:
        sliced = [(f.slice, f.max_diameter) for f in findings
                  if f.slice is not None and f.max_diameter is not None]
        keep = slice_band(mask.shape[0], sliced, labels.spacing[0])
        if keep is not None:
            mask &= keep[:, None, None]
    return mask


def _labeled_terms(report: StructuredReport, classes: Sequence[str], labels: LabelVolume):
    names = set(labels.names.values())
    positives = [o for o in report.positive_organs if o in classes]
    negatives = [o for o in report.negative_organs if o in classes]
    locations: dict[str, list[TumorFinding]] = {}
    for f in report.findings:
        if f.organ in positives and f.location in names:
            locations.setdefault(f.location, []).append(f)
    return locations, negatives


def report_volume_loss(
    prob: np.ndarray,
    classes: Sequence[str],
    labels: LabelVolume,
    report: StructuredReport,
    cfg: VolumeLossConfig = VolumeLossConfig(),
    dilation_mm: float = 20.0,
) -> LossResult:
    """Volume loss over all labeled locations of a report; mean over terms.

    ``prob`` has one channel per tumor class, ordered as ``classes``.
    """
    grad = np.zeros_like(prob, dtype=np.float64)
    locations, negatives = _labeled_terms(report, classes, labels)
    volumes = {rv.organ: rv.volume_mm3 for rv in reported_volume_per_organ(report)}
    terms, diag = [], {}
    for loc, fs in locations.items():
        c = classes.index(fs[0].organ)
        region = location_region(labels, loc, fs, dilation_mm)
        r = volume_loss(prob[c], region, volumes.get(loc), labels.spacing, cfg)
        terms.append(r.value)
        grad[c] += r.grad
        diag[f"V_s:{loc}"] = r.diagnostics["V_s"]
    for organ in negatives:
        c = classes.index(organ)
        r = negative_organ_loss(prob[c])
        terms.append(r.value)
        grad[c] += r.grad
    if not terms:
        return LossResult(0.0, grad, diag)
    n = len(terms)
    return LossResult(sum(terms) / n, grad / n, diag)


def ball_loss(
    prob: np.ndarray,
    classes: Sequence[str],
    labels: LabelVolume,
    report: StructuredReport,
    cfg: BallConfig = BallConfig(),
    dilation_mm: float = 20.0,
) -> LossResult:
    """Ball loss for a report: pseudo-mask dice+CE per positive location and
    CE toward 0 per negative organ; mean over terms."""
    grad = np.zeros_like(prob, dtype=np.float64)
    locations, negatives = _labeled_terms(report, classes, labels)
    terms, diag = [], {"infeasible": 0, "pseudo": {}}
    for loc, fs in locations.items():
        c = classes.index(fs[0].organ)
        region = location_region(labels, loc, fs, dilation_mm, gate=False)
        pm = build_pseudo_mask(prob[c], region, fs, labels.spacing, cfg,
                               report.is_count_known(fs[0].organ))
        diag["infeasible"] += pm.infeasible
        if not pm.tumors:
            continue
        r = pseudo_mask_loss(prob[c], pm, cfg)
        terms.append(r.value)
        grad[c] += r.grad
        diag["pseudo"][loc] = pm
    for organ in negatives:
        c = classes.index(organ)
        value, g = bce(prob[c], np.zeros(prob[c].shape))
        terms.append(value)
        grad[c] += g
    if not terms:
        return LossResult(0.0, grad, diag)
    n = len(terms)
    return LossResult(sum(terms) / n, grad / n, diag)


# ---------------------------------------------------------------------------
# Attenuation loss
# ---------------------------------------------------------------------------

ATTENUATION_CLASSES = (Attenuation.HYPO, Attenuation.HYPER, Attenuation.MIXED_OR_ISO)


class AttenuationClassifier:
    """4 -> hidden (tanh) -> 3 perceptron over tumor/organ intensity statistics."""

    def __init__(self, hidden: int = 128, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(4), (4, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 3)),
            "b2": np.zeros(3),
        }

    def logits(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        return np.tanh(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]

    def loss_and_grads(self, x: np.ndarray, label: int) -> tuple[float, dict, np.ndarray]:
        """Cross-entropy for one feature vector; grads for params and input."""
        p = self.params
        h = np.tanh(x @ p["W1"] + p["b1"])
        z = h @ p["W2"] + p["b2"]
        z = z - z.max()
        logp = z - np.log(np.exp(z).sum())
        loss = -logp[label]
        dz = np.exp(logp)
        dz[label] -= 1.0
        dh = p["W2"] @ dz
        da = dh * (1.0 - h**2)
        grads = {"W1": np.outer(x, da), "b1": da, "W2": np.outer(h, dz), "b2": dz}
        return float(loss), grads, p["W1"] @ da


def organ_attenuation(findings: Sequence[TumorFinding]) -> Attenuation:
    """Organ-level label: all hypo, all hyper, otherwise mixed; unknown if any is unknown."""
    atts = {f.attenuation for f in findings}
    if not atts or Attenuation.UNKNOWN in atts:
        return Attenuation.UNKNOWN
    if atts == {Attenuation.HYPO}:
        return Attenuation.HYPO
    if atts == {Attenuation.HYPER}:
        return Attenuation.HYPER
    return Attenuation.MIXED_OR_ISO


def _weighted_stats(w: np.ndarray, x: np.ndarray):
    """Weighted mean/std and their derivatives with respect to the weights."""
    W = w.sum()
    mean = (w * x).sum() / W
    dev = x - mean
    var = (w * dev**2).sum() / W
    std = np.sqrt(var + STD_EPS)
    d_mean = dev / W
    d_std = (dev**2 - var) / W / (2.0 * std)
    return mean, std, d_mean, d_std


def attenuation_features(prob, ct, organ_mask, hard=False, min_weight=1e-3):
    """(features, d features / d prob as 4 arrays) or None when no tumor mass."""
    o = organ_mask.astype(np.float64)
    t = (prob > 0.5).astype(np.float64) if hard else prob
    wt, wo = t * o, (1.0 - t) * o
    if wt.sum() < min_weight or wo.sum() < min_weight:
        return None
    mt, st, dmt, dst = _weighted_stats(wt, ct)
    mo, so, dmo, dso = _weighted_stats(wo, ct)
    feats = np.array([mt, st, mo, so])
    if hard:
        jac = [np.zeros_like(prob)] * 4
    else:
        jac = [dmt * o, dst * o, -dmo * o, -dso * o]
    return feats, jac


def attenuation_loss(
    prob: np.ndarray,
    ct: np.ndarray,
    organ_mask: np.ndarray,
    label: Attenuation,
    classifier: AttenuationClassifier,
    hard: bool = False,
) -> tuple[LossResult, dict | None]:
    """Attenuation classification loss; returns (result, classifier grads)."""
    prob = np.asarray(prob, dtype=np.float64)
    zero = LossResult(0.0, np.zeros_like(prob), {"skipped": True})
    if label == Attenuation.UNKNOWN:
        return zero, None
    got = attenuation_features(prob, np.asarray(ct, dtype=np.float64), organ_mask, hard)
    if got is None:
        zero.diagnostics["reason"] = "no tumor mass"
        return zero, None
    feats, jac = got
    loss, grads, dx = classifier.loss_and_grads(feats, ATTENUATION_CLASSES.index(label))
    grad = sum(g * j for g, j in zip(dx, jac))
    _check_finite("attenuation loss", loss, grad)
    return LossResult(loss, grad, {"features": feats, "skipped": False}), grads


def report_attenuation_loss(
    prob: np.ndarray,
    ct: np.ndarray,
    classes: Sequence[str],
    labels: LabelVolume,
    report: StructuredReport,
    classifier: AttenuationClassifier,
    hard: bool = False,
) -> tuple[LossResult, dict]:
    grad = np.zeros_like(prob, dtype=np.float64)
    cgrads = {k: np.zeros_like(v) for k, v in classifier.params.items()}
    locations, _ = _labeled_terms(report, classes, labels)
    terms = []
    for loc, fs in locations.items():
        label = organ_attenuation(fs)
        c = classes.index(fs[0].organ)
        r, g = attenuation_loss(prob[c], ct, labels.labels == labels.code(loc), label, classifier, hard)
        if g is None:
            continue
        terms.append(r.value)
        grad[c] += r.grad
        for k in cgrads:
            cgrads[k] += g[k]
    if not terms:
        return LossResult(0.0, grad, {"terms": 0}), cgrads
    n = len(terms)
    return LossResult(sum(terms) / n, grad / n, {"terms": n}), {k: v / n for k, v in cgrads.items()}

