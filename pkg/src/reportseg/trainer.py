"""Patch sampling, report/mask-supervised training, evaluation and active-learning ranking."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .ballconv import BallConfig
from .evalkit import DetectionOutcome, DetectionThresholds, OverlapScore, detect, detection_metrics, dsc_nsd
from .losses import (
    AttenuationClassifier,
    VolumeLossConfig,
    ball_loss,
    report_attenuation_loss,
    report_volume_loss,
    supervised_loss,
)
from .model import SegModel
from .optim import AdamW, clip_grad_norm, warmup_poly_lr
from .phantom import LoadedCase
from .report import StructuredReport, TumorFinding
from .volgrid import LabelVolume


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    w_sup: float = 1.0
    w_vol: float = 0.1
    w_ball: float = 0.1
    w_att: float = 0.01
    lr: float = 1e-4
    weight_decay: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_epochs: int = 5
    epochs: int = 50
    batches_per_epoch: int = 1000
    poly_power: float = 0.9
    clip_norm: float = 1.0
    batch_size: int = 4
    patch: tuple[int, int, int] = (32, 32, 32)
    hu_clip: tuple[float, float] = (-991.0, 500.0)
    norm_center: float = 50.0
    norm_scale: float = 100.0
    p_tumor_organ: float = 0.9
    mask_fraction: float = 0.5
    dilation_mm: float = 20.0
    features: int = 8
    out_bias: float = -2.0
    att_hidden: int = 128
    att_hard: bool = False
    deep_supervision: bool = True
    warm_start_steps: int = 0          # organ-mask pretraining steps before report training
    warm_start_lr: float = 1e-2
    seed: int = 0
    volume: VolumeLossConfig = field(default_factory=VolumeLossConfig)
    ball: BallConfig = field(default_factory=BallConfig)

    def __post_init__(self):
        for k in ("w_sup", "w_vol", "w_ball", "w_att"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not 0 <= self.mask_fraction <= 1 or not 0 <= self.p_tumor_organ <= 1:
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.batches_per_epoch

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Laptop-scale preset used for the phantom experiments."""
        # exact phantom organ masks need little dilation; a larger attenuation weight
        # pulls balls onto darker/brighter regions instead of a fixed spot near the organ edge
        base = dict(lr=5e-3, epochs=100, batches_per_epoch=20, warmup_epochs=1, batch_size=4,
                    patch=(24, 24, 24), dilation_mm=4.0, w_att=0.3)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if "volume" in d and isinstance(d["volume"], dict):
            d["volume"] = VolumeLossConfig(**d["volume"])
        if "ball" in d and isinstance(d["ball"], dict):
            d["ball"] = BallConfig(**d["ball"])
        for k in ("betas", "patch", "hu_clip"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def normalize_ct(ct: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    lo, hi = cfg.hu_clip
    return ((np.clip(ct, lo, hi) - cfg.norm_center) / cfg.norm_scale).astype(np.float32)


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


@dataclass
class PatchSample:
    scan_id: str
    ct: np.ndarray               # normalized
    labels: LabelVolume
    report: StructuredReport
    gt: np.ndarray | None        # (C, h, w, l) or None for report samples
    target: str
    origin: tuple[int, int, int]


def class_names(labels: LabelVolume) -> list[str]:
    return [labels.names[k] for k in sorted(labels.names)]


def choose_target(report: StructuredReport, organs: Sequence[str], p_tumor: float, rng) -> str:
    positives = [o for o in organs if report.status(o)]
    others = [o for o in organs if o not in positives]
    if positives and (not others or rng.random() < p_tumor):
        return positives[rng.integers(len(positives))]
    return others[rng.integers(len(others))]


def patch_origin(bbox_lo, bbox_hi, shape, patch, rng) -> tuple[int, int, int]:
    origin = []
    for lo, hi, n, p in zip(bbox_lo, bbox_hi, shape, patch):
        if hi - lo + 1 > p or p > n:
            raise ValueError(f"organ extent {hi - lo + 1} does not fit patch {p} in volume {n}")
        first, last = max(0, hi - p + 1), min(lo, n - p)
        origin.append(int(rng.integers(first, last + 1)))
    return tuple(origin)


def crop_report(report: StructuredReport, target: str, origin_h: int, height: int) -> StructuredReport:
    """Target organ's findings (slices shifted into the patch) plus all negative organs."""
    findings = []
    for f in report.findings_for(target):
        sl = None if f.slice is None else int(np.clip(f.slice - origin_h, 0, height - 1))
        findings.append(TumorFinding(f.organ, f.diameters_mm, f.sub_segment, sl, f.attenuation))
    return StructuredReport(tuple(findings), report.negative_organs,
                            {target: report.is_count_known(target)} if findings else {}, report.scan_id)


def sample_patch(case: LoadedCase, cfg: TrainConfig, rng: np.random.Generator,
                 with_gt: bool = False) -> PatchSample:
    labels = case.organs
    organs = [o for o in class_names(labels) if (labels.labels == labels.code(o)).any()]
    target = choose_target(case.report, organs, cfg.p_tumor_organ, rng)
    idx = np.argwhere(labels.labels == labels.code(target))
    origin = patch_origin(idx.min(0), idx.max(0), labels.shape, cfg.patch, rng)
    sl = tuple(slice(o, o + p) for o, p in zip(origin, cfg.patch))
    sub = LabelVolume(labels.labels[sl], labels.spacing, labels.names)
    gt = None
    if with_gt:
        if case.gt is None:
            raise ValueError(f"{case.scan_id}: no ground-truth masks")
        gt = np.stack([case.gt.get(c, np.zeros(labels.shape, bool))[sl] for c in class_names(labels)])
    return PatchSample(
        case.scan_id,
        normalize_ct(case.ct.data[sl], cfg),
        sub,
        crop_report(case.report, target, origin[0], cfg.patch[0]),
        gt,
        target,
        origin,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(self, classes: Sequence[str], cfg: TrainConfig = TrainConfig(), dtype=np.float32):
        self.cfg = cfg
        self.classes = list(classes)
        self.model = SegModel(len(self.classes), cfg.features, seed=cfg.seed, out_bias=cfg.out_bias, dtype=dtype)
        self.classifier = AttenuationClassifier(cfg.att_hidden, np.random.default_rng(cfg.seed + 1))
        self.opt = AdamW(self.model.params, cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
        self.clf_opt = AdamW(self.classifier.params, cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed + 2)
        self.step = 0

    # -- losses -------------------------------------------------------------

    def sample_losses(self, s: PatchSample, prob: np.ndarray, deep: np.ndarray):
        """Weighted per-term losses and gradients w.r.t. both outputs for one patch."""
        cfg = self.cfg
        g_prob = np.zeros(prob.shape)
        g_deep = np.zeros(deep.shape)
        g_clf = {k: np.zeros_like(v) for k, v in self.classifier.params.items()}
        terms = {"L_sup": 0.0, "L_vol": 0.0, "L_ball": 0.0, "L_att": 0.0}
        diag = {}
        if s.gt is not None:
            vals = []
            for c in range(prob.shape[0]):
                r = supervised_loss(prob[c], s.gt[c])
                vals.append(r.value)
                g_prob[c] += cfg.w_sup * r.grad / prob.shape[0]
            terms["L_sup"] = float(np.mean(vals))
            return terms, g_prob, g_deep, g_clf, diag

        heads = [(prob, g_prob)] + ([(deep, g_deep)] if cfg.deep_supervision else [])
        if cfg.w_vol:
            for p, g in heads:
                r = report_volume_loss(p, self.classes, s.labels, s.report, cfg.volume, cfg.dilation_mm)
                terms["L_vol"] += r.value
                g += cfg.w_vol * r.grad
                if p is prob:
                    diag.update(r.diagnostics)
        if cfg.w_ball:
            r = ball_loss(prob, self.classes, s.labels, s.report, cfg.ball, cfg.dilation_mm)
            terms["L_ball"] = r.value
            g_prob += cfg.w_ball * r.grad
        if cfg.w_att:
            for p, g in heads:
                r, gc = report_attenuation_loss(p, s.ct, self.classes, s.labels, s.report,
                                                self.classifier, cfg.att_hard)
                terms["L_att"] += r.value
                g += cfg.w_att * r.grad
                for k in g_clf:
                    g_clf[k] += cfg.w_att * gc[k]
        return terms, g_prob, g_deep, g_clf, diag

    def batch_gradients(self, batch: Sequence[PatchSample]):
        """Mean loss and parameter gradients over a batch (fixed reduction order)."""
        cfg = self.cfg
        grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in self.model.params.items()}
        g_clf = {k: np.zeros_like(v) for k, v in self.classifier.params.items()}
        totals = {"L_sup": 0.0, "L_vol": 0.0, "L_ball": 0.0, "L_att": 0.0}
        rows = []
        n = len(batch)
        for s in batch:
            prob, deep, cache = self.model.forward(s.ct, cache=True)
            terms, gp, gd, gc, diag = self.sample_losses(s, prob.astype(np.float64), deep.astype(np.float64))
            for name, v in terms.items():
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite {name} on scan {s.scan_id} at step {self.step}")
            weighted = (cfg.w_sup * terms["L_sup"] + cfg.w_vol * terms["L_vol"]
                        + cfg.w_ball * terms["L_ball"] + cfg.w_att * terms["L_att"])
            pg = self.model.backward(cache, gp / n, gd / n if cfg.deep_supervision else None)
            for k in grads:
                grads[k] += pg[k]
            for k in g_clf:
                g_clf[k] += gc[k] / n
            for k, v in terms.items():
                totals[k] += v / n
            totals.setdefault("loss", 0.0)
            totals["loss"] += weighted / n
            rows.append({"scan_id": s.scan_id, **terms,
                         **{k: v for k, v in diag.items() if k.startswith("V_s:")}})
        return totals, grads, g_clf, rows

    def train_step(self, batch: Sequence[PatchSample]) -> dict:
        totals, grads, g_clf, rows = self.batch_gradients(batch)
        norm = clip_grad_norm(grads, self.cfg.clip_norm)
        clip_grad_norm(g_clf, self.cfg.clip_norm)
        lr = warmup_poly_lr(self.step, self.cfg.total_steps, self.cfg.warmup_steps, self.cfg.lr,
                            self.cfg.poly_power)
        self.opt.step(grads, lr)
        self.clf_opt.step(g_clf, lr)
        for k, v in self.model.params.items():
            if not np.all(np.isfinite(v)):
                raise TrainingError(f"parameter {k} became non-finite at step {self.step}")
        self.step += 1
        return {"step": self.step, "lr": lr, "grad_norm": norm, **totals, "rows": rows}

    def make_batch(self, report_cases: Sequence[LoadedCase], mask_cases: Sequence[LoadedCase]) -> list[PatchSample]:
        cfg = self.cfg
        batch = []
        for _ in range(cfg.batch_size):
            use_mask = bool(mask_cases) and (not report_cases or self.rng.random() < cfg.mask_fraction)
            pool = mask_cases if use_mask else report_cases
            case = pool[self.rng.integers(len(pool))]
            batch.append(sample_patch(case, cfg, self.rng, with_gt=use_mask))
        return batch

    def fit(self, report_cases: Sequence[LoadedCase], mask_cases: Sequence[LoadedCase] = (),
            log: Callable[[dict], None] | None = None) -> list[dict]:
        """Run ``cfg.total_steps`` optimizer steps; returns the per-step metrics."""
        if not report_cases and not mask_cases:
            raise ValueError("no training cases")
        if self.step == 0 and self.cfg.warm_start_steps:
            self.warm_start(list(report_cases) + list(mask_cases))
        history = []
        while self.step < self.cfg.total_steps:
            m = self.train_step(self.make_batch(report_cases, mask_cases))
            history.append(m)
            if log is not None:
                log(m)
        return history

    def warm_start(self, cases: Sequence[LoadedCase], steps: int | None = None) -> list[float]:
        """Train every class channel to predict its organ mask (organ-segmentation warm start).

        Uses a separate optimizer at a constant rate; the main schedule is untouched.
        """
        steps = self.cfg.warm_start_steps if steps is None else steps
        opt = AdamW(self.model.params, self.cfg.warm_start_lr, self.cfg.betas, weight_decay=0.0)
        losses = []
        for _ in range(steps):
            batch = []
            for _ in range(self.cfg.batch_size):
                case = cases[self.rng.integers(len(cases))]
                s = sample_patch(case, self.cfg, self.rng)
                gt = np.stack([s.labels.labels == s.labels.code(c) for c in self.classes])
                batch.append(replace(s, gt=gt))
            totals, grads, _, _ = self.batch_gradients(batch)
            clip_grad_norm(grads, self.cfg.clip_norm)
            opt.step(grads)
            losses.append(totals["L_sup"])
        return losses

    # -- inference ---------------------------------------------------------

    def predict(self, case: LoadedCase) -> np.ndarray:
        prob, _ = self.model.forward(normalize_ct(case.ct.data, self.cfg))
        return prob

    # -- checkpoints -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {f"model.{k}": v for k, v in self.model.params.items()}
        arrays.update({f"clf.{k}": v for k, v in self.classifier.params.items()})
        meta = {
            "classes": self.classes,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
        }
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Trainer":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            t = cls(meta["classes"], TrainConfig.from_dict(meta["config"]))
            t.model.load_state({k: z[f"model.{k}"] for k in SegModel.PARAM_NAMES})
            for k in t.classifier.params:
                t.classifier.params[k][...] = z[f"clf.{k}"]
        t.step = meta["step"]
        t.rng.bit_generator.state = meta["rng_state"]
        return t


# ---------------------------------------------------------------------------
# Evaluation and ranking
# ---------------------------------------------------------------------------


Predictor = Callable[[LoadedCase], np.ndarray]


def _as_predictor(model) -> Predictor:
    if isinstance(model, Trainer):
        return model.predict
    if callable(model):
        return model
    raise TypeError("expected a Trainer or a callable case -> probabilities")


def evaluate(model, cases: Sequence[LoadedCase], classes: Sequence[str],
             thresholds: DetectionThresholds, nsd_tol_mm: float = 2.0):
    """Organ-level detection outcomes and DSC/NSD on tumor-positive organs."""
    predict = _as_predictor(model)
    outcomes, overlap = [], {c: [] for c in classes}
    for case in cases:
        prob = predict(case)
        for ci, organ in enumerate(classes):
            try:
                mask = case.organs.labels == case.organs.code(organ)
            except KeyError:
                continue
            truth = case.report.status(organ)
            outcomes.append(DetectionOutcome(case.scan_id, organ, detect(prob[ci], mask, thresholds), truth))
            if truth and case.gt is not None and organ in case.gt:
                overlap[organ].append(dsc_nsd(prob[ci] > thresholds.confidence, case.gt[organ],
                                              nsd_tol_mm, case.organs.spacing))
    return detection_metrics(outcomes), overlap, outcomes


def rank_for_annotation(model, corpus: Iterable[LoadedCase], classes: Sequence[str],
                        ball_cfg: BallConfig = BallConfig(), dilation_mm: float = 20.0) -> list[tuple[str, float]]:
    """Cases ordered by decreasing Ball Loss (most report-inconsistent first); ties by scan id."""
    predict = _as_predictor(model)
    scored = []
    for case in corpus:
        prob = np.asarray(predict(case), dtype=np.float64)
        r = ball_loss(prob, classes, case.organs, case.report, ball_cfg, dilation_mm)
        scored.append((case.scan_id, float(r.value)))
    return sorted(scored, key=lambda t: (-t[1], t[0]))
