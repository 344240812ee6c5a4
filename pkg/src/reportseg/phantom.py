"""Synthetic CT phantoms: ellipsoidal organs and tumors, masks and noisy reports."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .report import Attenuation, StructuredReport, TumorFinding, report_from_dict, serialize_report
from .volgrid import BinaryMask, LabelVolume, VolumeGrid, _dilate_array, read_volume, write_volume


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OrganSpec:
    name: str
    center: tuple[float, float, float]   # voxel coordinates
    radii_mm: tuple[float, float, float]
    base_hu: float


DEFAULT_ORGANS = (
    OrganSpec("spleen", (14.0, 14.0, 24.0), (20.0, 18.0, 20.0), 110.0),
    OrganSpec("uterus", (34.0, 33.0, 14.0), (18.0, 20.0, 18.0), 65.0),
    OrganSpec("bladder", (31.0, 26.0, 36.0), (18.0, 18.0, 18.0), 25.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    organs: tuple[OrganSpec, ...] = DEFAULT_ORGANS
    organ_jitter_vox: float = 2.0
    organ_scale_jitter: float = 0.08
    background_hu: float = -900.0
    hu_clip: tuple[float, float] = (-1024.0, 3071.0)
    noise_hu: float = 10.0
    # tumors
    organ_tumor_prob: float = 0.5      # per organ, in tumor-bearing cases
    count_weights: tuple[float, ...] = (0.75, 0.25)   # P(1 tumor), P(2 tumors), ...
    diameter_range_mm: tuple[float, float] = (6.0, 24.0)
    max_axis_ratio: float = 1.5
    min_tumor_mm3: float = 64.0        # resample tumors too small to pass the detection count
    offset_range_hu: tuple[float, float] = (30.0, 60.0)
    p_hypo: float = 0.5
    # report noise
    sigma_d: float = 0.05              # relative diameter error
    sigma_z: float = 1.0               # slice error, voxels
    p_nosize: float = 0.1
    p_nocount: float = 0.1
    p_noslice: float = 0.3
    n_diameter_weights: tuple[float, float, float] = (0.3, 0.3, 0.4)
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.diameter_range_mm
        if not 5.0 <= lo <= hi <= 120.0:
            raise ValueError("diameter range must lie within [5, 120] mm")
        if not self.organs:
            raise ValueError("at least one organ required")
        if len({o.name for o in self.organs}) != len(self.organs):
            raise ValueError("organ names must be unique")

    @property
    def organ_names(self) -> list[str]:
        return [o.name for o in self.organs]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "organs" in d:
            d["organs"] = tuple(OrganSpec(o["name"], tuple(o["center"]), tuple(o["radii_mm"]), o["base_hu"])
                                for o in d["organs"])
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass(frozen=True)
class TumorTruth:
    organ: str
    center: tuple[float, float, float]
    diameters_mm: tuple[float, float, float]   # descending
    attenuation: Attenuation
    n_voxels: int


@dataclass
class PhantomCase:
    scan_id: str
    ct: VolumeGrid
    organs: LabelVolume
    gt_tumor_masks: dict[str, BinaryMask]
    report: StructuredReport
    truth: list[TumorTruth] = field(default_factory=list)

    @property
    def healthy(self) -> bool:
        return not self.truth


def _grid_mm(shape, spacing):
    return np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, spacing)], indexing="ij")


def _ellipsoid(grid, center_mm, semi_axes_mm, rotation=None):
    d = np.stack([g - c for g, c in zip(grid, center_mm)], axis=-1)
    if rotation is not None:
        d = d @ rotation  # rotate offsets into the ellipsoid's frame
    return ((d / np.asarray(semi_axes_mm)) ** 2).sum(axis=-1) <= 1.0


def generate(spec: PhantomSpec, seed: int, healthy: bool = False, scan_id: str | None = None) -> PhantomCase:
    """One deterministic phantom case for ``(spec, seed, healthy)``."""
    rng = np.random.default_rng(seed)
    scan_id = scan_id or f"case{seed}"
    sp = np.asarray(spec.spacing)
    grid = _grid_mm(spec.shape, spec.spacing)

    labels = np.zeros(spec.shape, dtype=np.int32)
    organ_masks = {}
    for code, o in enumerate(spec.organs, start=1):
        for _ in range(spec.max_retries):
            center = np.asarray(o.center) + rng.uniform(-1, 1, 3) * spec.organ_jitter_vox
            radii = np.asarray(o.radii_mm) * (1 + rng.uniform(-1, 1, 3) * spec.organ_scale_jitter)
            m = _ellipsoid(grid, center * sp, radii)
            if m.any() and not (m & (labels > 0)).any():
                break
        else:
            raise GenerationError(f"could not place organ {o.name}")
        labels[m] = code
        organ_masks[o.name] = m
    names = {i: o.name for i, o in enumerate(spec.organs, start=1)}

    ct = np.full(spec.shape, spec.background_hu)
    for o in spec.organs:
        ct[organ_masks[o.name]] = o.base_hu

    tumor_organs: list[str] = []
    if not healthy and spec.count_weights and spec.organ_tumor_prob > 0:
        while not tumor_organs:
            tumor_organs = [n for n in spec.organ_names if rng.random() < spec.organ_tumor_prob]

    truth: list[TumorTruth] = []
    gt = {n: np.zeros(spec.shape, dtype=bool) for n in spec.organ_names}
    occupied = np.zeros(spec.shape, dtype=bool)
    cw = np.asarray(spec.count_weights, dtype=float)
    for name in tumor_organs:
        organ = next(o for o in spec.organs if o.name == name)
        count = 1 + int(rng.choice(len(cw), p=cw / cw.sum()))
        for _ in range(count):
            t, m = _place_tumor(spec, rng, grid, name, organ_masks[name], occupied)
            sign = -1.0 if t.attenuation == Attenuation.HYPO else 1.0
            ct[m] = organ.base_hu + sign * rng.uniform(*spec.offset_range_hu)
            gt[name] |= m
            occupied |= _dilate_array(m, float(sp.max()), spec.spacing)
            truth.append(t)

    ct = ct + rng.normal(0.0, spec.noise_hu, spec.shape)
    ct = np.clip(ct, *spec.hu_clip).astype(np.float32)

    report = _write_report(spec, rng, scan_id, truth)
    return PhantomCase(
        scan_id,
        VolumeGrid(ct, spec.spacing),
        LabelVolume(labels, spec.spacing, names),
        {n: BinaryMask(m, spec.spacing) for n, m in gt.items()},
        report,
        truth,
    )


def _place_tumor(spec, rng, grid, organ, organ_mask, occupied):
    sp = np.asarray(spec.spacing)
    lo, hi = spec.diameter_range_mm
    cand = np.argwhere(organ_mask & ~occupied)
    for _ in range(spec.max_retries):
        d1 = rng.uniform(lo, hi)
        d2 = rng.uniform(d1 / spec.max_axis_ratio, d1)
        d3 = rng.uniform(d1 / spec.max_axis_ratio, d2)
        diam = np.array([d1, d2, d3])
        rot = Rotation.random(random_state=rng).as_matrix()
        if not len(cand):
            break
        center = cand[rng.integers(len(cand))] + rng.uniform(-0.5, 0.5, 3)
        m = _ellipsoid(grid, center * sp, diam / 2.0, rot)
        if m.sum() * float(np.prod(sp)) < spec.min_tumor_mm3:
            continue
        if (m & ~organ_mask).any() or (m & occupied).any():
            continue
        att = Attenuation.HYPO if rng.random() < spec.p_hypo else Attenuation.HYPER
        truth = TumorTruth(organ, tuple(float(c) for c in center), tuple(float(x) for x in diam), att, int(m.sum()))
        return truth, m
    raise GenerationError(f"could not place a tumor in {organ} after {spec.max_retries} tries")


def _write_report(spec: PhantomSpec, rng, scan_id: str, truth: Sequence[TumorTruth]) -> StructuredReport:
    findings = []
    count_known = {}
    nw = np.asarray(spec.n_diameter_weights, dtype=float)
    for t in truth:
        if t.organ not in count_known:
            count_known[t.organ] = bool(rng.random() >= spec.p_nocount)
        diam: tuple[float, ...] = ()
        if rng.random() >= spec.p_nosize:
            k = 1 + int(rng.choice(3, p=nw / nw.sum()))
            noisy = np.asarray(t.diameters_mm) * (1.0 + spec.sigma_d * rng.standard_normal(3))
            diam = tuple(float(round(max(x, 0.5), 2)) for x in noisy[:k])
        sl = None
        if rng.random() >= spec.p_noslice:
            z = t.center[0] + spec.sigma_z * rng.standard_normal()
            sl = int(np.clip(round(z), 0, spec.shape[0] - 1))
        findings.append(TumorFinding(t.organ, diam, None, sl, t.attenuation))
    positives = {t.organ for t in truth}
    negatives = tuple(n for n in spec.organ_names if n not in positives)
    return StructuredReport(tuple(findings), negatives, count_known, scan_id)


# ---------------------------------------------------------------------------
# Corpus IO
# ---------------------------------------------------------------------------


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def case_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def plan_corpus(n_cases: int, n_test: int) -> list[tuple[bool, str]]:
    """(healthy, split) per case: alternating healthy/tumor, test cases last."""
    if n_test > n_cases:
        raise ValueError("n_test exceeds n_cases")
    n_train = n_cases - n_test
    plan = [(i % 2 == 0, "train") for i in range(n_train)]
    plan += [(i % 2 == 0, "test") for i in range(n_test)]
    return plan


def write_case(case: PhantomCase, out_dir: Path) -> dict:
    rel = Path(case.scan_id)
    (out_dir / rel).mkdir(parents=True, exist_ok=True)
    write_volume(out_dir / rel / "ct", case.ct)
    write_volume(out_dir / rel / "organs", case.organs)
    gt = {}
    for organ, m in case.gt_tumor_masks.items():
        write_volume(out_dir / rel / f"gt_{organ}", m)
        gt[organ] = str(rel / f"gt_{organ}.vol")
    (out_dir / rel / "report.json").write_text(serialize_report(case.report) + "\n")
    files = sorted(p for p in (out_dir / rel).iterdir() if p.is_file())
    return {
        "id": case.scan_id,
        "ct": str(rel / "ct.vol"),
        "organs": str(rel / "organs.vol"),
        "report": str(rel / "report.json"),
        "gt": gt,
        "healthy": case.healthy,
        "checksums": {p.name: _sha(p) for p in files},
    }


def write_corpus(spec: PhantomSpec, n_cases: int, out_dir: str | Path, seed: int = 0,
                 n_test: int = 0) -> dict:
    """Generate ``n_cases`` phantoms into ``out_dir`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for i, ((healthy, split), s) in enumerate(zip(plan_corpus(n_cases, n_test), case_seeds(seed, n_cases))):
        case = generate(spec, s, healthy=healthy, scan_id=f"case{i:04d}")
        entry = write_case(case, out_dir)
        entry.update(seed=s, split=split)
        cases.append(entry)
    manifest = {"seed": seed, "spec": spec.to_dict(), "cases": cases}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(path: str | Path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()), path.parent


@dataclass
class LoadedCase:
    scan_id: str
    ct: VolumeGrid
    organs: LabelVolume
    report: StructuredReport
    gt: dict[str, np.ndarray] | None
    split: str = "train"


def load_case(entry: dict, root: Path, with_gt: bool = True) -> LoadedCase:
    ct = read_volume(root / entry["ct"])
    organs = read_volume(root / entry["organs"])
    report = report_from_dict(json.loads((root / entry["report"]).read_text()))
    gt = None
    if with_gt and entry.get("gt"):
        gt = {k: read_volume(root / v).labels > 0 for k, v in entry["gt"].items()}
    return LoadedCase(entry["id"], ct, organs, report, gt, entry.get("split", "train"))


def load_corpus(manifest_path: str | Path, split: str | None = None) -> list[LoadedCase]:
    manifest, root = load_manifest(manifest_path)
    return [load_case(e, root) for e in manifest["cases"] if split is None or e.get("split") == split]


def as_loaded(case: PhantomCase, split: str = "train") -> LoadedCase:
    """In-memory PhantomCase to the loader's representation (float32 CT, as on disk)."""
    ct = VolumeGrid(case.ct.data.astype(np.float32), case.ct.spacing)
    return LoadedCase(case.scan_id, ct, case.organs, case.report,
                      {k: v.mask for k, v in case.gt_tumor_masks.items()}, split)


def with_overrides(spec: PhantomSpec, **kw) -> PhantomSpec:
    return replace(spec, **kw)
