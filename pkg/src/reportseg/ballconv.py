"""Ball convolutions and greedy largest-first tumor localization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import fft as sfft

from .report import TumorFinding, estimate_volume
from .volgrid import ball_offsets, slice_band


class LocalizationInfeasible(RuntimeError):
    """No admissible center remains for a finding (empty gated organ mask)."""


@dataclass(frozen=True)
class BallConfig:
    inflation: float = 0.30          # relative diameter increase before kernels/carving
    sigma_factor: float = 0.75
    sigma_ref: str = "diameter"      # or "radius"
    min_diameter_mm: float = 5.0     # assumed size of tumors reported without diameters
    backend: str = "fft"
    tie_rtol: float = 1e-9           # convolution maxima closer than this are ties
    margin_frac: float = 0.20        # ignored border width, fraction of inflated diameter
    weight_base: float = 0.5         # CE weight = weight_base + t

    def __post_init__(self):
        if self.sigma_ref not in ("diameter", "radius"):
            raise ValueError("sigma_ref must be 'diameter' or 'radius'")
        if self.backend not in ("direct", "fft"):
            raise ValueError("backend must be 'direct' or 'fft'")


@dataclass(frozen=True)
class BallKernel:
    diameter_mm: float
    spacing: tuple[float, float, float]
    weights: np.ndarray

    @property
    def size(self) -> tuple[int, int, int]:
        return self.weights.shape

    @property
    def offsets(self) -> np.ndarray:
        return np.argwhere(self.weights > 0) - np.array(self.weights.shape) // 2


def make_kernel(
    diameter_mm: float,
    spacing: Sequence[float],
    sigma_factor: float = 0.75,
    sigma_ref: str = "diameter",
) -> BallKernel:
    """Gaussian-weighted ball: 1 at the center, decaying to the border, 0 outside."""
    if diameter_mm <= 0:
        raise ValueError("diameter must be positive")
    spacing = tuple(float(s) for s in spacing)
    radius = diameter_mm / 2.0
    half = [int(math.floor(radius / s + 1e-9)) for s in spacing]
    axes = [np.arange(-h, h + 1) * s for h, s in zip(half, spacing)]
    dh, dw, dl = np.meshgrid(*axes, indexing="ij")
    r2 = dh**2 + dw**2 + dl**2
    sigma = sigma_factor * (diameter_mm if sigma_ref == "diameter" else radius)
    w = np.exp(-r2 / (2.0 * sigma**2))
    w[r2 > radius**2 * (1 + 1e-9) + 1e-12] = 0.0
    return BallKernel(float(diameter_mm), spacing, w)


def _direct(prob: np.ndarray, w: np.ndarray) -> np.ndarray:
    H, W, L = prob.shape
    kh, kw, kl = (s // 2 for s in w.shape)
    padded = np.pad(prob, ((kh, kh), (kw, kw), (kl, kl)))
    out = np.zeros_like(prob, dtype=np.float64)
    for i, j, k in np.argwhere(w > 0):
        out += w[i, j, k] * padded[i : i + H, j : j + W, k : k + L]
    return out


def _fft(prob: np.ndarray, w: np.ndarray) -> np.ndarray:
    # correlation == convolution with the flipped kernel; crop the "same" window
    full = [n + k - 1 for n, k in zip(prob.shape, w.shape)]
    fshape = [sfft.next_fast_len(n, real=True) for n in full]
    spec = sfft.rfftn(prob, fshape) * sfft.rfftn(w[::-1, ::-1, ::-1], fshape)
    out = sfft.irfftn(spec, fshape)
    start = [k // 2 for k in w.shape]
    return out[tuple(slice(s, s + n) for s, n in zip(start, prob.shape))]


def ball_convolve(prob: np.ndarray, kernel: BallKernel, backend: str = "fft") -> np.ndarray:
    """Zero-padded, stride-1 correlation of ``prob`` with the ball kernel."""
    prob = np.asarray(prob, dtype=np.float64)
    if any(k > n for k, n in zip(kernel.size, prob.shape)):
        raise ValueError(f"kernel {kernel.size} larger than volume {prob.shape}")
    return _convolve(prob, kernel.weights, backend)


def _convolve(prob: np.ndarray, w: np.ndarray, backend: str) -> np.ndarray:
    w = _fit_kernel(w, prob.shape)
    if backend == "direct":
        return _direct(prob, w)
    if backend == "fft":
        return _fft(prob, w)
    raise ValueError(f"unknown backend {backend!r}")


def ball_voxels(center: Sequence[int], diameter_mm: float, spacing: Sequence[float], shape) -> np.ndarray:
    """In-volume voxel coordinates (row-major order) of a metric ball."""
    offs = ball_offsets(diameter_mm / 2.0, spacing)
    pts = offs + np.asarray(center)
    inside = np.all((pts >= 0) & (pts < np.asarray(shape)), axis=1)
    pts = pts[inside]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return pts[order]


def carve_top_n(
    prob: np.ndarray,
    center: Sequence[int],
    diameter_mm: float,
    n: int,
    spacing: Sequence[float],
    allowed: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """The ``n`` highest-probability voxels inside the ball (ties row-major).

    Returns ``(coords, clamped)``; ``clamped`` is True when ``n`` exceeded the
    number of admissible voxels in the ball.
    """
    pts = ball_voxels(center, diameter_mm, spacing, prob.shape)
    if allowed is not None:
        pts = pts[allowed[pts[:, 0], pts[:, 1], pts[:, 2]]]
    clamped = n > len(pts)
    n = min(max(int(n), 0), len(pts))
    vals = prob[pts[:, 0], pts[:, 1], pts[:, 2]]
    order = np.argsort(-vals, kind="stable")
    return pts[order[:n]], clamped


@dataclass(frozen=True)
class LocalizedTumor:
    center: tuple[int, int, int]
    diameter_mm: float   # inflated ball diameter actually used
    voxels: np.ndarray   # (n, 3) coordinates
    clamped: bool = False
    sized: bool = True   # False when the finding had no diameters

    @property
    def n(self) -> int:
        return len(self.voxels)


def finding_ball(finding: TumorFinding, cfg: BallConfig) -> tuple[float, float, float]:
    """(reported diameter, inflated ball diameter, expected volume mm^3)."""
    d = finding.max_diameter
    if d is None:
        d = cfg.min_diameter_mm
        vol = math.pi * d**3 / 6.0
    else:
        vol = estimate_volume(finding)
    return d, d * (1.0 + cfg.inflation), vol


def expected_voxels(volume_mm3: float, spacing: Sequence[float]) -> int:
    return int(round(volume_mm3 / float(np.prod(spacing))))


def first_argmax(values: np.ndarray, candidates: np.ndarray, atol: float) -> tuple[int, int, int]:
    """Row-major first candidate whose value is within ``atol`` of the maximum."""
    flat_c = np.flatnonzero(candidates.ravel())
    v = values.ravel()[flat_c]
    best = v.max()
    idx = flat_c[np.flatnonzero(v >= best - atol)[0]]
    return tuple(int(i) for i in np.unravel_index(idx, values.shape))


def sort_findings(findings: Sequence[TumorFinding], cfg: BallConfig) -> list[TumorFinding]:
    return sorted(findings, key=lambda f: -finding_ball(f, cfg)[0])


def localize_tumors(
    prob: np.ndarray,
    organ_mask: np.ndarray,
    findings: Sequence[TumorFinding],
    spacing: Sequence[float],
    cfg: BallConfig = BallConfig(),
    strict: bool = False,
) -> list[LocalizedTumor | None]:
    """Greedy localization, largest reported diameter first.

    For each finding the organ-masked working probabilities (gated to the
    reported slice when given) are ball-convolved, the best center taken,
    the top-N voxels inside the ball carved out and zeroed before the next
    finding. Output order follows the sorted findings; an infeasible finding
    yields ``None`` (or raises when ``strict``).
    """
    if not findings:
        raise ValueError("no findings to localize")
    organ_mask = np.asarray(organ_mask, dtype=bool)
    work = np.where(organ_mask, np.asarray(prob, dtype=np.float64), 0.0)
    carved = np.zeros(organ_mask.shape, dtype=bool)
    out: list[LocalizedTumor | None] = []
    for f in sort_findings(findings, cfg):
        d_rep, d_ball, vol = finding_ball(f, cfg)
        mask_f = organ_mask
        if f.slice is not None:
            keep = slice_band(organ_mask.shape[0], [(f.slice, d_rep)], spacing[0])
            mask_f = organ_mask & keep[:, None, None]
        if not mask_f.any():
            if strict:
                raise LocalizationInfeasible(f"empty gated mask for {f.organ} finding at slice {f.slice}")
            out.append(None)
            continue
        kernel = make_kernel(d_ball, spacing, cfg.sigma_factor, cfg.sigma_ref)
        conv = _convolve(np.where(mask_f, work, 0.0), kernel.weights, cfg.backend)
        center = first_argmax(conv, mask_f, cfg.tie_rtol * float(kernel.weights.sum()))
        n = expected_voxels(vol, spacing)
        voxels, clamped = carve_top_n(work, center, d_ball, n, spacing, allowed=mask_f & ~carved)
        carved[voxels[:, 0], voxels[:, 1], voxels[:, 2]] = True
        work[voxels[:, 0], voxels[:, 1], voxels[:, 2]] = 0.0
        out.append(LocalizedTumor(center, d_ball, voxels, clamped, f.max_diameter is not None))
    return out


def _fit_kernel(w: np.ndarray, shape) -> np.ndarray:
    """Crop kernel weights to offsets that can reach the volume (|o| < n per axis)."""
    sl = []
    for k, n in zip(w.shape, shape):
        c, h = k // 2, min(k // 2, n - 1)
        sl.append(slice(c - h, c + h + 1))
    return w[tuple(sl)]
