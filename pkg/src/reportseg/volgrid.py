"""Volumetric containers, raw+JSON file IO and mask utilities.

Arrays are indexed ``(h, w, l)`` with ``h`` the slowest axis; ``h`` is the
slice (height) axis used by reports.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

Spacing = tuple[float, float, float]


class VolumeFormatError(ValueError):
    """Raised when a volume file or header is malformed."""


def _check_geometry(shape: Sequence[int], spacing: Sequence[float]) -> None:
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise ValueError(f"shape must be three positive ints, got {tuple(shape)}")
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {tuple(spacing)}")


@dataclass(frozen=True)
class VolumeGrid:
    """Scalar field on a regular grid (CT intensities or probabilities)."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_geometry(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return float(np.prod(self.spacing))


@dataclass(frozen=True)
class LabelVolume:
    """Integer organ/class codes; 0 is background."""

    labels: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        _check_geometry(labels.shape, self.spacing)
        if labels.dtype.kind not in "iu":
            if not np.all(labels == np.round(labels)):
                raise ValueError("label volume must contain integers")
            labels = labels.astype(np.int32)
        names = {int(k): str(v) for k, v in self.names.items()}
        present = set(np.unique(labels).tolist()) - {0}
        missing = present - set(names)
        if missing:
            raise ValueError(f"label codes {sorted(missing)} missing from label dictionary")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def code(self, name: str) -> int:
        for k, v in self.names.items():
            if v == name:
                return k
        raise KeyError(name)

    def mask(self, name: str) -> "BinaryMask":
        return BinaryMask(self.labels == self.code(name), self.spacing)


@dataclass(frozen=True)
class BinaryMask:
    mask: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        _check_geometry(mask.shape, self.spacing)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mask.shape

    def __len__(self) -> int:
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------


def _stem(path: str | Path) -> Path:
    path = Path(path)
    if path.suffix in (".vol", ".json"):
        return path.with_suffix("")
    return path


def write_volume(path: str | Path, volume: VolumeGrid | LabelVolume | BinaryMask) -> Path:
    """Write ``<stem>.vol`` (float32 little-endian) and ``<stem>.json``.

    Returns the path of the ``.vol`` payload.
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(volume, VolumeGrid):
        payload, kind, labels = volume.data, "scalar", None
    elif isinstance(volume, LabelVolume):
        payload, kind = volume.labels, "labels"
        labels = {str(k): v for k, v in sorted(volume.names.items())}
    elif isinstance(volume, BinaryMask):
        payload, kind, labels = volume.mask, "labels", {"1": "mask"}
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")
    header = {
        "shape": [int(s) for s in payload.shape],
        "spacing_mm": [float(s) for s in volume.spacing],
        "kind": kind,
    }
    if labels is not None:
        header["labels"] = labels
    vol_path = stem.with_suffix(".vol")
    np.ascontiguousarray(payload, dtype="<f4").tofile(vol_path)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return vol_path


def read_volume(path: str | Path) -> VolumeGrid | LabelVolume:
    stem = _stem(path)
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{stem}.json: {exc}") from exc
    try:
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{stem}.json: bad header ({exc})") from exc
    if kind not in ("scalar", "labels"):
        raise VolumeFormatError(f"{stem}.json: unknown kind {kind!r}")
    try:
        _check_geometry(shape, spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{stem}.json: {exc}") from exc

    payload = np.fromfile(stem.with_suffix(".vol"), dtype="<f4")
    n = int(np.prod(shape))
    if payload.size != n:
        raise VolumeFormatError(
            f"{stem}.vol: header declares {n} values, payload has {payload.size}"
        )
    if not np.all(np.isfinite(payload)):
        raise VolumeFormatError(f"{stem}.vol: non-finite values")
    data = payload.reshape(shape).astype(np.float32)
    if kind == "scalar":
        return VolumeGrid(data, spacing)
    names = {int(k): v for k, v in header.get("labels", {}).items()}
    try:
        return LabelVolume(data.astype(np.int32), spacing, names)
    except ValueError as exc:
        raise VolumeFormatError(f"{stem}: {exc}") from exc


# ---------------------------------------------------------------------------
# Mask utilities
# ---------------------------------------------------------------------------


def ball_offsets(radius_mm: float, spacing: Sequence[float]) -> np.ndarray:
    """Integer offsets (n, 3) whose metric length is <= ``radius_mm``."""
    half = [int(np.floor(radius_mm / s + 1e-9)) for s in spacing]
    grids = np.meshgrid(*[np.arange(-h, h + 1) for h in half], indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    dist2 = ((offs * np.asarray(spacing)) ** 2).sum(axis=1)
    return offs[dist2 <= radius_mm**2 * (1 + 1e-9) + 1e-12]


def _dilate_array(mask: np.ndarray, radius_mm: float, spacing: Sequence[float]) -> np.ndarray:
    if radius_mm <= 0 or not mask.any():
        return mask.copy()
    if mask.all():
        return mask.copy()
    dist = ndimage.distance_transform_edt(~mask, sampling=spacing)
    return dist <= radius_mm * (1 + 1e-9) + 1e-12


def dilate(mask: BinaryMask, radius_mm: float = 20.0) -> BinaryMask:
    """Metric (mm) binary dilation with a spherical structuring element."""
    if radius_mm < 0:
        raise ValueError("radius_mm must be >= 0")
    return BinaryMask(_dilate_array(mask.mask, radius_mm, mask.spacing), mask.spacing)


def slice_band(
    height: int, tumors: Iterable[tuple[int, float]], slice_mm: float
) -> np.ndarray | None:
    """Boolean per-height keep vector, or None when no tumor carries a slice."""
    tumors = list(tumors)
    if not tumors:
        return None
    h = np.arange(height)
    keep = np.zeros(height, dtype=bool)
    for z, d in tumors:
        if d <= 0:
            raise ValueError("tumor diameter must be positive")
        keep |= np.abs(h - z) * slice_mm <= d
    return keep


def gate_slices(mask: BinaryMask, tumors: Sequence[tuple[int, float]]) -> BinaryMask:
    """Zero every height farther than each tumor's diameter from all reported slices.

    ``tumors`` holds ``(slice_index, diameter_mm)`` pairs; an empty list
    leaves the mask unchanged.
    """
    height = mask.shape[0]
    for z, _ in tumors:
        if not 0 <= z < height:
            raise ValueError(f"slice {z} outside [0, {height})")
    keep = slice_band(height, tumors, mask.spacing[0])
    if keep is None:
        return mask
    return BinaryMask(mask.mask & keep[:, None, None], mask.spacing)


def connected_components(mask: BinaryMask, connectivity: int = 26) -> tuple[LabelVolume, int]:
    """Label connected components, numbered by first voxel in row-major order."""
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, n = ndimage.label(mask.mask, structure=structure)
    if n:
        # canonical numbering: order of first appearance in a row-major scan
        flat = labels.ravel()
        nz = flat[flat > 0]
        _, first = np.unique(nz, return_index=True)
        order = np.unique(nz)[np.argsort(first)]
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[order] = np.arange(1, n + 1, dtype=np.int32)
        labels = remap[labels]
    names = {i: f"component_{i}" for i in range(1, n + 1)}
    return LabelVolume(labels.astype(np.int32), mask.spacing, names), int(n)
