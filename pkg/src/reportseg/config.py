"""Run configuration: one JSON file plus ``section.key=value`` overrides, hashed canonically."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .evalkit import DetectionThresholds
from .phantom import PhantomSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_cases: int = 96
    n_test: int = 32
    n_mask_cases: int = 0       # leading training cases used as CT-Mask pairs
    use_reports: bool = True    # remaining training cases used as CT-Report pairs


@dataclass(frozen=True)
class EvalConfig:
    thresholds: str = "50,0.5"
    scale_count: bool = True    # count threshold given at 1 mm isotropic, rescaled to the voxel size
    nsd_tol_mm: float = 2.0
    split: str = "test"

    def detection_thresholds(self, spacing) -> DetectionThresholds:
        th = DetectionThresholds.parse(self.thresholds)
        if self.scale_count:
            return DetectionThresholds.scaled(spacing, th.voxel_count, th.confidence)
        return th


SECTIONS = {"data": DataConfig, "eval": EvalConfig}


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps({
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.__dict__,
            "eval": self.eval.__dict__,
        }))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - {"seed", "phantom", "train", "data", "eval"})
        if unknown:
            raise ConfigError(f"unknown top-level keys: {unknown}")
        base = cls().to_dict()
        merged = _deep_merge(base, d)
        return cls(
            seed=int(merged["seed"]),
            phantom=_strict(PhantomSpec, merged["phantom"], "phantom"),
            train=_strict(TrainConfig, merged["train"], "train"),
            data=_strict(DataConfig, merged["data"], "data"),
            eval=_strict(EvalConfig, merged["eval"], "eval"),
        )

    def hash(self) -> str:
        """sha256 of the canonical JSON form; independent of key order in the source file."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "organs":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for text in overrides:
        keys, value = parse_override(text)
        node = d
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object key {k!r}")
        node[keys[-1]] = value
    return RunConfig.from_dict(d)
