"""Structured reports: data model, JSON parser and volume-from-diameter estimates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

MAX_DIAMETER_MM = 300.0

# Organ sub-segments the organ masks know about. A finding may only name a
# sub-segment listed for its organ.
DEFAULT_SUBSEGMENTS: dict[str, tuple[str, ...]] = {
    "pancreas": ("pancreas_head", "pancreas_body", "pancreas_tail"),
}


class ReportError(ValueError):
    """Schema violation or contradiction in a structured report."""


class Attenuation(str, Enum):
    HYPO = "hypo"
    HYPER = "hyper"
    MIXED_OR_ISO = "mixed_or_iso"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class TumorFinding:
    organ: str
    diameters_mm: tuple[float, ...] = ()
    sub_segment: str | None = None
    slice: int | None = None
    attenuation: Attenuation = Attenuation.UNKNOWN

    def __post_init__(self):
        d = tuple(sorted((float(x) for x in self.diameters_mm), reverse=True))
        if len(d) > 3:
            raise ReportError(f"{self.organ}: at most 3 diameters, got {len(d)}")
        for x in d:
            if not (0 < x <= MAX_DIAMETER_MM) or not math.isfinite(x):
                raise ReportError(f"{self.organ}: diameter {x} outside (0, {MAX_DIAMETER_MM}]")
        object.__setattr__(self, "diameters_mm", d)
        object.__setattr__(self, "attenuation", Attenuation(self.attenuation))

    @property
    def location(self) -> str:
        """Mask name the finding is localized to (sub-segment if given)."""
        return self.sub_segment or self.organ

    @property
    def max_diameter(self) -> float | None:
        return self.diameters_mm[0] if self.diameters_mm else None


@dataclass(frozen=True)
class StructuredReport:
    findings: tuple[TumorFinding, ...] = ()
    negative_organs: tuple[str, ...] = ()
    count_known: Mapping[str, bool] = field(default_factory=dict)
    scan_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "findings", tuple(self.findings))
        object.__setattr__(self, "negative_organs", tuple(self.negative_organs))
        clash = set(self.positive_organs) & set(self.negative_organs)
        if clash:
            raise ReportError(f"organs both positive and negative: {sorted(clash)}")

    @property
    def positive_organs(self) -> list[str]:
        seen: dict[str, None] = {}
        for f in self.findings:
            seen.setdefault(f.organ, None)
        return list(seen)

    def findings_for(self, organ: str) -> list[TumorFinding]:
        return [f for f in self.findings if f.organ == organ]

    def is_count_known(self, organ: str) -> bool:
        return bool(self.count_known.get(organ, True))

    def status(self, organ: str) -> bool | None:
        """True if reported positive, False if negative, None if unlabeled."""
        if organ in self.negative_organs:
            return False
        if any(f.organ == organ for f in self.findings):
            return True
        return None


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ReportError(msg)


def report_from_dict(
    obj: Mapping[str, Any], subsegments: Mapping[str, Iterable[str]] | None = None
) -> StructuredReport:
    subsegments = DEFAULT_SUBSEGMENTS if subsegments is None else subsegments
    _require(isinstance(obj, Mapping), "report must be a JSON object")
    allowed = {"scan_id", "findings", "negative_organs", "count_known"}
    extra = set(obj) - allowed
    _require(not extra, f"unknown report fields {sorted(extra)}")
    findings = []
    raw_findings = obj.get("findings", [])
    _require(isinstance(raw_findings, list), "findings must be a list")
    for i, f in enumerate(raw_findings):
        _require(isinstance(f, Mapping), f"finding {i} must be an object")
        extra = set(f) - {"organ", "sub_segment", "diameters_mm", "slice", "attenuation"}
        _require(not extra, f"finding {i}: unknown fields {sorted(extra)}")
        organ = f.get("organ")
        _require(isinstance(organ, str) and organ, f"finding {i}: organ must be a non-empty string")
        sub = f.get("sub_segment")
        if sub is not None:
            _require(isinstance(sub, str), f"finding {i}: sub_segment must be a string")
            _require(
                sub in tuple(subsegments.get(organ, ())),
                f"finding {i}: sub-segment {sub!r} not known for organ {organ!r}",
            )
        diam = f.get("diameters_mm", [])
        _require(
            isinstance(diam, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in diam),
            f"finding {i}: diameters_mm must be a list of numbers",
        )
        sl = f.get("slice")
        _require(sl is None or (isinstance(sl, int) and not isinstance(sl, bool) and sl >= 0),
                 f"finding {i}: slice must be a non-negative int or null")
        att = f.get("attenuation", "unknown")
        _require(att in {a.value for a in Attenuation}, f"finding {i}: bad attenuation {att!r}")
        findings.append(TumorFinding(organ, tuple(diam), sub, sl, Attenuation(att)))

    neg = obj.get("negative_organs", [])
    _require(isinstance(neg, list) and all(isinstance(x, str) for x in neg),
             "negative_organs must be a list of strings")
    ck = obj.get("count_known", {})
    _require(isinstance(ck, Mapping) and all(isinstance(v, bool) for v in ck.values()),
             "count_known must map organ -> bool")
    scan_id = obj.get("scan_id", "")
    _require(isinstance(scan_id, str), "scan_id must be a string")
    return StructuredReport(tuple(findings), tuple(neg), dict(ck), scan_id)


def parse_report(text: str, subsegments: Mapping[str, Iterable[str]] | None = None) -> StructuredReport:
    """Parse report JSON text into a validated :class:`StructuredReport`."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(f"invalid JSON: {exc}") from exc
    return report_from_dict(obj, subsegments)


def report_to_dict(report: StructuredReport) -> dict[str, Any]:
    return {
        "scan_id": report.scan_id,
        "findings": [
            {
                "organ": f.organ,
                "sub_segment": f.sub_segment,
                "diameters_mm": list(f.diameters_mm),
                "slice": f.slice,
                "attenuation": f.attenuation.value,
            }
            for f in report.findings
        ],
        "negative_organs": list(report.negative_organs),
        "count_known": dict(report.count_known),
    }


def serialize_report(report: StructuredReport) -> str:
    return json.dumps(report_to_dict(report), indent=1)


def estimate_volume(finding: TumorFinding) -> float | None:
    """Tumor volume in mm^3 from 1-3 diameters; None when no diameter is given.

    One diameter is treated as a sphere, three as an ellipsoid, and with two
    the missing third diameter is taken as their mean.
    """
    d = finding.diameters_mm
    if not d:
        return None
    if len(d) == 1:
        return math.pi * d[0] ** 3 / 6.0
    if len(d) == 2:
        d = (d[0], d[1], (d[0] + d[1]) / 2.0)
    return math.pi * d[0] * d[1] * d[2] / 6.0


@dataclass(frozen=True)
class ReportedVolume:
    organ: str
    volume_mm3: float | None
    per_tumor: tuple[tuple[float | None, float | None], ...]

    @property
    def known(self) -> bool:
        return self.volume_mm3 is not None


def reported_volume_per_organ(report: StructuredReport) -> list[ReportedVolume]:
    """Total reported tumor volume per location (organ or sub-segment).

    The total is unknown when any finding lacks diameters or the organ's
    tumor count is not known.
    """
    groups: dict[str, list[TumorFinding]] = {}
    for f in report.findings:
        groups.setdefault(f.location, []).append(f)
    out = []
    for loc, fs in groups.items():
        per = tuple((f.max_diameter, estimate_volume(f)) for f in fs)
        known = all(v is not None for _, v in per) and all(report.is_count_known(f.organ) for f in fs)
        total = sum(v for _, v in per) if known else None
        out.append(ReportedVolume(loc, total, per))
    return out
