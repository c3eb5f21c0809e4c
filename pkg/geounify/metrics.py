"""
Evaluation harness: retrieval recall, hit rate, meter-level localization.

Positions live in a local planar frame (east, north in meters). A pixel
(x = column, y = row) of a tile maps to
    east  = center_e + (x - L/2) * mpp
    north = center_n - (y - L/2) * mpp
so rows grow southwards, as in an image.

Queries whose pipeline produced no usable position (no candidate covers the
ground truth) carry error = inf: they count against R@Xm and are left out of
mean/median, with the exclusion count reported.
"""

from __future__ import annotations
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DatasetError, MetricInvariantError

INF = float("inf")


# ================= data model =================
@dataclass(frozen=True)
class GeoTag:
    east_m: float
    north_m: float
    meters_per_pixel: float
    tile_size_px: int

    def __post_init__(self):
        if not self.meters_per_pixel > 0:
            raise DatasetError(f"geo tag needs meters_per_pixel > 0, got {self.meters_per_pixel}")

    def pixel_to_frame(self, x: float, y: float) -> Tuple[float, float]:
        half = self.tile_size_px / 2.0
        return (self.east_m + (x - half) * self.meters_per_pixel,
                self.north_m - (y - half) * self.meters_per_pixel)

    def covers(self, east: float, north: float) -> bool:
        """True when the point falls on a pixel of this tile (x, y in [0, L))."""
        half = self.tile_size_px * self.meters_per_pixel / 2.0
        de, dn = east - self.east_m, north - self.north_m
        return -half <= de < half and -half < dn <= half

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeoTag":
        try:
            return cls(float(d["east_m"]), float(d["north_m"]), float(d["meters_per_pixel"]),
                       int(d["tile_size_px"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed geo tag {dict(d)!r}: {e}") from None


@dataclass(frozen=True)
class GroundTruthLabel:
    query_id: str
    positive_ids: Tuple[str, ...]
    semi_positive_ids: Tuple[str, ...]
    gt_pixel: Tuple[int, int]  # (x, y) in the first positive tile

    def __post_init__(self):
        if len(self.positive_ids) < 1:
            raise DatasetError(f"query {self.query_id}: no positive tile")
        if len(self.semi_positive_ids) > 3:
            raise DatasetError(f"query {self.query_id}: {len(self.semi_positive_ids)} semi-positives (max 3)")

    @property
    def positive(self) -> str:
        return self.positive_ids[0]


@dataclass
class EvalReport:
    recall_at_k: Dict[int, float]
    hit_rate: float
    recall_at_meters: Dict[float, float]
    mean_error_m: Optional[float]
    median_error_m: Optional[float]
    counts: Dict[str, int]
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
            "hit_rate": self.hit_rate,
            "recall_at_meters": {f"{t:g}m": v for t, v in sorted(self.recall_at_meters.items())},
            "mean_error_m": self.mean_error_m,
            "median_error_m": self.median_error_m,
            "counts": dict(sorted(self.counts.items())),
            "extra": dict(sorted(self.extra.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_frame(self) -> pd.DataFrame:
        row: Dict[str, object] = {f"R@{k}": _pct(v) for k, v in sorted(self.recall_at_k.items())}
        row["Hit"] = _pct(self.hit_rate)
        row.update({f"R@{t:g}m": _pct(v) for t, v in sorted(self.recall_at_meters.items())})
        row["Mean(m)"] = _fmt(self.mean_error_m)
        row["Median(m)"] = _fmt(self.median_error_m)
        return pd.DataFrame([row], index=["run"])

    def to_text(self) -> str:
        c = self.counts
        tail = (f"queries={c.get('queries', 0)} localized={c.get('localized', 0)} "
                f"failed={c.get('failed', 0)}")
        lines = [self.to_frame().to_string(), tail]
        for k, v in sorted(self.extra.items()):
            lines.append(f"{k}: {v:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        pj, pt = out_dir / "report.json", out_dir / "report.txt"
        pj.write_text(self.to_json() + "\n", encoding="utf-8")
        pt.write_text(self.to_text(), encoding="utf-8")
        return pj, pt


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}"


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.2f}"


# ================= retrieval metrics =================
def _check(rankings: Mapping[str, Sequence[str]], labels: Mapping[str, GroundTruthLabel]) -> None:
    missing = [q for q in rankings if q not in labels]
    if missing:
        raise DatasetError(f"no ground-truth label for queries {missing[:5]}")
    unranked = [q for q in labels if q not in rankings]
    if unranked:
        raise DatasetError(f"no ranking for queries {unranked[:5]}")


def recall_at_k(rankings: Mapping[str, Sequence[str]], labels: Mapping[str, GroundTruthLabel], k: int) -> float:
    """Fraction of queries whose positive is among the first k ranked tiles."""
    _check(rankings, labels)
    if not rankings:
        return 0.0
    hits = sum(1 for q, ranked in rankings.items() if labels[q].positive in list(ranked)[:k])
    return hits / len(rankings)


def hit_rate(rankings: Mapping[str, Sequence[str]], labels: Mapping[str, GroundTruthLabel]) -> float:
    """Top-1 counted correct if it is the positive or a semi-positive."""
    _check(rankings, labels)
    if not rankings:
        return 0.0
    hits = 0
    for q, ranked in rankings.items():
        ranked = list(ranked)
        if not ranked:
            continue
        lab = labels[q]
        if ranked[0] in lab.positive_ids or ranked[0] in lab.semi_positive_ids:
            hits += 1
    return hits / len(rankings)


# ================= localization metrics =================
def meter_error(pred_pixel: Sequence[float], gt_pixel: Sequence[float],
                pred_tile: Optional[GeoTag], gt_tile: Optional[GeoTag]) -> float:
    if pred_tile is None or gt_tile is None:
        raise DatasetError("meter_error needs geo tags for both tiles")
    pe, pn = pred_tile.pixel_to_frame(*pred_pixel)
    ge, gn = gt_tile.pixel_to_frame(*gt_pixel)
    return math.hypot(pe - ge, pn - gn)


def localization_recall(errors_m: Iterable[float], thresholds: Sequence[float] = (1.0, 10.0)) -> Dict[float, float]:
    errs = np.asarray(list(errors_m), dtype=np.float64)
    if errs.size == 0:
        return {float(t): 0.0 for t in thresholds}
    return {float(t): float(np.mean(errs <= t)) for t in thresholds}


def mean_median(errors_m: Iterable[float]) -> Tuple[float, float]:
    """Arithmetic mean and lower-middle median."""
    errs = sorted(float(e) for e in errors_m)
    if not errs:
        raise MetricInvariantError("mean_median of an empty error list")
    return float(np.mean(errs)), errs[(len(errs) - 1) // 2]


# ================= report =================
def build_report(rankings: Mapping[str, Sequence[str]], labels: Mapping[str, GroundTruthLabel],
                 errors_m: Mapping[str, float], recall_ks: Sequence[int] = (1, 5, 10),
                 thresholds: Sequence[float] = (1.0, 10.0),
                 extra: Optional[Mapping[str, float]] = None) -> EvalReport:
    r_at_k = {int(k): recall_at_k(rankings, labels, int(k)) for k in recall_ks}
    hr = hit_rate(rankings, labels)
    errs = [errors_m.get(q, INF) for q in sorted(labels)]
    finite = [e for e in errs if math.isfinite(e)]
    mean_e, med_e = mean_median(finite) if finite else (None, None)
    report = EvalReport(
        recall_at_k=r_at_k,
        hit_rate=hr,
        recall_at_meters=localization_recall(errs, thresholds),
        mean_error_m=mean_e,
        median_error_m=med_e,
        counts={"queries": len(errs), "localized": len(finite), "failed": len(errs) - len(finite)},
        extra=dict(extra or {}),
    )
    assert_invariants(report)
    return report


def assert_invariants(report: EvalReport) -> None:
    rates = list(report.recall_at_k.values()) + [report.hit_rate] + list(report.recall_at_meters.values())
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise MetricInvariantError(f"rate outside [0, 1]: {rates}")
    if 1 in report.recall_at_k and report.hit_rate < report.recall_at_k[1]:
        raise MetricInvariantError(f"hit rate {report.hit_rate} < R@1 {report.recall_at_k[1]}")
    ks = sorted(report.recall_at_k)
    for a, b in zip(ks, ks[1:]):
        if report.recall_at_k[a] > report.recall_at_k[b]:
            raise MetricInvariantError(f"R@{a} > R@{b}")
    ts = sorted(report.recall_at_meters)
    for a, b in zip(ts, ts[1:]):
        if report.recall_at_meters[a] > report.recall_at_meters[b]:
            raise MetricInvariantError(f"R@{a:g}m > R@{b:g}m")
    c = report.counts
    if c.get("localized", 0) + c.get("failed", 0) != c.get("queries", 0):
        raise MetricInvariantError(f"counts do not sum to the query total: {c}")
