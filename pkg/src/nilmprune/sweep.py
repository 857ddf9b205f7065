"""Threshold sweeps and the distance-to-ideal selector.

A sweep evaluates one pruning strategy over a grid of thresholds, each point
independently seeded so points can be reproduced (and computed) in any
order. The selector picks the curve point closest to the ideal corner
(perfect F1 at full compression); ties go to the larger threshold because
more compression at equal distance is strictly better for edge deployment.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, NumericError
from .pruning import MAX_SPARSITY

log = logging.getLogger(__name__)

STRATEGIES = ("after-training", "opt-nilm", "optimized-structured", "dg-structured")

PRUNED_FRACTION = "pruned-fraction"
MACS_REDUCTION = "normalized-MACs-reduction"

CSV_FIELDS = ("threshold", "f1", "mae", "smape", "mre", "params", "macs", "size_bytes")


@dataclass
class SweepPoint:
    threshold: float
    f1: float = math.nan
    mae: float = math.nan
    smape: float = math.nan
    mre: float = math.nan
    params: int = 0
    macs: int = 0
    size_bytes: int = 0
    error: str | None = None


@dataclass
class SweepCurve:
    strategy: str
    appliance: str
    points: list[SweepPoint] = field(default_factory=list)

    def thresholds(self):
        return [p.threshold for p in self.points]

    def baseline(self) -> SweepPoint | None:
        for p in self.points:
            if p.threshold == 0.0:
                return p
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for p in self.points:
            w.writerow([f"{p.threshold:g}", f"{p.f1:.6f}", f"{p.mae:.6f}",
                        f"{p.smape:.8f}", f"{p.mre:.8f}", p.params, p.macs,
                        p.size_bytes])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, strategy="", appliance="") -> "SweepCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        pts = [SweepPoint(threshold=float(r["threshold"]), f1=float(r["f1"]),
                          mae=float(r["mae"]), smape=float(r["smape"]),
                          mre=float(r["mre"]), params=int(r["params"]),
                          macs=int(r["macs"]), size_bytes=int(r["size_bytes"]))
               for r in rows]
        curve = cls(strategy, appliance, pts)
        curve.points.sort(key=lambda p: p.threshold)
        return curve

    def to_json(self) -> str:
        return json.dumps({"strategy": self.strategy, "appliance": self.appliance,
                           "points": [asdict(p) for p in self.points]}, sort_keys=True)


def default_grid() -> list[float]:
    """5% to 95% in 5% steps."""
    return [round(0.05 * k, 2) for k in range(1, 20)]


def point_seed(base_seed: int, threshold: float) -> int:
    """Stable per-threshold seed so points are order-independent."""
    return (base_seed * 1_000_003 + int(round(threshold * 10_000))) % 2**31


def sweep(evaluate_point, thresholds, strategy: str, appliance: str = "",
          base_seed: int = 0, include_baseline: bool = True) -> SweepCurve:
    """Run evaluate_point(threshold, seed) over the grid.

    Per-point failures are recorded on the point (error string, NaN metrics)
    and do not abort the rest of the curve.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    grid = sorted(set(float(t) for t in thresholds))
    for t in grid:
        if not 0.0 <= t <= MAX_SPARSITY:
            raise ConfigError(f"threshold {t} outside [0, {MAX_SPARSITY}]")
    if include_baseline and 0.0 not in grid:
        grid.insert(0, 0.0)
    curve = SweepCurve(strategy, appliance)
    for t in grid:
        point = SweepPoint(threshold=t)
        try:
            out = evaluate_point(t, point_seed(base_seed, t))
            for k, v in out.items():
                setattr(point, k, v)
        except Exception as e:  # recorded, not fatal to the curve
            log.warning("threshold %.2f failed: %s", t, e)
            point.error = f"{type(e).__name__}: {e}"
        curve.points.append(point)
    return curve


def _compression_value(point: SweepPoint, axis: str, baseline_macs: float) -> float:
    if axis == PRUNED_FRACTION:
        return point.threshold
    if axis == MACS_REDUCTION:
        if baseline_macs <= 0:
            raise NumericError("cannot normalize MACs without a baseline")
        return 1.0 - point.macs / baseline_macs
    raise ConfigError(f"unknown compression axis {axis!r}")


def distance_to_ideal(f1: float, compression: float) -> float:
    return math.sqrt((1.0 - f1) ** 2 + (1.0 - compression) ** 2)


def optimal_threshold(curve: SweepCurve, compression_axis: str = PRUNED_FRACTION):
    """Threshold of the point nearest the (F1=1, compression=1) corner.

    Returns (threshold, distance). Points that failed or carry NaN F1 are
    skipped; a curve with no usable point is an error.
    """
    if not curve.points:
        raise ConfigError("empty sweep curve")
    baseline_macs = 0.0
    if compression_axis == MACS_REDUCTION:
        base = curve.baseline()
        baseline_macs = float(base.macs) if base else float(max(p.macs for p in curve.points))
    best = None
    for p in curve.points:
        if p.error is not None or math.isnan(p.f1):
            continue
        d = distance_to_ideal(p.f1, _compression_value(p, compression_axis, baseline_macs))
        if (best is None or d < best[1]
                or (d == best[1] and p.threshold > best[0])):
            best = (p.threshold, d)
    if best is None:
        raise NumericError("no usable points in curve (all failed or NaN F1)")
    return best
