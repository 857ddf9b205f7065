"""Disaggregation quality metrics, on/off state extraction, and the
compression accounting reported alongside every pruned model.

State extraction is threshold-plus-hysteresis: power >= on_threshold, then
OFF gaps shorter than min_off between activations are merged, then ON runs
shorter than min_on are dropped (merge before drop, in that order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import model as M
from .errors import NumericError, ShapeError

EPS = 1e-8


@dataclass
class ApplianceMeta:
    name: str
    max_wattage: float
    on_threshold: float
    min_on: float = 0.0   # seconds
    min_off: float = 0.0  # seconds

    def __post_init__(self):
        if not 0 < self.on_threshold <= self.max_wattage:
            raise ValueError(
                f"{self.name}: on_threshold must lie in (0, max_wattage], got "
                f"{self.on_threshold} vs {self.max_wattage}")
        if self.min_on < 0 or self.min_off < 0:
            raise ValueError(f"{self.name}: min_on/min_off must be >= 0")


@dataclass
class MetricReport:
    mae: float
    smape: float
    mre: float
    f1: float
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self, pruning_pct: float, params: int, macs: int) -> str:
        """Row in report-table column order: Pruning %, Trainable Params,
        MACs, F1, MAE, SMAPE."""
        return (f"{pruning_pct:g},{params},{macs},"
                f"{self.f1:.4f},{self.mae:.4f},{self.smape:.6f}")


def _aligned(y, y_hat, op):
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ShapeError(f"{op}: series lengths differ, {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ShapeError(f"{op}: empty series")
    return y, y_hat


def regression_metrics(y, y_hat) -> dict:
    """MAE (watts), SMAPE in [0, 2], and max-normalized relative error."""
    y, y_hat = _aligned(y, y_hat, "regression_metrics")
    err = np.abs(y - y_hat)
    t = y.size
    mae = float(err.mean())
    smape = float((2.0 / t) * (err / (np.abs(y) + np.abs(y_hat) + EPS)).sum())
    mre = float(err.sum() / (t * y.max() + EPS))
    return {"mae": mae, "smape": smape, "mre": mre}


def extract_states(power, meta: ApplianceMeta, sample_period: float) -> np.ndarray:
    """Boolean on/off series from raw power via threshold and hysteresis."""
    if sample_period <= 0:
        raise ValueError(f"sample_period must be positive, got {sample_period}")
    raw = np.asarray(power, dtype=float) >= meta.on_threshold
    return apply_hysteresis(raw, meta.min_on, meta.min_off, sample_period)


def apply_hysteresis(states, min_on: float, min_off: float,
                     sample_period: float) -> np.ndarray:
    """Merge short interior OFF gaps, then drop short ON runs.

    Durations compare strictly: a run survives when
    length * sample_period >= the corresponding minimum. Idempotent.
    """
    s = np.asarray(states, dtype=bool).copy()
    if s.size == 0:
        return s

    def runs(arr):
        change = np.flatnonzero(np.diff(arr.astype(np.int8)))
        starts = np.concatenate(([0], change + 1))
        ends = np.concatenate((change + 1, [arr.size]))
        return [(int(a), int(b), bool(arr[a])) for a, b in zip(starts, ends)]

    # pass 1: OFF runs shorter than min_off *between* ON runs become ON
    rr = runs(s)
    for k, (a, b, on) in enumerate(rr):
        if on or k == 0 or k == len(rr) - 1:
            continue
        if (b - a) * sample_period < min_off:
            s[a:b] = True
    # pass 2: ON runs shorter than min_on are dropped
    for a, b, on in runs(s):
        if on and (b - a) * sample_period < min_on:
            s[a:b] = False
    return s


def classification_metrics(true_states, pred_states) -> MetricReport:
    """Confusion-matrix scores over aligned boolean series.

    When neither series contains an ON sample the report is flagged
    degenerate and F1 is 0 by convention.
    """
    t = np.asarray(true_states, dtype=bool)
    p = np.asarray(pred_states, dtype=bool)
    if t.shape != p.shape:
        raise ShapeError(f"classification_metrics: lengths differ, {t.shape} vs {p.shape}")
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    tn = int(np.sum(~t & ~p))
    fn = int(np.sum(t & ~p))
    n = t.size
    degenerate = (tp + fp + fn) == 0
    f1 = 0.0 if degenerate else tp / (tp + 0.5 * (fp + fn))
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    accuracy = (tp + tn) / n if n else 0.0
    return MetricReport(mae=0.0, smape=0.0, mre=0.0, f1=f1, precision=precision,
                        recall=recall, accuracy=accuracy, tp=tp, fp=fp, tn=tn,
                        fn=fn, degenerate=degenerate)


def count_activations(states, sample_period: float) -> dict:
    """Number of maximal ON runs and their total duration in seconds."""
    s = np.asarray(states, dtype=bool)
    if s.size == 0:
        return {"count": 0, "on_seconds": 0.0}
    starts = int(s[0]) + int(np.sum(~s[:-1] & s[1:]))
    return {"count": starts, "on_seconds": float(s.sum() * sample_period)}


def evaluate_disaggregation(y_watts, y_hat_watts, meta: ApplianceMeta,
                            sample_period: float) -> MetricReport:
    """Full report: regression errors on power, classification on extracted states."""
    reg = regression_metrics(y_watts, y_hat_watts)
    true_states = extract_states(y_watts, meta, sample_period)
    pred_states = extract_states(y_hat_watts, meta, sample_period)
    rep = classification_metrics(true_states, pred_states)
    rep.mae, rep.smape, rep.mre = reg["mae"], reg["smape"], reg["mre"]
    return rep


def compression_metrics(before: M.ModelGraph, after: M.ModelGraph) -> dict:
    """Reductions and MACs efficiency of after relative to before."""
    p0 = M.param_counts_from_specs(before.specs)["total"]
    p1 = M.param_counts_from_specs(after.specs)["total"]
    s0 = M.size_on_disk_bytes(before)
    s1 = M.size_on_disk_bytes(after)
    m0 = M.count_macs(before)
    m1 = M.count_macs(after)
    if m1 == 0:
        raise NumericError("pruned model has zero MACs; efficiency undefined")
    return {
        "param_reduction_pct": 100.0 * (1.0 - p1 / p0),
        "size_reduction_pct": 100.0 * (1.0 - s1 / s0),
        "efficiency": m0 / m1,
    }
