"""Experiment orchestration: datasets in, trained/pruned models and metric
reports out. This is the layer the CLI drives; it owns the strategy-specific
recipes behind each pruning threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import depgraph as G
from . import metrics as X
from . import model as M
from . import pruning as P
from . import sweep as S
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class Experiment:
    """Everything one appliance experiment needs: train windows, the held-out
    test series in watts, and the normalization/meta context."""

    train: D.WindowDataset
    test_agg: np.ndarray
    test_app: np.ndarray
    meta: X.ApplianceMeta
    sample_period: float
    window: int
    stride: int
    preset: str = "desk-small"
    dtype: str = "float64"

    def build_model(self, seed: int) -> M.ModelGraph:
        return M.build_default_model(self.window, self.preset, seed=seed,
                                     dtype=np.dtype(self.dtype))


def from_series(train_series: list[D.HouseholdSeries], test_series: D.HouseholdSeries,
                appliance: str, meta: X.ApplianceMeta, window: int, stride: int,
                preset: str = "desk-small", dtype: str = "float64") -> Experiment:
    pairs = []
    for s in train_series:
        if appliance not in s.appliances:
            raise ConfigError(f"appliance {appliance!r} missing from a training house")
        pairs.append((s.p_agg, s.appliances[appliance]))
    train = D.build_train_dataset(pairs, meta, window, stride)
    return Experiment(train=train,
                      test_agg=np.asarray(test_series.p_agg, dtype=float),
                      test_app=np.asarray(test_series.appliances[appliance], dtype=float),
                      meta=meta, sample_period=test_series.sample_period,
                      window=window, stride=stride, preset=preset, dtype=dtype)


def predict_power(model: M.ModelGraph, agg_watts, stats: dict,
                  window: int, stride: int):
    """Overlap-averaged watt predictions over a full series.

    Returns (pred_watts, covered) where covered marks samples inside at
    least one window.
    """
    x = np.asarray(agg_watts, dtype=float)
    t = x.size
    pred = np.zeros(t)
    hits = np.zeros(t)
    covered_any = False
    for start in range(0, t - window + 1, stride):
        seg = x[start:start + window]
        if np.isnan(seg).any():
            continue
        norm = (seg - stats["agg_mean"]) / stats["agg_std"]
        out = M.forward(model, norm)
        pred[start:start + window] += out
        hits[start:start + window] += 1
        covered_any = True
    if not covered_any:
        raise ConfigError("test series yields no complete windows")
    covered = hits > 0
    pred[covered] = pred[covered] / hits[covered] * stats["y_max"]
    return pred, covered


def evaluate(model: M.ModelGraph, exp: Experiment) -> X.MetricReport:
    pred, covered = predict_power(model, exp.test_agg, exp.train.stats(),
                                  exp.window, exp.stride)
    return X.evaluate_disaggregation(exp.test_app[covered], pred[covered],
                                     exp.meta, exp.sample_period)


def train_baseline(exp: Experiment, cfg: M.TrainConfig, seed: int | None = None):
    model = exp.build_model(cfg.seed if seed is None else seed)
    history = M.train(model, exp.train, cfg)
    return model, history


def model_snapshot(model: M.ModelGraph) -> dict:
    return {"params": M.count_params(model)["nonzero"],
            "macs": M.count_macs(model),
            "size_bytes": M.size_on_disk_bytes(model)}


def prune_report(strategy: str, threshold: float, before: dict, after: dict,
                 extra: dict | None = None) -> dict:
    report = {
        "strategy": strategy,
        "threshold": threshold,
        "params_before": before["params"],
        "params_after": after["params"],
        "macs_before": before["macs"],
        "macs_after": after["macs"],
        "size_bytes_before": before["size_bytes"],
        "size_bytes_after": after["size_bytes"],
        "per_layer_profile": None,
    }
    if extra:
        report.update(extra)
    return report


@dataclass
class PruneOptions:
    strategy: str = "after-training"
    threshold: float = 0.5
    rounds: int = 10
    scope: str = "global"
    alpha: float = 4.0
    sparse_epochs: int = 0
    fine_tune: bool = True
    fine_tune_epochs: int | None = None

    def validate(self):
        if self.strategy not in S.STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; choose from {S.STRATEGIES}")
        return self


def run_strategy(exp: Experiment, opts: PruneOptions, cfg: M.TrainConfig,
                 seed: int, baseline: M.ModelGraph | None = None):
    """Produce the pruned model for one (strategy, threshold) cell.

    Returns (model, report dict). ``baseline`` supplies the trained dense
    model for post-training strategies; when omitted one is trained here.
    """
    opts.validate()
    p = opts.threshold

    def trained_baseline():
        if baseline is not None:
            return baseline.clone()
        log.info("no baseline supplied; training one (%d epochs)", cfg.epochs)
        model, _ = train_baseline(exp, cfg, seed=seed)
        return model

    if opts.strategy == "after-training":
        model = trained_baseline()
        before = model_snapshot(model)
        state = P.prune_after_training(model, p, opts.scope)
        profile = P.per_layer_sparsity_profile(state, model)
        return model, prune_report(opts.strategy, p, before, model_snapshot(model),
                                   {"per_layer_profile": profile})

    if opts.strategy == "opt-nilm":
        model = exp.build_model(seed)
        before = model_snapshot(model)
        P.pretrain_prune(model, exp.train, p, opts.rounds, cfg)
        rewind_ok = P.verify_rewind(model)
        M.train(model, exp.train, cfg)
        state = P.PruneState(P.UNSTRUCTURED, p, model.masks or {})
        profile = P.per_layer_sparsity_profile(state, model)
        return model, prune_report(opts.strategy, p, before, model_snapshot(model),
                                   {"per_layer_profile": profile,
                                    "rewind_verified": rewind_ok,
                                    "pretrain_rounds": opts.rounds})

    if opts.strategy == "optimized-structured":
        model = trained_baseline()
        before = model_snapshot(model)
        state = P.magnitude_mask(model, p, scope="global")
        profile = P.per_layer_sparsity_profile(state, model)
        compact = G.structured_prune_by_profile(model, profile[:-1])
        if opts.fine_tune and p > 0:
            n = (opts.fine_tune_epochs if opts.fine_tune_epochs is not None
                 else max(1, round(0.2 * cfg.epochs)))
            ft = M.TrainConfig(epochs=n, batch_size=cfg.batch_size,
                               learning_rate=cfg.learning_rate, seed=seed,
                               optimizer=cfg.optimizer)
            M.train(compact, exp.train, ft)
        return compact, prune_report(opts.strategy, p, before, model_snapshot(compact),
                                     {"per_layer_profile": profile})

    # dg-structured
    model = trained_baseline()
    before = model_snapshot(model)
    compact, _state = G.dg_structured_prune(
        model, exp.train, p, cfg, sparse_epochs=opts.sparse_epochs,
        alpha=opts.alpha, fine_tune=opts.fine_tune,
        fine_tune_epochs=opts.fine_tune_epochs)
    return compact, prune_report(opts.strategy, p, before, model_snapshot(compact))


def sweep_experiment(exp: Experiment, opts: PruneOptions, cfg: M.TrainConfig,
                     thresholds, appliance: str = "") -> S.SweepCurve:
    """Evaluate one strategy across a threshold grid.

    The dense baseline is trained once per sweep (post-training strategies
    reuse clones of it); each point still carries its own derived seed for
    strategy-internal randomness.
    """
    baseline, _ = train_baseline(exp, cfg)

    def evaluate_point(threshold: float, seed: int) -> dict:
        if threshold == 0.0:
            model = baseline
        else:
            point_opts = PruneOptions(**{**opts.__dict__, "threshold": threshold})
            model, _ = run_strategy(exp, point_opts, cfg, seed, baseline=baseline)
        rep = evaluate(model, exp)
        return {
            "f1": rep.f1, "mae": rep.mae, "smape": rep.smape, "mre": rep.mre,
            "params": M.count_params(model)["nonzero"],
            "macs": M.count_macs(model),
            "size_bytes": M.size_on_disk_bytes(model),
        }

    return S.sweep(evaluate_point, thresholds, opts.strategy, appliance,
                   base_seed=cfg.seed)
