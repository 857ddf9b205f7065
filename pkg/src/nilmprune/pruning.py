"""Unstructured magnitude pruning and the iterative pre-training scheme.

Masking ranks weights by |w| only; biases survive masking and are removed
solely when structured pruning deletes their unit. Ties between equal
magnitudes break by (layer index, flat index) ascending so every run is
reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ConfigError

log = logging.getLogger(__name__)

MAX_SPARSITY = 0.95

UNSTRUCTURED = "unstructured"
STRUCTURED = "structured"


@dataclass
class PruneState:
    """What a pruning pass decided: masks (unstructured) or removed output
    units per layer (structured), plus the sparsity it was asked for."""

    mode: str
    applied_sparsity: float = 0.0
    weight_masks: dict[int, np.ndarray] = field(default_factory=dict)
    removed_units: dict[int, np.ndarray] = field(default_factory=dict)

    def attach(self, model: M.ModelGraph) -> None:
        if self.mode != UNSTRUCTURED:
            raise ConfigError("only unstructured states attach as masks")
        model.masks = self.weight_masks
        model.apply_masks()

    def zero_count(self) -> int:
        return sum(int((~m).sum()) for m in self.weight_masks.values())


def masked_count(n_weights: int, sparsity: float) -> int:
    """How many weights a sparsity fraction masks (round-half-even)."""
    return int(np.rint(sparsity * n_weights))


def surviving_count(n_weights: int, sparsity: float) -> int:
    return n_weights - masked_count(n_weights, sparsity)


def _check_sparsity(s: float) -> float:
    if not 0.0 <= s <= MAX_SPARSITY:
        raise ConfigError(f"sparsity must lie in [0, {MAX_SPARSITY}], got {s}")
    return float(s)


def _weight_layers(model: M.ModelGraph):
    return [(i, model.weights[i].data) for i in model.param_layers()]


def magnitude_mask(model: M.ModelGraph, sparsity: float,
                   scope: str = "global") -> PruneState:
    """Mask the smallest-|w| weights at the requested sparsity.

    ``global`` ranks every weight in one pool; ``per-layer`` masks each layer
    at the same fraction independently.
    """
    s = _check_sparsity(sparsity)
    if scope not in ("global", "per-layer"):
        raise ConfigError(f"scope must be 'global' or 'per-layer', got {scope!r}")
    layers = _weight_layers(model)
    state = PruneState(UNSTRUCTURED, applied_sparsity=s)

    if scope == "per-layer":
        for i, w in layers:
            flat = np.abs(w.reshape(-1))
            k = masked_count(flat.size, s)
            mask = np.ones(flat.size, dtype=bool)
            if k:
                mask[np.argsort(flat, kind="stable")[:k]] = False
            state.weight_masks[i] = mask.reshape(w.shape)
        return state

    mags = np.concatenate([np.abs(w.reshape(-1)) for _, w in layers]) if layers else np.array([])
    k = masked_count(mags.size, s)
    flat_mask = np.ones(mags.size, dtype=bool)
    if k:
        # stable sort preserves (layer, flat index) order among ties
        flat_mask[np.argsort(mags, kind="stable")[:k]] = False
    off = 0
    for i, w in layers:
        state.weight_masks[i] = flat_mask[off:off + w.size].reshape(w.shape)
        off += w.size
    return state


def prune_after_training(model: M.ModelGraph, sparsity: float,
                         scope: str = "global") -> PruneState:
    """One-shot magnitude mask on a trained model; no fine-tuning follows."""
    if model.epochs_trained == 0:
        log.warning("pruning a model with no recorded training epochs")
    state = magnitude_mask(model, sparsity, scope)
    state.attach(model)
    return state


def pretrain_prune(model: M.ModelGraph, dataset, target_sparsity: float,
                   rounds: int, cfg: M.TrainConfig,
                   round_callback=None) -> PruneState:
    """Locate a trainable sub-network before full training.

    Each round trains one epoch, extends the mask so cumulative sparsity
    reaches 1 - (1-p)^(r/R), then resets every surviving weight to its
    initial value. Masks only grow (a pruned weight never revives) and the
    returned model is rewound, masked, and ready for full training.
    ``round_callback(round_index, masks)`` observes a copy of the mask state
    after each round.
    """
    p = _check_sparsity(target_sparsity)
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    n_weights = M.param_counts_from_specs(model.specs)["weights"]
    layers = _weight_layers(model)

    round_cfg = M.TrainConfig(epochs=1, batch_size=cfg.batch_size,
                              learning_rate=cfg.learning_rate, seed=cfg.seed,
                              loss=cfg.loss, optimizer=cfg.optimizer,
                              shuffle=cfg.shuffle)
    state = PruneState(UNSTRUCTURED, applied_sparsity=p)
    state.weight_masks = {i: np.ones(w.shape, dtype=bool) for i, w in layers}
    masked_so_far = 0
    for r in range(1, rounds + 1):
        model.masks = state.weight_masks
        model.apply_masks()
        M.train(model, dataset, round_cfg)
        target_zeros = masked_count(n_weights, 1.0 - (1.0 - p) ** (r / rounds))
        new_zeros = target_zeros - masked_so_far
        if new_zeros > 0:
            alive_mags = []
            for i, w in layers:
                m = state.weight_masks[i].reshape(-1)
                mags = np.abs(w.reshape(-1)).copy()
                mags[~m] = np.inf  # already-pruned weights never re-rank
                alive_mags.append(mags)
            pool = np.concatenate(alive_mags)
            kill = np.argsort(pool, kind="stable")[:new_zeros]
            flat = np.ones(pool.size, dtype=bool)
            flat[kill] = False
            off = 0
            for i, w in layers:
                state.weight_masks[i] &= flat[off:off + w.size].reshape(w.shape)
                off += w.size
            masked_so_far = target_zeros
        model.rewind_to_init()
        if round_callback is not None:
            round_callback(r, {i: m.copy() for i, m in state.weight_masks.items()})
    model.masks = state.weight_masks
    model.apply_masks()
    return state


def per_layer_sparsity_profile(state: PruneState, model: M.ModelGraph) -> list[float]:
    """Fraction of weights masked in each parameter layer, in layer order."""
    if state.mode != UNSTRUCTURED:
        raise ConfigError("per-layer profile needs an unstructured prune state")
    profile = []
    for i in model.param_layers():
        m = state.weight_masks[i]
        profile.append(float((~m).sum() / m.size))
    return profile


def verify_rewind(model: M.ModelGraph) -> bool:
    """True when every surviving weight bit-equals its initial value."""
    if not model.masks:
        return all(np.array_equal(model.weights[i].data, model.init_weights[i])
                   for i in model.param_layers())
    for i in model.param_layers():
        m = model.masks.get(i)
        if m is None:
            if not np.array_equal(model.weights[i].data, model.init_weights[i]):
                return False
        elif not np.array_equal(model.weights[i].data[m], model.init_weights[i][m]):
            return False
    return True
