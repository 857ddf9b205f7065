"""Dependency-graph structured pruning: model unit couplings, group them,
score them, and physically remove whole units.

Every layer contributes an input-scheme node and an output-scheme node.
Adjacent layers share an edge (consumer input <-> producer output); element-
wise layers tie their own input and output together; Flatten ties channel c
to the feature block [c*B, (c+1)*B). Connected components of this graph are
the parameter groups: pruning one unit of a group prunes the mapped units of
every member, which is what keeps the rebuilt network consistent.

Also provides the per-layer profile-guided structured pruning that removes a
given fraction of smallest-L1 units in each layer independently (deriving the
fractions from an unstructured mask), with downstream axes fixed up through
the same graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, DependencyError
from .pruning import PruneState, STRUCTURED

log = logging.getLogger(__name__)

IDENTITY = "identity"
BLOCK = "block"


@dataclass(frozen=True)
class SchemeNode:
    layer: int
    side: str  # "in" | "out"
    units: int


@dataclass
class DependencyGraph:
    specs: list
    nodes: list[SchemeNode]
    adj: np.ndarray  # boolean [2L, 2L]
    edge_maps: dict  # (a, b) -> (IDENTITY, 1) | (BLOCK, block_len)

    def node_index(self, layer: int, side: str) -> int:
        return 2 * layer + (0 if side == "in" else 1)


@dataclass
class GroupMember:
    layer: int
    side: str
    map_kind: str = IDENTITY
    block: int = 1

    def expand(self, units: np.ndarray) -> np.ndarray:
        """Concrete axis indices implied by canonical unit indices."""
        units = np.asarray(units, dtype=int)
        if self.map_kind == IDENTITY:
            return units
        return (units[:, None] * self.block + np.arange(self.block)).reshape(-1)


@dataclass
class ParameterGroup:
    units: int
    members: list[GroupMember] = field(default_factory=list)

    def member(self, layer: int, side: str) -> GroupMember | None:
        for m in self.members:
            if m.layer == layer and m.side == side:
                return m
        return None

    def param_members(self, specs) -> list[GroupMember]:
        return [m for m in self.members if specs[m.layer].has_params]


def _unit_counts(specs, window_len):
    """(in_units, out_units) per layer, walking the chain shapes."""
    counts = []
    ch = 1
    shapes = M.infer_shapes(specs, window_len) if window_len else None
    for i, s in enumerate(specs):
        if s.kind == M.CONV:
            counts.append((s.in_ch, s.out_ch))
            ch = s.out_ch
        elif s.kind == M.LINEAR:
            counts.append((s.in_f, s.out_f))
            ch = s.out_f
        elif s.kind == M.FLATTEN:
            if shapes is None:
                raise ConfigError("flatten in the chain requires a window length")
            feats = shapes[i][0]
            counts.append((ch, feats))
            ch = feats
        elif s.kind in (M.RELU, M.SIGMOID):
            counts.append((ch, ch))
        else:
            raise ConfigError(f"unsupported layer kind {s.kind!r} in dependency graph")
    return counts


def build_dependency_graph(model_or_specs, window_len=None) -> DependencyGraph:
    """Adjacency over the 2L scheme nodes plus per-edge index transforms."""
    if isinstance(model_or_specs, M.ModelGraph):
        specs = model_or_specs.specs
        window_len = model_or_specs.window_len
    else:
        specs = list(model_or_specs)
    counts = _unit_counts(specs, window_len)

    n = 2 * len(specs)
    adj = np.zeros((n, n), dtype=bool)
    edge_maps = {}
    nodes = []
    for i, s in enumerate(specs):
        nodes.append(SchemeNode(i, "in", counts[i][0]))
        nodes.append(SchemeNode(i, "out", counts[i][1]))

    def connect(a, b, kind=IDENTITY, block=1):
        adj[a, b] = adj[b, a] = True
        edge_maps[(a, b)] = (kind, block)
        edge_maps[(b, a)] = (kind, block)

    for i, s in enumerate(specs):
        if i > 0:
            connect(2 * i, 2 * (i - 1) + 1)  # this input <-> producer output
        if s.kind in (M.RELU, M.SIGMOID):
            connect(2 * i, 2 * i + 1)
        elif s.kind == M.FLATTEN:
            block = counts[i][1] // counts[i][0]
            connect(2 * i, 2 * i + 1, BLOCK, block)
    return DependencyGraph(specs, nodes, adj, edge_maps)


def group_parameters(dg: DependencyGraph) -> list[ParameterGroup]:
    """Connected components of the dependency graph, with the canonical unit
    axis chosen as the coarsest scheme (channels, not flattened features)."""
    n = len(dg.nodes)
    seen = np.zeros(n, dtype=bool)
    groups = []
    for start in range(n):
        if seen[start]:
            continue
        comp = []
        stack = [start]
        seen[start] = True
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in np.flatnonzero(dg.adj[a]):
                if not seen[b]:
                    seen[b] = True
                    stack.append(int(b))

        canon = min(comp, key=lambda i: (dg.nodes[i].units, i))
        units = dg.nodes[canon].units
        # propagate index transforms outward from the canonical node
        kinds = {canon: (IDENTITY, 1)}
        stack = [canon]
        while stack:
            a = stack.pop()
            for b in np.flatnonzero(dg.adj[a]):
                b = int(b)
                if b in kinds:
                    continue
                ek, eb = dg.edge_maps[(a, b)]
                ak, ab = kinds[a]
                if ek == IDENTITY:
                    kinds[b] = (ak, ab)
                elif ak == IDENTITY:
                    kinds[b] = (BLOCK, eb)
                else:
                    raise DependencyError("nested flatten transforms are not supported")
                stack.append(b)
        members = [GroupMember(dg.nodes[i].layer, dg.nodes[i].side, *kinds[i])
                   for i in sorted(comp)]
        groups.append(ParameterGroup(units, members))
    return groups


# ---------------------------------------------------------------------------
# importance and regularization
# ---------------------------------------------------------------------------

def _unit_square_sums(model: M.ModelGraph, group: ParameterGroup) -> np.ndarray:
    """Sum of squared parameters implicated by each canonical unit."""
    acc = np.zeros(group.units)
    for m in group.param_members(model.specs):
        w = model.weights[m.layer].data
        b = model.biases[m.layer].data
        spec = model.specs[m.layer]
        if m.side == "out":
            sq = (w * w).reshape(w.shape[0], -1).sum(axis=1) + b * b
        else:
            axis_sq = (w * w).sum(axis=(0, 2)) if spec.kind == M.CONV else (w * w).sum(axis=0)
            if m.map_kind == BLOCK:
                sq = axis_sq.reshape(group.units, m.block).sum(axis=1)
            else:
                sq = axis_sq
        acc += sq
    return acc


def group_unit_l2(model: M.ModelGraph, group: ParameterGroup) -> np.ndarray:
    return np.sqrt(_unit_square_sums(model, group))


def group_importance(model: M.ModelGraph, groups, top_p: int | None = None):
    """Per-unit scores normalized within each group: P * I / sum(top-P of I).

    P clamps to the group size. The transform is monotone, so rankings match
    the raw L2 importances.
    """
    scores = []
    for g in groups:
        raw = group_unit_l2(model, g)
        if raw.size == 0:
            scores.append(raw)
            continue
        p = raw.size if top_p is None else max(1, min(top_p, raw.size))
        denom = np.sort(raw)[::-1][:p].sum()
        if denom <= 0:
            scores.append(np.zeros_like(raw))
        else:
            scores.append(p * raw / denom)
    return scores


def _gamma(raw: np.ndarray, alpha: float) -> np.ndarray:
    """Shrinkage strength per unit: low-importance units get up to 2**alpha.

    When all importances coincide the exponent is degenerate; every unit then
    takes the full 2**alpha."""
    i_max, i_min = float(raw.max()), float(raw.min())
    if i_max - i_min <= 1e-12:
        return np.full_like(raw, 2.0 ** alpha)
    return 2.0 ** (alpha * (i_max - raw) / (i_max - i_min))


def group_regularizer(model: M.ModelGraph, groups, alpha: float = 4.0) -> T.Tensor:
    """Differentiable penalty sum(gamma_c * ||unit c||^2) over all groups."""
    coeff_w = {i: np.zeros_like(model.weights[i].data) for i in model.param_layers()}
    coeff_b = {i: np.zeros_like(model.biases[i].data) for i in model.param_layers()}
    for g in groups:
        pm = g.param_members(model.specs)
        if not pm:
            log.warning("skipping group with no parameters: %s", g.members)
            continue
        gamma = _gamma(group_unit_l2(model, g), alpha)
        for m in pm:
            spec = model.specs[m.layer]
            if m.side == "out":
                shape = (-1,) + (1,) * (model.weights[m.layer].data.ndim - 1)
                coeff_w[m.layer] += gamma.reshape(shape)
                coeff_b[m.layer] += gamma
            else:
                per_axis = np.repeat(gamma, m.block) if m.map_kind == BLOCK else gamma
                if spec.kind == M.CONV:
                    coeff_w[m.layer] += per_axis[None, :, None]
                else:
                    coeff_w[m.layer] += per_axis[None, :]
    total = None
    for i in model.param_layers():
        for t, c in ((model.weights[i], coeff_w[i]), (model.biases[i], coeff_b[i])):
            term = T.sum_(T.mul(T.mul(t, t), c))
            total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# structural removal
# ---------------------------------------------------------------------------

def _axis_group_table(groups):
    table = {}
    for g in groups:
        for m in g.members:
            table[(m.layer, m.side)] = (g, m)
    return table


def _protected_groups(model: M.ModelGraph, groups) -> set[int]:
    """Groups that may never lose units: the model-input scheme and the
    final output layer's units (output length is the window)."""
    last_param = model.param_layers()[-1]
    out = set()
    for k, g in enumerate(groups):
        for m in g.members:
            if m.layer == 0 and m.side == "in":
                out.add(k)
            if m.layer == last_param and m.side == "out":
                out.add(k)
    return out


def _kept_axis_counts(model, groups, removals):
    """(kept_in, kept_out) per param layer under per-group removal counts."""
    table = _axis_group_table(groups)
    gid = {id(g): k for k, g in enumerate(groups)}
    kept = {}
    for i in model.param_layers():
        spec = model.specs[i]
        n_out = spec.units()
        n_in = spec.in_ch if spec.kind == M.CONV else spec.in_f
        g_out, _ = table[(i, "out")]
        g_in, m_in = table[(i, "in")]
        r_out = removals.get(gid[id(g_out)], 0)
        r_in = removals.get(gid[id(g_in)], 0) * m_in.block
        kept[i] = (n_in - r_in, n_out - r_out)
    return kept


def _params_after(model, groups, removals) -> int:
    total = 0
    for i, (k_in, k_out) in _kept_axis_counts(model, groups, removals).items():
        spec = model.specs[i]
        if spec.kind == M.CONV:
            total += k_out * k_in * spec.kernel + k_out
        else:
            total += k_out * k_in + k_out
    return total


def removal_sets_for_sparsity(model: M.ModelGraph, groups, scores,
                              sparsity: float) -> dict[int, np.ndarray]:
    """Pick per-layer unit removals reaching the parameter sparsity target.

    Every prunable group sheds the same fraction of its units (its lowest-
    scored ones); the fraction is the smallest one whose joint parameter
    reduction meets the target. Raises when the target is unreachable even
    with every prunable group down to a single unit, naming a pinned layer.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1], got {sparsity}")
    total = M.param_counts_from_specs(model.specs)["total"]
    budget = int(np.ceil((1.0 - sparsity) * total))
    protected = _protected_groups(model, groups)
    prunable = [k for k in range(len(groups)) if k not in protected]

    def counts_at(phi: float) -> dict[int, int]:
        out = {}
        for k in prunable:
            u = groups[k].units
            out[k] = min(u - 1, int(np.rint(phi * u)))
        return out

    if _params_after(model, groups, counts_at(0.0)) <= budget:
        return {}
    if _params_after(model, groups, counts_at(1.0)) > budget:
        pinned = sorted({m.layer for k in prunable for m in groups[k].members
                         if model.specs[m.layer].has_params})
        raise ConfigError(
            f"sparsity {sparsity} unreachable: layer {pinned[0]} would lose all units; "
            "lower the target")
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = (lo + hi) / 2
        if _params_after(model, groups, counts_at(mid)) <= budget:
            hi = mid
        else:
            lo = mid
    chosen = counts_at(hi)
    sets = {}
    for k, n_remove in chosen.items():
        if n_remove <= 0:
            continue
        order = np.argsort(scores[k], kind="stable")[:n_remove]
        sets[k] = np.sort(order)
    return sets


def _group_removals_to_state(model, groups, group_removals) -> PruneState:
    state = PruneState(STRUCTURED)
    for k, units in group_removals.items():
        for m in groups[k].members:
            if m.side == "out" and model.specs[m.layer].has_params:
                state.removed_units[m.layer] = np.asarray(units, dtype=int)
    return state


def rebuild_dense(model: M.ModelGraph, state: PruneState) -> M.ModelGraph:
    """New model with the removed units physically absent.

    For any input, the rebuilt forward pass equals the original one with the
    removed units' parameters zeroed (interior activations map 0 to 0).
    """
    if state.mode != STRUCTURED:
        raise ConfigError("rebuild_dense needs a structured prune state")
    dg = build_dependency_graph(model)
    groups = group_parameters(dg)
    table = _axis_group_table(groups)
    last_param = model.param_layers()[-1]

    removed_by_group: dict[int, np.ndarray] = {}
    gid = {id(g): k for k, g in enumerate(groups)}
    for layer, units in state.removed_units.items():
        spec = model.specs[layer]
        if not spec.has_params:
            raise DependencyError(f"layer {layer} has no removable units")
        if layer == last_param and len(units):
            raise DependencyError("the output layer's units are protected")
        units = np.unique(np.asarray(units, dtype=int))
        if len(units) and (units.min() < 0 or units.max() >= spec.units()):
            raise DependencyError(f"layer {layer}: removal index out of range")
        if len(units) >= spec.units():
            raise DependencyError(f"layer {layer}: cannot remove every unit")
        g, _ = table[(layer, "out")]
        k = gid[id(g)]
        if k in removed_by_group and not np.array_equal(removed_by_group[k], units):
            raise DependencyError(
                f"inconsistent removal sets within group {k}: members "
                f"{[(m.layer, m.side) for m in g.members]}")
        removed_by_group[k] = units

    kept_axis = {}
    for i in model.param_layers():
        spec = model.specs[i]
        g_out, _ = table[(i, "out")]
        g_in, m_in = table[(i, "in")]
        removed_out = removed_by_group.get(gid[id(g_out)], np.empty(0, dtype=int))
        kept_out = np.setdiff1d(np.arange(spec.units()), removed_out)
        n_in = spec.in_ch if spec.kind == M.CONV else spec.in_f
        removed_in_units = removed_by_group.get(gid[id(g_in)], np.empty(0, dtype=int))
        kept_in = np.setdiff1d(np.arange(n_in), m_in.expand(removed_in_units))
        kept_axis[i] = (kept_in, kept_out)

    new_specs = []
    for i, s in enumerate(model.specs):
        if not s.has_params:
            new_specs.append(M.LayerSpec(**{**s.__dict__}))
            continue
        kept_in, kept_out = kept_axis[i]
        if s.kind == M.CONV:
            new_specs.append(M.conv(len(kept_in), len(kept_out), s.kernel, s.stride))
        else:
            new_specs.append(M.linear(len(kept_in), len(kept_out)))

    out = M.ModelGraph.__new__(M.ModelGraph)
    out.specs = new_specs
    out.window_len = model.window_len
    out.seed = model.seed
    out.dtype = model.dtype
    out.epochs_trained = model.epochs_trained
    out.masks = None
    out.weights, out.biases = [], []
    out.init_weights, out.init_biases = [], []
    for i, s in enumerate(model.specs):
        if not s.has_params:
            out.weights.append(None)
            out.biases.append(None)
            out.init_weights.append(None)
            out.init_biases.append(None)
            continue
        kept_in, kept_out = kept_axis[i]
        w = model.weights[i].data
        sel = np.ix_(kept_out, kept_in) if s.kind == M.LINEAR else np.ix_(kept_out, kept_in, np.arange(s.kernel))
        out.weights.append(T.Tensor(np.ascontiguousarray(w[sel]), requires_grad=True))
        out.biases.append(T.Tensor(model.biases[i].data[kept_out].copy(), requires_grad=True))
        out.init_weights.append(np.ascontiguousarray(model.init_weights[i][sel]))
        out.init_biases.append(model.init_biases[i][kept_out].copy())
        if model.masks and i in model.masks:
            out.masks = out.masks or {}
            out.masks[i] = np.ascontiguousarray(model.masks[i][sel])
    M.infer_shapes(out.specs, out.window_len)  # chain stays consistent
    return out


def zero_removed_units(model: M.ModelGraph, state: PruneState) -> M.ModelGraph:
    """Clone with removed units' parameters zeroed in place (shapes kept);
    the masked counterpart rebuild_dense is checked against."""
    out = model.clone()
    for layer, units in state.removed_units.items():
        units = np.asarray(units, dtype=int)
        out.weights[layer].data[units] = 0.0
        out.biases[layer].data[units] = 0.0
    return out


# ---------------------------------------------------------------------------
# profile-guided structured pruning (per-layer L1 ranking)
# ---------------------------------------------------------------------------

def _layer_unit_l1(model: M.ModelGraph, layer: int) -> np.ndarray:
    w = model.weights[layer].data
    b = model.biases[layer].data
    return np.abs(w).reshape(w.shape[0], -1).sum(axis=1) + np.abs(b)


def structured_prune_by_profile(model: M.ModelGraph, profile) -> M.ModelGraph:
    """Remove round(f_l * units_l) smallest-L1 units in each prunable layer.

    The profile covers the parameter layers in order, excluding the final
    output layer. Downstream input axes follow through the dependency graph.
    A fraction that rounds to the whole layer keeps one unit (entries >= 1.0
    are rejected outright).
    """
    layers = model.param_layers()[:-1]
    profile = list(profile)
    if len(profile) != len(layers):
        raise ConfigError(
            f"profile has {len(profile)} entries but the model has {len(layers)} prunable layers")
    state = PruneState(STRUCTURED)
    for f, i in zip(profile, layers):
        if not 0.0 <= f < 1.0:
            raise ConfigError(f"profile entry {f} for layer {i} must lie in [0, 1)")
        units = model.specs[i].units()
        k = min(units - 1, int(np.rint(f * units)))
        if k <= 0:
            continue
        order = np.argsort(_layer_unit_l1(model, i), kind="stable")[:k]
        state.removed_units[i] = np.sort(order)
    return rebuild_dense(model, state)


# ---------------------------------------------------------------------------
# end-to-end pipeline
# ---------------------------------------------------------------------------

def dg_structured_prune(model: M.ModelGraph, dataset, sparsity: float,
                        cfg: M.TrainConfig | None = None, *,
                        sparse_epochs: int = 0, alpha: float = 4.0,
                        reg_coeff: float = 1e-4, top_p: int | None = None,
                        fine_tune: bool = True,
                        fine_tune_epochs: int | None = None):
    """Dependency-modeled compaction: optional sparse training with the group
    regularizer, importance scoring, group-consistent unit removal to the
    parameter-sparsity target, dense rebuild, optional fine-tune.

    Returns (compact_model, prune_state).
    """
    dg = build_dependency_graph(model)
    groups = group_parameters(dg)
    if sparse_epochs > 0:
        if dataset is None or cfg is None:
            raise ConfigError("sparse training needs a dataset and a train config")
        sparse_cfg = M.TrainConfig(epochs=sparse_epochs, batch_size=cfg.batch_size,
                                   learning_rate=cfg.learning_rate, seed=cfg.seed,
                                   optimizer=cfg.optimizer, shuffle=cfg.shuffle)
        M.train(model, dataset, sparse_cfg,
                loss_extra=lambda m: T.mul(group_regularizer(m, groups, alpha), reg_coeff))
    scores = group_importance(model, groups, top_p)
    sets = removal_sets_for_sparsity(model, groups, scores, sparsity)
    state = _group_removals_to_state(model, groups, sets)
    compact = rebuild_dense(model, state)
    if fine_tune and sparsity > 0 and dataset is not None and cfg is not None:
        n = fine_tune_epochs if fine_tune_epochs is not None else max(1, round(0.2 * cfg.epochs))
        ft_cfg = M.TrainConfig(epochs=n, batch_size=cfg.batch_size,
                               learning_rate=cfg.learning_rate, seed=cfg.seed + 1,
                               optimizer=cfg.optimizer, shuffle=cfg.shuffle)
        M.train(compact, dataset, ft_cfg)
    return compact, state
