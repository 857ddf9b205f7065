"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, enumeration, brute force) and
stays independent of the library code paths it checks.
"""

import numpy as np

from nilmprune import kernels, model as M
from nilmprune import tensor as T


def conv1d_reference(x, w, b, stride):
    """Triple-loop valid cross-correlation for a single [C_in, L] input."""
    c_out, c_in, k = w.shape
    l_out = (x.shape[1] - k) // stride + 1
    out = np.zeros((c_out, l_out))
    for o in range(c_out):
        for t in range(l_out):
            acc = b[o]
            for i in range(c_in):
                for j in range(k):
                    acc += x[i, t * stride + j] * w[o, i, j]
            out[o, t] = acc
    return out


def min_preactivation(model, x):
    """Smallest |pre-activation| feeding a ReLU; used to keep finite
    differences away from the kink."""
    h = np.asarray(x, dtype=model.dtype)[None, None, :]
    worst = np.inf
    for i, s in enumerate(model.specs):
        if s.kind == M.CONV:
            h = kernels.conv1d_forward_numpy(h, model.weights[i].data,
                                             model.biases[i].data, s.stride)
        elif s.kind == M.RELU:
            worst = min(worst, float(np.abs(h).min()))
            h = np.maximum(h, 0.0)
        elif s.kind == M.SIGMOID:
            h = 1.0 / (1.0 + np.exp(-h))
        elif s.kind == M.FLATTEN:
            h = h.reshape(h.shape[0], -1)
        elif s.kind == M.LINEAR:
            h = h @ model.weights[i].data.T + model.biases[i].data
    return worst


def draw_gradcheck_case(specs, window, base_seed, kink_margin=1e-3):
    """Deterministically draw (model, x, y) whose ReLU pre-activations stay
    clear of zero, so central differences are valid."""
    for attempt in range(64):
        seed = base_seed * 1000 + attempt
        model = M.ModelGraph(specs, window, seed=seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.normal(size=window)
        y = rng.uniform(size=window)
        if min_preactivation(model, x) > kink_margin:
            return model, x, y
    raise AssertionError("could not find a kink-free gradcheck case")


def loss_value(model, x, y):
    pred = M.forward(model, x)
    diff = pred - y
    return float(np.mean(diff * diff))


def fd_gradients(model, x, y, h=1e-5):
    """Central finite differences of the MSE loss over every parameter."""
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_value(model, x, y)
            flat[j] = orig - h
            lm = loss_value(model, x, y)
            flat[j] = orig
            gf[j] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradients(model, x, y):
    params = model.parameters()
    T.zero_grad(params)
    pred = M._forward_graph(model, T.Tensor(np.asarray(x, dtype=model.dtype)[None, None, :]))
    loss = T.mse_loss(pred, T.Tensor(np.asarray(y, dtype=model.dtype)[None, :]))
    T.backward(loss)
    return [p.grad.copy() for p in params]


def max_rel_error(analytic, numeric, floor=1e-5):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def confusion_counts(truth, pred):
    """Per-sample confusion matrix by explicit iteration."""
    tp = fp = tn = fn = 0
    for t, p in zip(truth, pred):
        if t and p:
            tp += 1
        elif not t and p:
            fp += 1
        elif t and not p:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def run_lengths(states):
    """List of (value, length) runs scanned one sample at a time."""
    runs = []
    for s in states:
        s = bool(s)
        if runs and runs[-1][0] == s:
            runs[-1][1] += 1
        else:
            runs.append([s, 1])
    return [(v, n) for v, n in runs]


def count_on_runs(states):
    return sum(1 for v, _ in run_lengths(states) if v)


def best_threshold_by_enumeration(thresholds, f1s, compressions):
    """Exhaustive argmin of the distance to (F1=1, compression=1); ties go to
    the larger threshold."""
    best = None
    for p, f1, c in zip(thresholds, f1s, compressions):
        d = ((1.0 - f1) ** 2 + (1.0 - c) ** 2) ** 0.5
        if best is None or d < best[0] - 1e-15 or (abs(d - best[0]) <= 1e-15 and p > best[1]):
            best = (d, p)
    return best[1]
