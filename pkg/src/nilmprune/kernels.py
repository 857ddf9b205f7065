"""1-D convolution kernels: the hot inner loops of training.

Two interchangeable backends compute identical quantities:

* ``numba`` (default): explicit loop nests compiled with ``@njit``.
* ``numpy``: stride-trick windows contracted with einsum/tensordot.

Set ``NILMPRUNE_NO_NUMBA=1`` to force the pure-numpy path (also used
automatically when numba is not importable). ``kernels.BACKEND`` reports
which path is active. ``benchmarks/benchmark_kernels.py`` compares the two.

Layouts: input ``x[B, C_in, L]``, kernels ``w[C_out, C_in, K]``, bias
``b[C_out]``, output ``y[B, C_out, L_out]`` with
``L_out = (L - K) // stride + 1`` (valid cross-correlation, no padding).
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "conv1d_forward_numpy",
    "conv1d_backward_numpy",
]


def _numpy_forced() -> bool:
    return os.environ.get("NILMPRUNE_NO_NUMBA", "").strip() not in ("", "0")


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [B, C_in, L] -> [B, C_in, L_out, K] view, no copy
    w = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)
    return w[:, :, ::stride, :]


def conv1d_forward_numpy(x, w, b, stride):
    xw = _windows(x, w.shape[2], stride)
    out = np.einsum("bilk,oik->bol", xw, w, optimize=True)
    out += b[None, :, None]
    return np.ascontiguousarray(out)


def conv1d_backward_numpy(x, w, g, stride):
    """Gradients w.r.t. (x, w, b) given upstream gradient g[B, C_out, L_out]."""
    k = w.shape[2]
    l_out = g.shape[2]
    xw = _windows(x, k, stride)
    gw = np.einsum("bot,bitk->oik", g, xw, optimize=True)
    gb = g.sum(axis=(0, 2))
    # dx[b, i, t*stride + j] += sum_o g[b, o, t] * w[o, i, j]
    gi = np.einsum("bot,oij->bitj", g, w, optimize=True)
    gx = np.zeros_like(x)
    offsets = stride * np.arange(l_out)
    for j in range(k):
        np.add.at(gx, (slice(None), slice(None), offsets + j), gi[:, :, :, j])
    return gx, gw, gb


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

BACKEND = "numpy"
conv1d_forward = conv1d_forward_numpy
conv1d_backward = conv1d_backward_numpy

if not _numpy_forced():
    try:
        from numba import njit

        # the long output axis runs innermost so stride-1 loops vectorize

        @njit(cache=True)
        def _conv1d_forward_nb(x, w, b, stride):  # pragma: no cover - jitted
            nb_, c_in, l = x.shape
            c_out, _, k = w.shape
            l_out = (l - k) // stride + 1
            y = np.empty((nb_, c_out, l_out), dtype=x.dtype)
            for n in range(nb_):
                for o in range(c_out):
                    acc = np.full(l_out, b[o], dtype=x.dtype)
                    for i in range(c_in):
                        for j in range(k):
                            wv = w[o, i, j]
                            for t in range(l_out):
                                acc[t] += x[n, i, t * stride + j] * wv
                    y[n, o] = acc
            return y

        @njit(cache=True)
        def _conv1d_backward_nb(x, w, g, stride):  # pragma: no cover - jitted
            nb_, c_in, l = x.shape
            c_out, _, k = w.shape
            l_out = g.shape[2]
            gx = np.zeros_like(x)
            gw = np.zeros_like(w)
            gb = np.zeros(c_out, dtype=w.dtype)
            for o in range(c_out):
                s = 0.0
                for n in range(nb_):
                    for t in range(l_out):
                        s += g[n, o, t]
                gb[o] = s
            for n in range(nb_):
                for o in range(c_out):
                    for i in range(c_in):
                        for j in range(k):
                            wv = w[o, i, j]
                            acc = 0.0
                            for t in range(l_out):
                                go = g[n, o, t]
                                acc += go * x[n, i, t * stride + j]
                                gx[n, i, t * stride + j] += go * wv
                            gw[o, i, j] += acc
            return gx, gw, gb

        BACKEND = "numba"
        conv1d_forward = _conv1d_forward_nb
        conv1d_backward = _conv1d_backward_nb
    except ImportError:  # numba unavailable: stay on numpy
        pass


def set_thread_cap(n: int) -> None:
    """Cap numba's worker threads (no-op on the numpy path)."""
    if BACKEND != "numba":
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
