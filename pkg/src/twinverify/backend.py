"""Numeric kernels with optional numba acceleration.

The inner loops that dominate the training path (row softmax, layer norm,
GELU, scatter-add for gather gradients) exist in two versions: a pure-numpy
one and, when numba is importable, an ``@njit`` twin.  The active set is
chosen once at import time from the ``TWINVERIFY_BACKEND`` environment
variable:

    TWINVERIFY_BACKEND=numpy    force the pure-numpy path
    TWINVERIFY_BACKEND=numba    require numba (raises if unavailable)
    unset or "auto"             numba when importable, numpy otherwise

Both paths evaluate the same float64 formulas; results may differ by a few
ulp because of summation order.  ``benchmarks/bench_backends.py`` times the
two side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# pure numpy kernels
# ---------------------------------------------------------------------------

def np_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array with max subtraction."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_rows_vjp(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Gradient of row softmax given its output ``y`` and upstream ``gy``."""
    inner = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - inner)


def np_layer_norm_rows(x, gamma, beta, eps):
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Returns ``(y, xhat, rstd)``; the latter two are reused by the backward
    pass.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gamma + beta, xhat, rstd


def np_layer_norm_rows_vjp(xhat, rstd, gamma, gy):
    """Gradients of row layer norm w.r.t. input, gamma and beta."""
    dxhat = gy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd * (dxhat - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def np_gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation (same polynomial on both backends)."""
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def np_gelu_vjp(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def np_scatter_add_rows(acc: np.ndarray, idx: np.ndarray, g: np.ndarray) -> None:
    """acc[idx[i], :] += g[i, :] with repeated indices accumulating."""
    np.add.at(acc, idx, g)


def np_scatter_add_flat(acc: np.ndarray, idx: np.ndarray, g: np.ndarray) -> None:
    """acc[idx[i]] += g[i] over flat arrays, repeats accumulate."""
    np.add.at(acc, idx, g)


NUMPY_KERNELS = {
    "softmax_rows": np_softmax_rows,
    "softmax_rows_vjp": np_softmax_rows_vjp,
    "layer_norm_rows": np_layer_norm_rows,
    "layer_norm_rows_vjp": np_layer_norm_rows_vjp,
    "gelu": np_gelu,
    "gelu_vjp": np_gelu_vjp,
    "scatter_add_rows": np_scatter_add_rows,
    "scatter_add_flat": np_scatter_add_flat,
}


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

try:  # pragma: no cover - exercised indirectly through the dispatch table
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    njit = None
    HAVE_NUMBA = False

NUMBA_KERNELS = None

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_softmax_rows(x):
        n, d = x.shape
        out = np.empty((n, d))
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(d):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def nb_softmax_rows_vjp(y, gy):
        n, d = y.shape
        gx = np.empty((n, d))
        for i in range(n):
            inner = 0.0
            for j in range(d):
                inner += y[i, j] * gy[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (gy[i, j] - inner)
        return gx

    @njit(cache=True)
    def nb_layer_norm_rows(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty((n, d))
        xhat = np.empty((n, d))
        rstd = np.empty((n, 1))
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mu
                var += diff * diff
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i, 0] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def nb_layer_norm_rows_vjp(xhat, rstd, gamma, gy):
        n, d = xhat.shape
        gx = np.empty((n, d))
        ggamma = np.zeros(d)
        gbeta = np.zeros(d)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dxh = gy[i, j] * gamma[j]
                m1 += dxh
                m2 += dxh * xhat[i, j]
            m1 /= d
            m2 /= d
            r = rstd[i, 0]
            for j in range(d):
                dxh = gy[i, j] * gamma[j]
                gx[i, j] = r * (dxh - m1 - xhat[i, j] * m2)
                ggamma[j] += gy[i, j] * xhat[i, j]
                gbeta[j] += gy[i, j]
        return gx, ggamma, gbeta

    @njit(cache=True)
    def nb_gelu(x):
        n = x.shape[0]
        out = np.empty(n)
        for i in range(n):
            v = x[i]
            u = _GELU_C * (v + _GELU_A * v * v * v)
            out[i] = 0.5 * v * (1.0 + math.tanh(u))
        return out

    @njit(cache=True)
    def nb_gelu_vjp(x, gy):
        n = x.shape[0]
        gx = np.empty(n)
        for i in range(n):
            v = x[i]
            u = _GELU_C * (v + _GELU_A * v * v * v)
            t = math.tanh(u)
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            gx[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return gx

    @njit(cache=True)
    def nb_scatter_add_rows(acc, idx, g):
        n, d = g.shape
        for i in range(n):
            r = idx[i]
            for j in range(d):
                acc[r, j] += g[i, j]

    @njit(cache=True)
    def nb_scatter_add_flat(acc, idx, g):
        for i in range(idx.shape[0]):
            acc[idx[i]] += g[i]

    def _nb_gelu_shaped(x):
        return nb_gelu(np.ascontiguousarray(x).ravel()).reshape(x.shape)

    def _nb_gelu_vjp_shaped(x, gy):
        flat = nb_gelu_vjp(
            np.ascontiguousarray(x).ravel(), np.ascontiguousarray(gy).ravel()
        )
        return flat.reshape(x.shape)

    NUMBA_KERNELS = {
        "softmax_rows": nb_softmax_rows,
        "softmax_rows_vjp": nb_softmax_rows_vjp,
        "layer_norm_rows": nb_layer_norm_rows,
        "layer_norm_rows_vjp": nb_layer_norm_rows_vjp,
        "gelu": _nb_gelu_shaped,
        "gelu_vjp": _nb_gelu_vjp_shaped,
        "scatter_add_rows": nb_scatter_add_rows,
        "scatter_add_flat": nb_scatter_add_flat,
    }


def _select() -> tuple[str, dict]:
    choice = os.environ.get("TWINVERIFY_BACKEND", "auto").lower()
    if choice not in ("auto", "numpy", "numba"):
        raise ValueError(
            f"TWINVERIFY_BACKEND must be auto, numpy or numba, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy", NUMPY_KERNELS
    if choice == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("TWINVERIFY_BACKEND=numba but numba is not importable")
        return "numba", NUMBA_KERNELS
    if HAVE_NUMBA:
        return "numba", NUMBA_KERNELS
    return "numpy", NUMPY_KERNELS


ACTIVE, _K = _select()

softmax_rows = _K["softmax_rows"]
softmax_rows_vjp = _K["softmax_rows_vjp"]
layer_norm_rows = _K["layer_norm_rows"]
layer_norm_rows_vjp = _K["layer_norm_rows_vjp"]
gelu = _K["gelu"]
gelu_vjp = _K["gelu_vjp"]
scatter_add_rows = _K["scatter_add_rows"]
scatter_add_flat = _K["scatter_add_flat"]
