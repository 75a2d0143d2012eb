"""Fused multi-draw Gumbel-softmax passes over a logit matrix.

Noise is counter-based: entry ``(i, j)`` of draw ``k`` is a pure function of
``(key, k, i, j)`` through splitmix64, so the backward pass replays any draw
exactly without storing it. The numpy functions here compute the same
numbers elementwise and serve as the reference for the compiled kernels.
"""
from __future__ import annotations

import numba
import numpy as np

# the bundled TBB is often too old; it only triggers a warning before falling back
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 2.0 ** -53


def _mix(x):
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def gumbel_noise_reference(key: int, k: int, shape) -> np.ndarray:
    n_rows, n_cols = shape
    with np.errstate(over="ignore"):
        base = _mix(np.uint64(key) + np.uint64(k))
        counter = np.arange(n_rows * n_cols, dtype=np.uint64).reshape(n_rows, n_cols)
        h = _mix(base + counter)
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _TO_UNIT
    return -np.log(-np.log(u))


@numba.njit(cache=True, inline="always")
def _mix_nb(x):
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


# exp((logp + g) / tau) = p^(1/tau) * (-log u)^(-1/tau): one log per entry and draw.
# -log u >= 5.5e-17 bounds the second factor by e^(37/tau); below _TAU_FAST the
# kernels fall back to the max-shifted log-domain form.
_TAU_FAST = 0.1


@numba.njit(cache=True, inline="always")
def _row_weights(logp, tau, w):
    n = logp.shape[0]
    top = -np.inf
    for j in range(n):
        if logp[j] > top:
            top = logp[j]
    for j in range(n):
        w[j] = np.exp((logp[j] - top) / tau)


@numba.njit(cache=True, inline="always")
def _draw_row(logp, w, key, k, i, tau, y):
    n = logp.shape[0]
    base = _mix_nb(np.uint64(key) + np.uint64(k)) + np.uint64(i) * np.uint64(n)
    total = 0.0
    if tau >= _TAU_FAST:
        inv_tau = 1.0 / tau
        for j in range(n):
            h = _mix_nb(base + np.uint64(j))
            t = -np.log((np.float64(h >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16)
            if inv_tau == 2.0:
                e = w[j] / (t * t)
            else:
                e = w[j] * t ** (-inv_tau)
            y[j] = e
            total += e
    else:
        top = -np.inf
        for j in range(n):
            h = _mix_nb(base + np.uint64(j))
            u = (np.float64(h >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
            z = (logp[j] - np.log(-np.log(u))) / tau
            y[j] = z
            if z > top:
                top = z
        for j in range(n):
            e = np.exp(y[j] - top)
            y[j] = e
            total += e
    inv = 1.0 / total
    for j in range(n):
        y[j] *= inv


@numba.njit(cache=True, parallel=True)
def relaxed_sums(logp, key, tau, gamma):
    """Row-wise sum over ``gamma`` draws of ``softmax((logp + g_k) / tau)``."""
    m, n = logp.shape
    out = np.zeros((m, n))
    for i in numba.prange(m):
        y = np.empty(n)
        w = np.empty(n)
        _row_weights(logp[i], tau, w)
        for k in range(gamma):
            _draw_row(logp[i], w, key, k, i, tau, y)
            for j in range(n):
                out[i, j] += y[j]
    return out


@numba.njit(cache=True, parallel=True)
def relaxed_sums_backward(logp, key, tau, gamma, d_sums):
    """Gradient w.r.t. ``logp`` given the gradient w.r.t. the summed draws."""
    m, n = logp.shape
    out = np.zeros((m, n))
    for i in numba.prange(m):
        y = np.empty(n)
        w = np.empty(n)
        _row_weights(logp[i], tau, w)
        g = d_sums[i]
        for k in range(gamma):
            _draw_row(logp[i], w, key, k, i, tau, y)
            dot = 0.0
            for j in range(n):
                dot += y[j] * g[j]
            for j in range(n):
                out[i, j] += y[j] * (g[j] - dot)
        for j in range(n):
            out[i, j] /= tau
    return out


@numba.njit(cache=True)
def hard_draws(logp, key, gamma):
    """Union of ``gamma`` argmax(logp + g_k) picks per row, as a 0/1 matrix."""
    m, n = logp.shape
    out = np.zeros((m, n))
    w = np.empty(n)
    for i in range(m):
        # argmax(logp + g) = argmax(p / (-log u))
        _row_weights(logp[i], 1.0, w)
        for k in range(gamma):
            base = _mix_nb(np.uint64(key) + np.uint64(k)) + np.uint64(i) * np.uint64(n)
            best, arg = -1.0, 0
            for j in range(n):
                h = _mix_nb(base + np.uint64(j))
                t = -np.log((np.float64(h >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16)
                z = w[j] / t
                if z > best:
                    best, arg = z, j
            out[i, arg] = 1.0
    return out
