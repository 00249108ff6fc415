"""Hot inner loops: grouped (segment) softmax/sum for attention, and the
sequential recurrences behind the technical indicators.

Every kernel has a numba ``@njit`` implementation and a pure-numpy one with
identical semantics. The numba path is used when numba imports cleanly and
``GHAN_DISABLE_NUMBA`` is unset (or ``0``); set ``GHAN_DISABLE_NUMBA=1`` to
force numpy. ``BACKEND`` reports which path is live.

Segment conventions: ``seg`` holds the group id of each row, ids lie in
``[0, n_seg)``; groups with no rows produce zeros.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("GHAN_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by GHAN_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def np_segment_max(values, seg, n_seg):
    out = np.full(n_seg, -np.inf)
    np.maximum.at(out, seg, values)
    out[np.isneginf(out)] = 0.0
    return out


def np_segment_sum(values, seg, n_seg):
    out = np.zeros((n_seg,) + values.shape[1:])
    np.add.at(out, seg, values)
    return out


def np_segment_softmax(logits, seg, n_seg):
    shifted = logits - np_segment_max(logits, seg, n_seg)[seg]
    ex = np.exp(shifted)
    return ex / np_segment_sum(ex, seg, n_seg)[seg]


def np_segment_softmax_backward(probs, grad_out, seg, n_seg):
    dot = np_segment_sum(probs * grad_out, seg, n_seg)
    return probs * (grad_out - dot[seg])


def np_rolling_mean(x, window):
    n = x.shape[0]
    out = np.full(n, np.nan)
    if n >= window:
        out[window - 1 :] = np.lib.stride_tricks.sliding_window_view(x, window).mean(axis=1)
    return out


def np_ema(x, span):
    # seeded with the simple mean of the first `span` values
    n = x.shape[0]
    out = np.full(n, np.nan)
    if n < span:
        return out
    alpha = 2.0 / (span + 1.0)
    prev = x[:span].mean()
    out[span - 1] = prev
    for t in range(span, n):
        prev = alpha * x[t] + (1.0 - alpha) * prev
        out[t] = prev
    return out


def np_wilder_rsi(close, period):
    n = close.shape[0]
    out = np.full(n, np.nan)
    if n <= period:
        return out
    delta = np.diff(close)
    gain = np.where(delta > 0, delta, 0.0)
    loss = np.where(delta < 0, -delta, 0.0)
    avg_g = gain[:period].mean()
    avg_l = loss[:period].mean()
    out[period] = _rsi_value(avg_g, avg_l)
    for t in range(period + 1, n):
        avg_g = (avg_g * (period - 1) + gain[t - 1]) / period
        avg_l = (avg_l * (period - 1) + loss[t - 1]) / period
        out[t] = _rsi_value(avg_g, avg_l)
    return out


def _rsi_value(avg_g, avg_l):
    if avg_l == 0.0:
        return 50.0 if avg_g == 0.0 else 100.0
    return 100.0 - 100.0 / (1.0 + avg_g / avg_l)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def nb_segment_max(values, seg, n_seg):
        out = np.full(n_seg, -np.inf)
        for p in range(values.shape[0]):
            g = seg[p]
            if values[p] > out[g]:
                out[g] = values[p]
        for g in range(n_seg):
            if out[g] == -np.inf:
                out[g] = 0.0
        return out

    @njit(cache=True)
    def _nb_segment_sum_1d(values, seg, n_seg):
        out = np.zeros(n_seg)
        for p in range(values.shape[0]):
            out[seg[p]] += values[p]
        return out

    @njit(cache=True)
    def _nb_segment_sum_2d(values, seg, n_seg):
        out = np.zeros((n_seg, values.shape[1]))
        for p in range(values.shape[0]):
            g = seg[p]
            for k in range(values.shape[1]):
                out[g, k] += values[p, k]
        return out

    def nb_segment_sum(values, seg, n_seg):
        if values.ndim == 1:
            return _nb_segment_sum_1d(values, seg, n_seg)
        if values.ndim == 2:
            return _nb_segment_sum_2d(values, seg, n_seg)
        flat = _nb_segment_sum_2d(values.reshape(values.shape[0], -1), seg, n_seg)
        return flat.reshape((n_seg,) + values.shape[1:])

    @njit(cache=True)
    def nb_segment_softmax(logits, seg, n_seg):
        mx = nb_segment_max(logits, seg, n_seg)
        ex = np.empty_like(logits)
        tot = np.zeros(n_seg)
        for p in range(logits.shape[0]):
            ex[p] = np.exp(logits[p] - mx[seg[p]])
            tot[seg[p]] += ex[p]
        for p in range(logits.shape[0]):
            ex[p] /= tot[seg[p]]
        return ex

    @njit(cache=True)
    def nb_segment_softmax_backward(probs, grad_out, seg, n_seg):
        dot = np.zeros(n_seg)
        for p in range(probs.shape[0]):
            dot[seg[p]] += probs[p] * grad_out[p]
        out = np.empty_like(probs)
        for p in range(probs.shape[0]):
            out[p] = probs[p] * (grad_out[p] - dot[seg[p]])
        return out

    @njit(cache=True)
    def nb_rolling_mean(x, window):
        n = x.shape[0]
        out = np.full(n, np.nan)
        if n < window:
            return out
        # exact window sums, no running-sum drift
        for t in range(window - 1, n):
            s = 0.0
            for k in range(t - window + 1, t + 1):
                s += x[k]
            out[t] = s / window
        return out

    @njit(cache=True)
    def nb_ema(x, span):
        n = x.shape[0]
        out = np.full(n, np.nan)
        if n < span:
            return out
        alpha = 2.0 / (span + 1.0)
        prev = 0.0
        for k in range(span):
            prev += x[k]
        prev /= span
        out[span - 1] = prev
        for t in range(span, n):
            prev = alpha * x[t] + (1.0 - alpha) * prev
            out[t] = prev
        return out

    @njit(cache=True)
    def _nb_rsi_value(avg_g, avg_l):
        if avg_l == 0.0:
            return 50.0 if avg_g == 0.0 else 100.0
        return 100.0 - 100.0 / (1.0 + avg_g / avg_l)

    @njit(cache=True)
    def nb_wilder_rsi(close, period):
        n = close.shape[0]
        out = np.full(n, np.nan)
        if n <= period:
            return out
        avg_g = 0.0
        avg_l = 0.0
        for t in range(1, period + 1):
            d = close[t] - close[t - 1]
            if d > 0:
                avg_g += d
            elif d < 0:
                avg_l -= d
        avg_g /= period
        avg_l /= period
        out[period] = _nb_rsi_value(avg_g, avg_l)
        for t in range(period + 1, n):
            d = close[t] - close[t - 1]
            g = d if d > 0 else 0.0
            l = -d if d < 0 else 0.0
            avg_g = (avg_g * (period - 1) + g) / period
            avg_l = (avg_l * (period - 1) + l) / period
            out[t] = _nb_rsi_value(avg_g, avg_l)
        return out

    segment_max = nb_segment_max
    segment_sum = nb_segment_sum
    segment_softmax = nb_segment_softmax
    segment_softmax_backward = nb_segment_softmax_backward
    rolling_mean = nb_rolling_mean
    ema = nb_ema
    wilder_rsi = nb_wilder_rsi
else:
    segment_max = np_segment_max
    segment_sum = np_segment_sum
    segment_softmax = np_segment_softmax
    segment_softmax_backward = np_segment_softmax_backward
    rolling_mean = np_rolling_mean
    ema = np_ema
    wilder_rsi = np_wilder_rsi


def implementations(name):
    """Return ``{"numpy": f, "numba": g}`` for kernel ``name`` (numba only when available)."""
    impls = {"numpy": globals()[f"np_{name}"]}
    if HAS_NUMBA:
        impls["numba"] = globals()[f"nb_{name}"]
    return impls
