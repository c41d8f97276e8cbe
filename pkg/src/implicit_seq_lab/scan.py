"""Linear-recurrence scans: h_t = decay_t * h_{t-1} + input_t.

Pairs (decay, input) form a monoid under

    combine((d1, u1), (d2, u2)) = (d1 * d2, d2 * u1 + u2)

with the left operand earlier in time, which makes the recurrence a prefix
scan.  ``scan_parallel`` evaluates it on a Brent-Kung style tree whose
topology depends only on the sequence length, so results are independent of
the worker count; threading (if any) splits the trailing channel axis, where
elements never interact.

All arrays are shaped (batch, time, channels).  ``h0`` is (batch, channels).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_default_threads: int | None = None


def default_threads() -> int:
    """Worker count for internal parallelism: explicit setting, then the
    IMPLICIT_SEQ_LAB_THREADS environment variable, then the machine cores."""
    if _default_threads is not None:
        return _default_threads
    env = os.environ.get("IMPLICIT_SEQ_LAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def set_default_threads(n: int | None) -> None:
    global _default_threads
    _default_threads = n


def _check_shapes(decay: np.ndarray, inputs: np.ndarray, h0: np.ndarray):
    if decay.shape != inputs.shape:
        raise ValueError(f"decay shape {decay.shape} != input shape {inputs.shape}")
    if decay.ndim != 3:
        raise ValueError(f"expected (batch, time, channels), got {decay.shape}")
    if h0.shape != (decay.shape[0], decay.shape[2]):
        raise ValueError(f"h0 shape {h0.shape} incompatible with {decay.shape}")


def scan_sequential(decay: np.ndarray, inputs: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Reference left-to-right recurrence; returns states for t = 1..T."""
    _check_shapes(decay, inputs, h0)
    out = np.empty_like(inputs)
    h = h0
    for t in range(decay.shape[1]):
        h = decay[:, t] * h + inputs[:, t]
        out[:, t] = h
    return out


def _prefix_combine_inplace(d: np.ndarray, u: np.ndarray) -> None:
    """Inclusive prefix scan of (d, u) pairs along axis 1, fixed tree.

    Brent-Kung: an up-sweep builds power-of-two block aggregates, a
    down-sweep fills in the remaining prefixes.  2n combines total.
    """
    n = d.shape[1]
    stride = 1
    while stride < n:
        right = np.arange(2 * stride - 1, n, 2 * stride)
        left = right - stride
        u[:, right] += u[:, left] * d[:, right]
        d[:, right] *= d[:, left]
        stride *= 2
    stride //= 2
    while stride >= 1:
        left = np.arange(2 * stride - 1, n - stride, 2 * stride)
        right = left + stride
        u[:, right] += u[:, left] * d[:, right]
        d[:, right] *= d[:, left]
        stride //= 2


def scan_parallel(decay: np.ndarray, inputs: np.ndarray, h0: np.ndarray,
                  threads: int | None = None) -> np.ndarray:
    """Same semantics as ``scan_sequential`` via the associative combine.

    ``threads`` workers (default: ``default_threads()``) split the channel
    axis; the combine tree over time is identical for every worker count, so
    the output is bitwise reproducible.
    """
    _check_shapes(decay, inputs, h0)
    d = np.ascontiguousarray(decay).copy()
    u = np.ascontiguousarray(inputs).copy()
    workers = default_threads() if threads is None else max(1, threads)
    channels = d.shape[2]
    if workers <= 1 or channels < 2 * workers:
        _prefix_combine_inplace(d, u)
    else:
        bounds = np.linspace(0, channels, workers + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_prefix_combine_inplace, d[:, :, a:b], u[:, :, a:b])
                for a, b in zip(bounds[:-1], bounds[1:])
                if b > a
            ]
            for f in futures:
                f.result()
    # prefix pair (d~, u~) maps h0 to the state: h_t = d~_t * h0 + u~_t
    u += d * h0[:, None, :]
    return u
