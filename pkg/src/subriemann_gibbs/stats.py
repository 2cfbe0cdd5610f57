"""Batch-means and block-jackknife error bars."""
from __future__ import annotations

from typing import Callable, Sequence, Tuple

import numpy as np

N_BATCHES = 50


def _blocks(n: int, n_batches: int) -> np.ndarray:
    n_batches = max(2, min(n_batches, n))
    return np.array_split(np.arange(n), n_batches)


def batch_means(values, n_batches: int = N_BATCHES) -> Tuple[float, float]:
    """Mean and its standard error from contiguous batch means.

    Samples are assumed ordered so that contiguous blocks are (nearly)
    independent, e.g. chain-major output of an ensemble sampler.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no samples")
    blocks = _blocks(values.shape[0], n_batches)
    means = np.array([values[b].mean(axis=0) for b in blocks])
    b = len(blocks)
    return float(values.mean()), float(means.std(ddof=1) / np.sqrt(b))


def jackknife(stat: Callable[..., float], arrays: Sequence[np.ndarray], n_batches: int = N_BATCHES) -> Tuple[float, float]:
    """Delete-one-block jackknife for a smooth function of sample means.

    ``stat`` receives the arrays restricted to a subset of rows and returns a
    scalar.  Returns the full-sample value and the jackknife standard error.
    """
    arrays = [np.asarray(a) for a in arrays]
    n = arrays[0].shape[0]
    full = float(stat(*arrays))
    blocks = _blocks(n, n_batches)
    mask = np.ones(n, dtype=bool)
    reps = np.empty(len(blocks))
    for k, b in enumerate(blocks):
        mask[b] = False
        reps[k] = stat(*[a[mask] for a in arrays])
        mask[b] = True
    m = len(blocks)
    se = np.sqrt((m - 1) / m * np.sum((reps - reps.mean()) ** 2))
    return full, float(se)


def autocorrelation_time(series, max_lag: int | None = None) -> float:
    """Integrated autocorrelation time with Sokal's automatic window.

    ``series`` may be 2-D (replicas x time); autocovariances are averaged
    over replicas.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    x = x - x.mean(axis=1, keepdims=True)
    n = x.shape[1]
    if n < 4:
        return float("nan")
    var = np.mean(x * x)
    if var == 0:
        return 1.0
    f = np.fft.rfft(x, 2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n].mean(axis=0) / n
    rho = acov / acov[0]
    max_lag = max_lag or n - 1
    tau = 1.0
    for m in range(1, max_lag):
        tau = 1.0 + 2.0 * np.sum(rho[1 : m + 1])
        if m >= 5 * tau:
            break
    return float(max(tau, 1.0))


def ks_2samp(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov p-value."""
    from scipy.stats import ks_2samp as _ks

    return float(_ks(np.asarray(a), np.asarray(b)).pvalue)
