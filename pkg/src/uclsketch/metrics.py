"""Accuracy metrics over per-key frequency tables, and throughput."""

from __future__ import annotations

from typing import Mapping

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _paired(truth: Mapping[bytes, int], est: Mapping[bytes, float]):
    keys = [k for k, v in truth.items() if v > 0]
    if not keys:
        raise UndefinedMetricError("truth has no key with positive frequency")
    f = np.array([truth[k] for k in keys], dtype=np.float64)
    g = np.array([est.get(k, 0) for k in keys], dtype=np.float64)
    return f, g


def round_half_up(x) -> np.ndarray:
    return np.maximum(np.floor(np.asarray(x, dtype=np.float64) + 0.5), 0).astype(np.int64)


def aae(truth, est) -> float:
    f, g = _paired(truth, est)
    return float(np.mean(np.abs(f - g)))


def are(truth, est) -> float:
    f, g = _paired(truth, est)
    return float(np.mean(np.abs(f - g) / f))


def histogram(values) -> np.ndarray:
    """n(i) for i = 0..max; index 0 is ignored by the distribution metrics."""
    v = round_half_up(values)
    return np.bincount(v) if v.size else np.zeros(1, dtype=np.int64)


def _histograms(truth, est):
    f, g = _paired(truth, est)
    h, hs = histogram(f), histogram(g)
    z = max(len(h), len(hs))
    h = np.pad(h, (0, z - len(h)))[1:].astype(np.float64)
    hs = np.pad(hs, (0, z - len(hs)))[1:].astype(np.float64)
    if h.sum() == 0 and hs.sum() == 0:
        raise UndefinedMetricError("both histograms are empty")
    return h, hs


def wmrd(truth, est) -> float:
    h, hs = _histograms(truth, est)
    return float(np.abs(h - hs).sum() / ((h + hs) / 2).sum())


def entropy(hist) -> float:
    """-sum_i i * p_i * log2 p_i with p_i = n(i) / sum n, over i = 1..z."""
    hist = np.asarray(hist, dtype=np.float64)
    tot = hist.sum()
    if tot == 0:
        return 0.0
    p = hist / tot
    i = np.arange(1, len(hist) + 1)
    nz = p > 0
    return float(-(i[nz] * p[nz] * np.log2(p[nz])).sum())


def entropy_abs_err(truth, est) -> float:
    h, hs = _histograms(truth, est)
    return abs(entropy(h) - entropy(hs))


def throughput(op_count: int, elapsed: float) -> float:
    """Millions of operations per second."""
    if elapsed <= 0:
        raise ValueError("elapsed must be positive")
    return op_count / elapsed / 1e6


ALL_METRICS = {"aae": aae, "are": are, "wmrd": wmrd, "entropy": entropy_abs_err}


def evaluate(truth, est) -> dict[str, float]:
    return {name: fn(truth, est) for name, fn in ALL_METRICS.items()}
