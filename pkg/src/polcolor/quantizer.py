"""Histogram-equalized scalar quantization of the nine feature parameters.

Each parameter gets its own :class:`QuantizerTable`.  Fitting places the bin
edges at empirical quantiles so every bin receives (almost) the same number
of training samples, which balances the classes seen by the softmax heads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DEFAULT_BINS",
    "PARAM_RANGES",
    "QuantizerTable",
    "fit",
    "fit_uniform",
    "fit_all",
    "encode",
    "decode",
    "one_hot",
]

DEFAULT_BINS = 32

# delta parameters live in [0, 1]; real/imag parts of rho in [-1, 1]
PARAM_RANGES = ((0.0, 1.0),) * 3 + ((-1.0, 1.0),) * 6


@dataclass(frozen=True)
class QuantizerTable:
    param_id: int
    edges: np.ndarray
    centers: np.ndarray
    uniform_fallback: bool = False

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        centers = np.asarray(self.centers, dtype=np.float64)
        if edges.ndim != 1 or centers.shape != (edges.size - 1,):
            raise ValueError("need K+1 edges and K centers")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("edges must be strictly increasing")
        if not (np.all(edges[:-1] < centers) and np.all(centers < edges[1:])):
            raise ValueError("each center must lie strictly inside its bin")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "centers", centers)

    @property
    def k(self) -> int:
        return self.centers.size

    @property
    def lo(self) -> float:
        return float(self.edges[0])

    @property
    def hi(self) -> float:
        return float(self.edges[-1])

    @property
    def max_half_width(self) -> float:
        return float(np.max(np.diff(self.edges)) / 2.0)


def fit_uniform(k: int, value_range: tuple[float, float], param_id: int = 0,
                fallback: bool = False) -> QuantizerTable:
    """Equal-width bins over ``value_range`` with midpoint centers."""
    lo, hi = value_range
    edges = np.linspace(lo, hi, k + 1)
    return QuantizerTable(param_id, edges, 0.5 * (edges[:-1] + edges[1:]), fallback)


def fit(samples, k: int = DEFAULT_BINS, value_range: tuple[float, float] = (0.0, 1.0),
        param_id: int = 0) -> QuantizerTable:
    """Fit histogram-equalized bins.

    Edges sit at the lower empirical quantiles ``sorted[floor(i*N/k)]`` of the
    clamped samples, with the outer edges pinned to the range.  Centers are the
    per-bin sample medians.  Degenerate inputs (fewer than ``k`` distinct
    values, or quantiles that collide) fall back to uniform bins and set
    ``uniform_fallback``.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise ValueError("empty value range")
    x = np.sort(np.clip(np.asarray(samples, dtype=np.float64).ravel(), lo, hi))
    n = x.size
    if n == 0 or np.unique(x).size < k:
        warnings.warn(f"parameter {param_id}: too few distinct samples, using uniform bins")
        return fit_uniform(k, (lo, hi), param_id, fallback=True)

    idx = (np.arange(1, k) * n) // k
    edges = np.concatenate([[lo], x[idx], [hi]])
    if not np.all(np.diff(edges) > 0):
        warnings.warn(f"parameter {param_id}: colliding quantiles, using uniform bins")
        return fit_uniform(k, (lo, hi), param_id, fallback=True)

    bins = _bin_index(x, edges)
    centers = np.empty(k)
    starts = np.searchsorted(bins, np.arange(k), side="left")
    stops = np.searchsorted(bins, np.arange(k), side="right")
    for i in range(k):
        mid = 0.5 * (edges[i] + edges[i + 1])
        if stops[i] > starts[i]:
            med = float(np.median(x[starts[i]:stops[i]]))
            centers[i] = med if edges[i] < med < edges[i + 1] else mid
        else:
            centers[i] = mid
    return QuantizerTable(param_id, edges, centers)


def fit_all(params: np.ndarray, k: int = DEFAULT_BINS) -> list[QuantizerTable]:
    """One table per column of ``params`` (``(..., 9)``)."""
    flat = np.asarray(params).reshape(-1, 9)
    return [fit(flat[:, j], k, PARAM_RANGES[j], param_id=j) for j in range(9)]


def _bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    k = edges.size - 1
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, k - 1)


def encode(value, table: QuantizerTable) -> np.ndarray:
    """Bin index of each value after clamping to the table range."""
    v = np.clip(np.asarray(value, dtype=np.float64), table.lo, table.hi)
    return _bin_index(v, table.edges)


def one_hot(index, k: int) -> np.ndarray:
    index = np.asarray(index)
    return (index[..., None] == np.arange(k)).astype(np.float64)


def decode(probs, table: QuantizerTable, rule: str = "mode") -> np.ndarray:
    """Continuous value from a distribution over the table's bins.

    ``rule="mode"`` returns the center of the most probable bin (lowest index
    on ties); ``rule="mean"`` the probability-weighted mean of the centers.
    """
    p = np.asarray(probs, dtype=np.float64)
    if (
        p.shape[-1:] != (table.k,)
        or not np.all(np.isfinite(p))
        or np.any(p < 0.0)
        or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6)
    ):
        raise ValueError("invalid distribution")
    if rule == "mode":
        return table.centers[np.argmax(p, axis=-1)]
    if rule == "mean":
        return p @ table.centers
    raise ValueError(f"unknown decoding rule {rule!r}")
