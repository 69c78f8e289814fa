"""Weighted Pearson correlation, Kendall's tau, and the correlation metric.

Correlations that feed the clustering are estimated with exponential weights
so remote history counts less than recent history; the decay constant
defaults to a third of the window length.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hiermf.market_data import ReturnsPanel

__all__ = [
    "WeightScheme",
    "CorrelationMatrix",
    "exp_weights",
    "flat_weights",
    "weighted_pearson_matrix",
    "kendall_tau",
    "elliptical_tau",
    "corr_to_distance",
    "write_correlation_csv",
    "read_correlation_csv",
]

PSD_TOLERANCE = -1e-8


@dataclass(frozen=True)
class WeightScheme:
    """Normalized exponential observation weights over a window of delta_t rows."""

    delta_t: int
    theta: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.shape != (self.delta_t,):
            raise ValueError(f"expected {self.delta_t} weights, got {w.shape}")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        w.flags.writeable = False


def exp_weights(delta_t: int, theta: float) -> WeightScheme:
    """w_t proportional to exp((t - delta_t) / theta) for t = 1..delta_t, summing to 1.

    The most recent row carries the largest weight; theta -> infinity recovers
    flat weights.
    """
    if delta_t < 2:
        raise ValueError("delta_t must be >= 2")
    if theta <= 0:
        raise ValueError("theta must be positive")
    t = np.arange(1, delta_t + 1, dtype=float)
    w = np.exp((t - delta_t) / theta)
    w /= w.sum()
    return WeightScheme(delta_t=delta_t, theta=float(theta), weights=w)


def flat_weights(delta_t: int) -> WeightScheme:
    """Uniform scheme, for unweighted estimation through the same code path."""
    return WeightScheme(delta_t=delta_t, theta=math.inf, weights=np.full(delta_t, 1.0 / delta_t))


@dataclass(frozen=True)
class CorrelationMatrix:
    """Symmetric unit-diagonal correlation with the scheme that produced it."""

    assets: tuple[str, ...]
    values: np.ndarray
    scheme: WeightScheme | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "assets", tuple(self.assets))
        n = len(self.assets)
        if v.shape != (n, n):
            raise ValueError(f"matrix shape {v.shape} does not match {n} assets")
        if not np.allclose(v, v.T, atol=1e-10):
            raise ValueError("correlation matrix not symmetric")
        if not np.allclose(np.diag(v), 1.0, atol=1e-12):
            raise ValueError("correlation diagonal must be 1")
        if np.any(np.abs(v) > 1 + 1e-10):
            raise ValueError("correlation entries outside [-1, 1]")
        eigmin = float(np.linalg.eigvalsh(v).min())
        if eigmin < PSD_TOLERANCE:
            raise ValueError(f"correlation matrix not PSD (min eigenvalue {eigmin:.3e})")
        v.flags.writeable = False

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    def offdiagonal(self) -> np.ndarray:
        """Upper-triangle entries, row-major."""
        iu = np.triu_indices(self.n_assets, k=1)
        return self.values[iu]


def weighted_pearson_matrix(panel: ReturnsPanel, scheme: WeightScheme) -> CorrelationMatrix:
    """Pearson correlation with per-row weights (weighted means and variances)."""
    if scheme.delta_t != panel.n_times:
        raise ValueError(
            f"scheme covers {scheme.delta_t} rows but panel has {panel.n_times}"
        )
    w = scheme.weights
    x = panel.values
    mu = w @ x
    xc = x - mu
    cov = (xc * w[:, None]).T @ xc
    var = np.diag(cov).copy()
    # relative floor: exactly-constant columns leave O(eps^2) residue
    floor = 1e-26 * np.maximum(w @ (x * x), np.finfo(float).tiny)
    bad = np.flatnonzero(var <= floor)
    if bad.size:
        raise ValueError(f"zero weighted variance in column {panel.assets[bad[0]]!r}")
    corr = cov / np.sqrt(np.outer(var, var))
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(assets=panel.assets, values=corr, scheme=scheme)


_MERGE_BASE = 64


def _merge_count_inversions(values: np.ndarray) -> int:
    """Inversions (i < j with values[i] > values[j]) by bottom-up merge counting.

    Ties never count as inversions. Base blocks are counted by direct pair
    comparison in one vectorized pass, then merged upward; the total stays
    O(n log n) with a constant-size base.
    """
    buf = values.copy()
    n = buf.shape[0]
    inversions = 0

    base = min(_MERGE_BASE, n)
    blocks = n // base
    if blocks:
        head = buf[: blocks * base].reshape(blocks, base)
        upper = np.triu_indices(base, k=1)
        inversions += int(np.count_nonzero(head[:, upper[0]] > head[:, upper[1]]))
        head.sort(axis=1)
    tail = buf[blocks * base :]
    if tail.shape[0] > 1:
        upper = np.triu_indices(tail.shape[0], k=1)
        inversions += int(np.count_nonzero(tail[upper[0]] > tail[upper[1]]))
        tail.sort()

    width = base
    while width < n:
        for lo in range(0, n - width, 2 * width):
            mid = lo + width
            hi = min(lo + 2 * width, n)
            left, right = buf[lo:mid], buf[mid:hi]
            # strictly-greater count of left elements above each right element
            pos = np.searchsorted(left, right, side="right")
            inversions += int((left.shape[0] - pos).sum())
            merged = np.empty(hi - lo)
            right_slot = np.arange(right.shape[0]) + pos
            left_slot = np.arange(left.shape[0]) + np.searchsorted(right, left, side="left")
            merged[right_slot] = right
            merged[left_slot] = left
            buf[lo:hi] = merged
        width *= 2
    return inversions


def _tie_term(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau(x: np.ndarray, y: np.ndarray) -> float:
    """Tie-corrected Kendall tau-b via O(n log n) merge counting.

    Agrees exactly with full pair enumeration; ties in either variable are
    handled by the tau-b normalization.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 observations")
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]

    n0 = n * (n - 1) // 2
    ties_x = _tie_term(xs)
    ties_y = _tie_term(ys)
    if ties_x == n0 or ties_y == n0:
        raise ValueError("tau undefined for a constant input")
    both = np.rec.fromarrays((xs, ys))
    _, joint_counts = np.unique(both, return_counts=True)
    ties_xy = int((joint_counts * (joint_counts - 1) // 2).sum())

    discordant = _merge_count_inversions(ys)
    concordant_minus_discordant = n0 - ties_x - ties_y + ties_xy - 2 * discordant
    denom = math.sqrt((n0 - ties_x) * (n0 - ties_y))
    return concordant_minus_discordant / denom


def elliptical_tau(rho: float) -> float:
    """tau = 2/pi * arcsin(rho), exact for elliptically distributed pairs."""
    if abs(rho) > 1:
        raise ValueError(f"rho must be in [-1, 1], got {rho}")
    return 2.0 / math.pi * math.asin(rho)


def corr_to_distance(matrix: CorrelationMatrix) -> np.ndarray:
    """d_ij = sqrt(2 (1 - rho_ij)), the standard correlation metric in [0, 2]."""
    d = np.sqrt(np.maximum(2.0 * (1.0 - matrix.values), 0.0))
    np.fill_diagonal(d, 0.0)
    return d


def write_correlation_csv(matrix: CorrelationMatrix, path: str | Path) -> None:
    """Labeled square CSV: header row of assets, one labeled row per asset."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["", *matrix.assets])
        for label, row in zip(matrix.assets, matrix.values):
            writer.writerow([label, *(repr(float(v)) for v in row)])


def read_correlation_csv(path: str | Path) -> CorrelationMatrix:
    """Inverse of write_correlation_csv (the weighting scheme is not recoverable)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise ValueError(f"{path}: not a labeled correlation CSV")
    assets = tuple(rows[0][1:])
    if len(rows) != len(assets) + 1:
        raise ValueError(f"{path}: expected {len(assets)} data rows, got {len(rows) - 1}")
    values = np.empty((len(assets), len(assets)))
    for i, row in enumerate(rows[1:]):
        if row[0] != assets[i]:
            raise ValueError(f"{path}: row label {row[0]!r} does not match column {assets[i]!r}")
        values[i] = [float(v) for v in row[1:]]
    return CorrelationMatrix(assets=assets, values=values)
