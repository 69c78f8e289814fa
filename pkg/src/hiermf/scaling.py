"""Generalized Hurst exponents, fractional Brownian motion, and the
multiscaling significance threshold.

H(q) is read off the scaling of absolute q-moments of log-price increments,
M(q, l) ~ l^(q H(q)), averaged over least-squares fits with the upper fit
scale swept across a range. The multifractality proxy is dH = H(1) - H(2),
which vanishes for uniscaling processes; its significance threshold is
calibrated on exact fractional Brownian motion paths.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass

import numpy as np

from hiermf.util import derived_rng, parallel_map

__all__ = [
    "GheEstimate",
    "FbmSpec",
    "ThresholdCalibration",
    "DEFAULT_Q",
    "DEFAULT_LMAX_RANGE",
    "q_moment",
    "estimate_ghe",
    "ghe_from_moments",
    "delta_h",
    "fgn_autocovariance",
    "generate_fbm",
    "calibrate_threshold",
]

DEFAULT_Q = (1.0, 2.0)
DEFAULT_LMAX_RANGE = (5, 19)


@dataclass(frozen=True)
class GheEstimate:
    """H(q) with per-fit slopes and dispersion across upper fit scales."""

    q_values: tuple[float, ...]
    h_values: tuple[float, ...]
    slopes: np.ndarray  # shape (len(q_values), number of lmax fits)
    lmax_range: tuple[int, int]
    std_errors: tuple[float, ...]

    def h(self, q: float) -> float:
        for qi, hi in zip(self.q_values, self.h_values):
            if qi == q:
                return hi
        raise ValueError(f"q={q} not estimated (have {self.q_values})")

    @property
    def delta_h(self) -> float:
        return delta_h(self)


def delta_h(est: GheEstimate) -> float:
    """H(1) - H(2), the multiscaling width between the first two moments."""
    return est.h(1.0) - est.h(2.0)


def q_moment(log_prices, q: float, scale: int) -> float:
    """Mean absolute q-th moment of increments at the given scale.

    Accepts a log-price array or a PriceSeries and uses every overlapping
    increment x[t+scale] - x[t]. A return of exactly 0.0 marks a degenerate
    scale (all increments zero).
    """
    x = getattr(log_prices, "log_prices", log_prices)
    x = np.asarray(x, dtype=float)
    if q <= 0:
        raise ValueError("q must be positive")
    if not 1 <= scale <= x.shape[0] - 1:
        raise ValueError(f"scale {scale} out of range for series of length {x.shape[0]}")
    inc = np.abs(x[scale:] - x[:-scale])
    return float(np.mean(inc**q))


def ghe_from_moments(
    moments: np.ndarray,
    q_values: tuple[float, ...],
    lmax_range: tuple[int, int] = DEFAULT_LMAX_RANGE,
) -> GheEstimate:
    """Fit H(q) from a precomputed moment table M[q_index, scale-1].

    For each upper scale lmax in the range, the slope of log M against log l
    over l = 1..lmax estimates q*H(q); H(q) is the mean of slope/q over the
    sweep and its standard error is the standard deviation across fits.
    """
    lo, hi = lmax_range
    if not 2 <= lo <= hi:
        raise ValueError(f"invalid lmax range {lmax_range}")
    moments = np.asarray(moments, dtype=float)
    if moments.shape[1] < hi:
        raise ValueError(f"need moments up to scale {hi}, got {moments.shape[1]}")
    zero = np.argwhere(moments[:, :hi] == 0.0)
    if zero.size:
        qi, li = zero[0]
        raise ValueError(f"degenerate q-moment M(q={q_values[qi]}, l={li + 1}) = 0")

    log_l = np.log(np.arange(1, hi + 1, dtype=float))
    log_m = np.log(moments[:, :hi])
    n_fits = hi - lo + 1
    slopes = np.empty((len(q_values), n_fits))
    for k, lmax in enumerate(range(lo, hi + 1)):
        x = log_l[:lmax]
        xc = x - x.mean()
        denom = float(xc @ xc)
        for i in range(len(q_values)):
            y = log_m[i, :lmax]
            slopes[i, k] = float(xc @ (y - y.mean())) / denom

    h_per_fit = slopes / np.asarray(q_values, dtype=float)[:, None]
    h_values = tuple(float(v) for v in h_per_fit.mean(axis=1))
    std_errors = tuple(float(v) for v in h_per_fit.std(axis=1, ddof=1))
    slopes.flags.writeable = False
    return GheEstimate(
        q_values=tuple(float(q) for q in q_values),
        h_values=h_values,
        slopes=slopes,
        lmax_range=(lo, hi),
        std_errors=std_errors,
    )


def estimate_ghe(
    log_prices: np.ndarray,
    q_values: tuple[float, ...] = DEFAULT_Q,
    lmax_range: tuple[int, int] = DEFAULT_LMAX_RANGE,
) -> GheEstimate:
    """Generalized Hurst exponents of a log-price sequence."""
    x = np.asarray(log_prices, dtype=float)
    lo, hi = lmax_range
    if x.shape[0] < 10 * hi:
        raise ValueError(f"series length {x.shape[0]} < 10 * max scale {hi}")
    moments = np.empty((len(q_values), hi))
    for scale in range(1, hi + 1):
        inc = np.abs(x[scale:] - x[:-scale])
        for i, q in enumerate(q_values):
            moments[i, scale - 1] = np.mean(inc**q)
    return ghe_from_moments(moments, tuple(q_values), lmax_range)


@dataclass(frozen=True)
class FbmSpec:
    """Fractional Brownian motion path request (unit-variance increments)."""

    hurst: float
    length: int
    seed: int

    def __post_init__(self):
        if not 0 < self.hurst < 1:
            raise ValueError(f"hurst must be in (0, 1), got {self.hurst}")
        if self.length < 2:
            raise ValueError("length must be >= 2")


def fgn_autocovariance(hurst: float, lags: np.ndarray | int) -> np.ndarray:
    """gamma(h) = (|h+1|^2H - 2|h|^2H + |h-1|^2H) / 2 for fractional Gaussian noise."""
    h = np.atleast_1d(np.abs(np.asarray(lags, dtype=float)))
    two_h = 2.0 * hurst
    return 0.5 * ((h + 1) ** two_h - 2 * h**two_h + np.abs(h - 1) ** two_h)


def _circulant_sample(cov: np.ndarray, rng: np.random.Generator, clip_negative: bool = False):
    """Exact stationary Gaussian sample by circulant embedding.

    `cov` holds autocovariances at lags 0..n, producing a sample of length n
    whose covariances at lags 0..n-1 are exact. Returns (sample,
    clipped_mass) where clipped_mass is the fraction of total eigenvalue
    magnitude removed by clipping (0 when the embedding is nonnegative
    definite). With clip_negative=False a materially negative eigenvalue
    raises instead.
    """
    n = cov.shape[0] - 1
    if n < 1:
        raise ValueError("need covariances at lags 0..n with n >= 1")
    m = 2 * n
    first_row = np.concatenate((cov, cov[-2:0:-1]))
    eig = np.fft.fft(first_row).real
    tol = 1e-8 * eig.max()
    negative = eig < 0
    neg_mass = float(-eig[negative].sum())
    total_mass = float(np.abs(eig).sum())
    if not clip_negative and eig.min() < -tol:
        raise ValueError(
            f"circulant embedding has negative eigenvalue {eig.min():.3e} beyond tolerance"
        )
    if negative.any():
        eig = np.where(negative, 0.0, eig)
        # redistribute so the marginal variance (mean eigenvalue) is preserved
        eig *= first_row[0] * m / eig.sum()
    z = np.empty(m, dtype=complex)
    v = rng.standard_normal((n - 1, 2))
    z[0] = rng.standard_normal()
    z[n] = rng.standard_normal()
    z[1:n] = (v[:, 0] + 1j * v[:, 1]) / np.sqrt(2.0)
    z[n + 1 :] = np.conj(z[1:n][::-1])
    sample = np.sqrt(m) * np.fft.ifft(np.sqrt(eig) * z).real[:n]
    return sample, (neg_mass / total_mass if total_mass > 0 else 0.0)


def _fgn(length: int, hurst: float, rng: np.random.Generator) -> np.ndarray:
    cov = fgn_autocovariance(hurst, np.arange(length + 1))
    sample, _ = _circulant_sample(cov, rng, clip_negative=False)
    return sample


def generate_fbm(spec: FbmSpec) -> np.ndarray:
    """fBm path of spec.length points anchored at 0.

    Increments are exact fractional Gaussian noise (circulant embedding, no
    approximation); the same spec always yields the identical path.
    """
    rng = np.random.default_rng(spec.seed)
    fgn = _fgn(spec.length - 1, spec.hurst, rng)
    path = np.empty(spec.length)
    path[0] = 0.0
    np.cumsum(fgn, out=path[1:])
    return path


@dataclass(frozen=True)
class ThresholdCalibration:
    """Multiscaling significance cutoff from uniscaling null paths."""

    count: int
    hurst_range: tuple[float, float]
    length: int
    seed: int
    threshold: float
    percentile_rule: str
    delta_h_sample: np.ndarray

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "hurst_range": list(self.hurst_range),
            "length": self.length,
            "seed": self.seed,
            "threshold": self.threshold,
            "percentile_rule": self.percentile_rule,
        }


def _calibration_draw(index: int, seed: int, lo: float, hi: float, length: int) -> float:
    rng = derived_rng(seed, index)
    hurst = rng.uniform(lo, hi)
    fgn = _fgn(length - 1, hurst, rng)
    path = np.concatenate(([0.0], np.cumsum(fgn)))
    return delta_h(estimate_ghe(path))


def calibrate_threshold(
    count: int,
    hurst_range: tuple[float, float] = (0.1, 0.9),
    length: int = 4026,
    seed: int = 0,
    jobs: int = 1,
) -> ThresholdCalibration:
    """97.5th percentile of dH over fBm paths with Hurst drawn in the range.

    dH on uniscaling paths is centered at zero, so the upper edge of the
    two-sided 95% band is the one-sided exceedance cutoff used to flag
    significant multiscaling. Realizations use derived seeds (seed, index) so
    the result is identical for any worker count. Counts below 100 warn: the
    upper percentile gets unstable.
    """
    if count < 10:
        raise ValueError("need at least 10 realizations")
    if count < 100:
        warnings.warn("low realization count", UserWarning, stacklevel=2)
    lo, hi = float(hurst_range[0]), float(hurst_range[1])
    if not (0 < lo <= hi < 1):
        raise ValueError(f"hurst range {hurst_range} not inside (0, 1)")
    worker = functools.partial(_calibration_draw, seed=seed, lo=lo, hi=hi, length=length)
    sample = np.asarray(parallel_map(worker, range(count), jobs=jobs))
    threshold = float(np.percentile(sample, 97.5))
    sample.flags.writeable = False
    return ThresholdCalibration(
        count=count,
        hurst_range=(lo, hi),
        length=length,
        seed=seed,
        threshold=threshold,
        percentile_rule="97.5th percentile of signed dH (two-sided 95%)",
        delta_h_sample=sample,
    )
