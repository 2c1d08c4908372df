"""Triggering kernel and weighted kernel density estimation.

The excitation kernel is separable: exponential in time with decay rate
``omega`` and isotropic Gaussian in space with spread ``sigma``, scaled by
the expected offspring count ``k0``::

    g(dx, dy, dt) = k0 * omega * exp(-omega*dt)
                       * exp(-(dx^2 + dy^2) / (2*sigma^2)) / (2*pi*sigma^2)

for dt > 0 and zero otherwise, so its total space-time mass is exactly k0.

Background intensities are represented nonparametrically as weighted
Gaussian mixtures over support points.  The temporal kernel uses the 1-D
normalizer 1/(sqrt(2*pi)*b1) and the spatial kernel the 2-D normalizer
1/(2*pi*b2^2); both densities integrate to one, which the rest of the
package relies on when turning weights into expected counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erf

from ._validation import as_float_array, check_nonnegative, check_positive

__all__ = [
    "TriggerParams",
    "KdeBackground",
    "trigger_density",
    "trigger_mass",
    "kde_time",
    "kde_space",
    "kde_time_mass",
    "select_bandwidths",
    "select_bandwidths_cv",
]

_TWO_PI = 2.0 * math.pi
_SQRT_TWO_PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class TriggerParams:
    """Excitation parameters: offspring count, temporal decay, spatial spread.

    ``k0`` may be >= 1 for diagnostics even though estimation targets the
    subcritical regime.
    """

    k0: float
    omega: float
    sigma: float

    def __post_init__(self):
        check_nonnegative("k0", self.k0)
        check_positive("omega", self.omega)
        check_positive("sigma", self.sigma)

    @property
    def subcritical(self) -> bool:
        return self.k0 < 1.0


@dataclass(frozen=True)
class KdeBackground:
    """Weighted support points plus bandwidths for the background density.

    ``w`` holds per-point weights (branching-posterior diagonals during
    fitting); their sum ``nb`` is the estimated number of background events
    and doubles as the mixture normalizer.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    b1: float
    b2: float

    def __post_init__(self):
        for name in ("t", "x", "y", "w"):
            arr = as_float_array(getattr(self, name), name)
            if arr.ndim != 1:
                arr = np.atleast_1d(arr)
            if arr.flags.writeable:
                # freeze a private copy; never flip flags on a caller's array
                arr = arr.copy()
                arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (self.t.shape == self.x.shape == self.y.shape == self.w.shape):
            raise ValueError("support point arrays must share one shape")
        if np.any(self.w < 0):
            raise ValueError("support weights must be >= 0")
        check_positive("b1", self.b1)
        check_positive("b2", self.b2)

    @property
    def nb(self) -> float:
        return float(self.w.sum())

    @property
    def size(self) -> int:
        return int(self.t.size)


def trigger_density(dx, dy, dt, params: TriggerParams):
    """Evaluate the excitation kernel at displacements (dx, dy, dt).

    Accepts scalars or broadcastable arrays; returns 0 wherever dt <= 0.
    """
    dx = as_float_array(dx, "dx")
    dy = as_float_array(dy, "dy")
    dt = as_float_array(dt, "dt")
    norm = params.k0 * params.omega / (_TWO_PI * params.sigma**2)
    r2 = dx * dx + dy * dy
    with np.errstate(under="ignore"):
        out = norm * np.exp(-params.omega * dt - r2 / (2.0 * params.sigma**2))
    out = np.where(dt > 0, out, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def trigger_mass(dt_max, params: TriggerParams):
    """Expected offspring within dt_max of the parent: k0*(1 - exp(-omega*dt_max))."""
    dt_max = as_float_array(dt_max, "dt_max")
    if np.any(dt_max < 0):
        raise ValueError("dt_max must be >= 0")
    out = params.k0 * -np.expm1(-params.omega * dt_max)
    if out.ndim == 0:
        return float(out)
    return out


def _check_background(bg: KdeBackground):
    if bg.nb <= 0:
        raise ValueError("no background mass")


def kde_time(t, bg: KdeBackground, exclude_id: int | None = None):
    """Temporal background density v(t) from the weighted Gaussian mixture.

    ``exclude_id`` drops one support point (leave-one-out); the normalizer
    stays nb regardless of exclusion.
    """
    _check_background(bg)
    t = as_float_array(t, "t")
    scalar = t.ndim == 0
    q = np.atleast_1d(t)
    w = bg.w
    if exclude_id is not None:
        w = w.copy()
        w[exclude_id] = 0.0
    z = (q[:, None] - bg.t[None, :]) / bg.b1
    with np.errstate(under="ignore"):
        dens = (np.exp(-0.5 * z * z) @ w) / (bg.nb * _SQRT_TWO_PI * bg.b1)
    return float(dens[0]) if scalar else dens


def kde_space(x, y, bg: KdeBackground, exclude_id: int | None = None):
    """Spatial background density u(x, y); see :func:`kde_time`."""
    _check_background(bg)
    x = as_float_array(x, "x")
    y = as_float_array(y, "y")
    scalar = x.ndim == 0
    qx = np.atleast_1d(x)
    qy = np.atleast_1d(y)
    w = bg.w
    if exclude_id is not None:
        w = w.copy()
        w[exclude_id] = 0.0
    d2 = (qx[:, None] - bg.x[None, :]) ** 2 + (qy[:, None] - bg.y[None, :]) ** 2
    with np.errstate(under="ignore"):
        dens = (np.exp(-d2 / (2.0 * bg.b2**2)) @ w) / (bg.nb * _TWO_PI * bg.b2**2)
    return float(dens[0]) if scalar else dens


def kde_time_mass(bg: KdeBackground, t0: float, t1: float) -> float:
    """Mass of the temporal mixture on [t0, t1] (exact, via the Gaussian CDF)."""
    _check_background(bg)
    hi = erf((t1 - bg.t) / (bg.b1 * math.sqrt(2.0)))
    lo = erf((t0 - bg.t) / (bg.b1 * math.sqrt(2.0)))
    return float((bg.w * 0.5 * (hi - lo)).sum() / bg.nb)


def _loo_time_density(bg: KdeBackground, chunk: int = 1024) -> np.ndarray:
    """v at every support point with that point's own kernel removed."""
    _check_background(bg)
    n = bg.size
    out = np.empty(n)
    peak = 1.0 / (_SQRT_TWO_PI * bg.b1)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        z = (bg.t[lo:hi, None] - bg.t[None, :]) / bg.b1
        with np.errstate(under="ignore"):
            out[lo:hi] = (np.exp(-0.5 * z * z) @ bg.w) / (_SQRT_TWO_PI * bg.b1)
        out[lo:hi] -= bg.w[lo:hi] * peak
    np.maximum(out, 0.0, out=out)
    return out / bg.nb


def _loo_space_density(bg: KdeBackground, chunk: int = 1024) -> np.ndarray:
    """u at every support point with that point's own kernel removed."""
    _check_background(bg)
    n = bg.size
    out = np.empty(n)
    peak = 1.0 / (_TWO_PI * bg.b2**2)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d2 = (bg.x[lo:hi, None] - bg.x[None, :]) ** 2
        d2 += (bg.y[lo:hi, None] - bg.y[None, :]) ** 2
        with np.errstate(under="ignore"):
            out[lo:hi] = (np.exp(-d2 / (2.0 * bg.b2**2)) @ bg.w) / (_TWO_PI * bg.b2**2)
        out[lo:hi] -= bg.w[lo:hi] * peak
    np.maximum(out, 0.0, out=out)
    return out / bg.nb


class KdeEvalCache:
    """Pairwise squared differences between fixed support points.

    EM re-evaluates leave-one-out densities on the same support with fresh
    weights and bandwidths every iteration; caching the differences leaves
    just one exp and one matvec per evaluation.  The self entry of the
    kernel matrix is exactly 1, so the leave-one-out correction is a plain
    weight subtraction.
    """

    def __init__(self, t, x, y):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self.n = t.size
        self.dt2 = (t[:, None] - t[None, :]) ** 2
        self.d2 = (x[:, None] - x[None, :]) ** 2 + (y[:, None] - y[None, :]) ** 2

    def loo_time(self, w: np.ndarray, b1: float) -> np.ndarray:
        nb = w.sum()
        with np.errstate(under="ignore"):
            sums = np.exp(self.dt2 * (-0.5 / (b1 * b1))) @ w
        sums -= w
        np.maximum(sums, 0.0, out=sums)
        return sums / (nb * _SQRT_TWO_PI * b1)

    def loo_space(self, w: np.ndarray, b2: float) -> np.ndarray:
        nb = w.sum()
        with np.errstate(under="ignore"):
            sums = np.exp(self.d2 * (-0.5 / (b2 * b2))) @ w
        sums -= w
        np.maximum(sums, 0.0, out=sums)
        return sums / (nb * _TWO_PI * b2 * b2)


def _resample_by_weight(weights: np.ndarray) -> np.ndarray:
    """Deterministic systematic resampling: indices drawn proportionally to
    weight, one per unit of mass.  Unit weights return every index once."""
    c = np.cumsum(weights)
    total = c[-1]
    m = int(round(total))
    if total <= 0 or m < 2:
        return np.arange(weights.size)
    targets = (np.arange(m) + 0.5) * (total / m)
    return np.searchsorted(c, targets, side="left").clip(0, weights.size - 1)


def select_bandwidths(times, x, y, weights=None, k: int = 15, floor: float = 1e-6):
    """Nearest-neighbor bandwidths: median k-th NN distance over the
    weighted background.

    With weights the support is first resampled proportionally to weight
    (one point per unit of mass), so the statistic tracks the spacing of
    the estimated background rather than of the raw events; with unit (or
    no) weights this is exactly the median k-th-nearest-neighbor distance
    over the events.  ``k`` is capped at n-1 and the result floored at
    ``floor`` so degenerate point sets stay usable.
    """
    times = as_float_array(times, "times")
    x = as_float_array(x, "x")
    y = as_float_array(y, "y")
    n = times.size
    if n < 2:
        raise ValueError("need at least 2 events to select bandwidths")
    if int(k) < 1:
        raise ValueError("k must be >= 1")
    if weights is not None:
        weights = as_float_array(weights, "weights")
        idx = _resample_by_weight(weights)
        times, x, y = times[idx], x[idx], y[idx]
        n = times.size
    kk = min(int(k), n - 1)

    t_tree = cKDTree(times[:, None])
    td, _ = t_tree.query(times[:, None], k=kk + 1)
    s_tree = cKDTree(np.column_stack([x, y]))
    sd, _ = s_tree.query(np.column_stack([x, y]), k=kk + 1)

    b1 = max(float(np.median(td[:, kk])), float(floor))
    b2 = max(float(np.median(sd[:, kk])), float(floor))
    return b1, b2


def select_bandwidths_cv(
    times,
    x,
    y,
    weights=None,
    k: int = 15,
    floor: float = 1e-6,
    multipliers=(0.25, 0.5, 1.0, 2.0, 4.0),
):
    """Cross-validated bandwidths: maximize the weighted leave-one-out
    log density over a multiplicative grid around the k-NN choice."""
    b1_ref, b2_ref = select_bandwidths(times, x, y, weights=weights, k=k, floor=floor)
    times = as_float_array(times, "times")
    x = as_float_array(x, "x")
    y = as_float_array(y, "y")
    w = np.ones_like(times) if weights is None else as_float_array(weights, "weights")
    if w.sum() <= 0:
        w = np.ones_like(times)

    def score(b1, b2):
        bg = KdeBackground(times, x, y, w, b1, b2)
        vt = _loo_time_density(bg)
        us = _loo_space_density(bg)
        dens = np.maximum(vt * us, 1e-300)
        return float((w * np.log(dens)).sum())

    best = (-np.inf, b1_ref, b2_ref)
    for m1 in multipliers:
        for m2 in multipliers:
            b1 = max(b1_ref * m1, floor)
            b2 = max(b2_ref * m2, floor)
            s = score(b1, b2)
            if s > best[0]:
                best = (s, b1, b2)
    return best[1], best[2]
