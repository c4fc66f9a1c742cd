"""Lyapunov-function monitors, occupation measures and persistence verdicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import EllipticOp, SpectralDomain, frac_norm

# fixed log10 bin edges so histograms from different runs merge exactly
LOG_MIN, LOG_MAX, BINS_PER_DECADE = -30.0, 30.0, 20
EDGES = np.linspace(LOG_MIN, LOG_MAX, int((LOG_MAX - LOG_MIN) * BINS_PER_DECADE) + 1)
NBINS = len(EDGES) + 1  # underflow (incl. 0) and overflow bins at the ends


def g_splice(s):
    """Smooth increasing ``g`` with ``g = 0`` on ``s <= 0`` and ``g(s) = s`` on ``s >= 1``.

    On ``[0, 1]`` it is the quintic ``6 s^3 - 8 s^4 + 3 s^5``, which matches
    value, slope and curvature at both ends.
    """
    s = np.asarray(s, dtype=float)
    c = np.clip(s, 0.0, 1.0)
    mid = c**3 * (6 - 8 * c + 3 * c**2)
    return np.where(s <= 0, 0.0, np.where(s >= 1, s, mid))


def h_of_r(r):
    """``V = g(-ln r)``; zero for ``r >= 1`` and ``-ln r`` for ``r <= 1/e``."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        s = -np.log(r)
    return g_splice(s)


def bin_index(values):
    """Histogram bin of each value; bin 0 collects zeros and values below 1e-30."""
    values = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore"):
        lg = np.log10(np.where(values > 0, values, 0.0))
    idx = np.searchsorted(EDGES, lg, side="right")
    return np.where(values > 0, idx, 0)


def bin_bounds(i):
    lo = 0.0 if i == 0 else 10 ** EDGES[i - 1]
    hi = np.inf if i >= len(EDGES) else 10 ** EDGES[i]
    return lo, hi


@dataclass
class OccupationMeasure:
    """Time-weighted histograms of ``|u|_L1`` and ``|x|_inf`` for a batch of paths."""

    batch_shape: tuple = ()
    burn_in: float = 0.0
    bands: list = field(default_factory=list)
    total_time: float = 0.0
    kept_time: float = 0.0
    mass_hist: np.ndarray = None
    sup_hist: np.ndarray = None
    band_time: np.ndarray = None

    def __post_init__(self):
        shape = tuple(self.batch_shape)
        if self.mass_hist is None:
            self.mass_hist = np.zeros(shape + (NBINS,))
            self.sup_hist = np.zeros(shape + (NBINS,))
        if self.band_time is None:
            self.band_time = np.zeros(shape + (len(self.bands),))

    def add(self, mass, sup, dt, t):
        """Accumulate one sample held for ``dt`` at time ``t``."""
        self.total_time = t
        if t <= self.burn_in + 1e-12:
            return
        self.kept_time += dt
        mass = np.broadcast_to(mass, self.batch_shape)
        sup = np.broadcast_to(sup, self.batch_shape)
        _scatter(self.mass_hist, bin_index(mass), dt)
        _scatter(self.sup_hist, bin_index(sup), dt)
        for j, (b, B) in enumerate(self.bands):
            self.band_time[..., j] += dt * ((mass >= b) & (mass <= B))

    def mass_distribution(self):
        return self.mass_hist / max(self.kept_time, 1e-300)

    def band_fraction(self, j=0):
        return self.band_time[..., j] / max(self.kept_time, 1e-300)

    def merge(self, other: OccupationMeasure) -> OccupationMeasure:
        """Pool two measures over disjoint time windows (same burn-in and bands)."""
        out = OccupationMeasure(self.batch_shape, self.burn_in, list(self.bands))
        out.total_time = self.total_time + other.total_time
        out.kept_time = self.kept_time + other.kept_time
        out.mass_hist = self.mass_hist + other.mass_hist
        out.sup_hist = self.sup_hist + other.sup_hist
        out.band_time = self.band_time + other.band_time
        return out

    def path(self, index) -> OccupationMeasure:
        out = OccupationMeasure((), self.burn_in, list(self.bands))
        out.total_time, out.kept_time = self.total_time, self.kept_time
        out.mass_hist = self.mass_hist[index].copy()
        out.sup_hist = self.sup_hist[index].copy()
        out.band_time = self.band_time[index].copy()
        return out


def _scatter(hist, idx, w):
    if hist.ndim == 1:
        hist[int(idx)] += w
        return
    flat = hist.reshape(-1, hist.shape[-1])
    flat[np.arange(flat.shape[0]), np.ravel(idx)] += w


@dataclass
class LyapunovMonitor:
    """Running ``W1 = 1 + |x|^2_{beta,2} / 2``, ``W2 = 1 + |x|_L1`` and ``V = h(|u|_L1)``.

    ``norm_op`` defines the fractional norm; its ``shift - d lambda`` must be
    positive on every mode.
    """

    domain: SpectralDomain
    norm_op: EllipticOp
    tracked: tuple = (0,)
    beta: float = -0.3
    record: bool = True
    trace: list = field(default_factory=list)

    def values(self, x):
        dom = self.domain
        x = dom.check(x)
        l1 = dom.integrate(np.abs(x))
        fr = frac_norm(dom, x, self.beta, self.norm_op)
        mass = l1[..., list(self.tracked)].sum(axis=-1)
        return {
            "L1": l1,
            "Linf": np.max(np.abs(x), axis=(-2, -1)),
            "W1": 1.0 + 0.5 * np.sum(fr**2, axis=-1),
            "W2": 1.0 + l1.sum(axis=-1),
            "V": h_of_r(mass),
            "mass": mass,
        }

    def __call__(self, t, x, dt):
        vals = self.values(x)
        if self.record:
            self.trace.append((t, vals))
        return vals

    def series(self, key):
        return np.array([v[key] for _, v in self.trace])

    def times(self):
        return np.array([t for t, _ in self.trace])


class Observer:
    """Feeds a :class:`LyapunovMonitor` and an :class:`OccupationMeasure` each step."""

    def __init__(self, monitor: LyapunovMonitor, occupation: OccupationMeasure, every=1):
        self.monitor = monitor
        self.occupation = occupation
        self.every = every
        self._k = 0

    def __call__(self, t, x, dt):
        dom = self.monitor.domain
        l1 = dom.integrate(np.abs(x))
        mass = l1[..., list(self.monitor.tracked)].sum(axis=-1)
        sup = np.max(np.abs(x), axis=(-2, -1))
        self.occupation.add(mass, sup, dt, t)
        if self._k % self.every == 0:
            self.monitor(t, x, dt)
        self._k += 1


def observe(monitor: LyapunovMonitor, occupation: OccupationMeasure, x, dt, t):
    """One time-weighted update of both accumulators; returns the monitor values."""
    vals = monitor(t, x, dt)
    occupation.add(vals["mass"], vals["Linf"], dt, t)
    return vals


@dataclass(frozen=True)
class Verdict:
    persistent: bool
    b: float
    B: float
    fraction: float


class InsufficientSamples(ValueError):
    pass


def persistence_verdict(occ: OccupationMeasure, delta=0.05, floor=1e-8) -> Verdict:
    """Smallest log-band of ``|u|_L1`` holding at least ``1 - delta`` of the post-burn-in time.

    Persistent when that band excludes the zero/underflow bin and its lower
    edge is at least ``floor``.
    """
    if occ.kept_time <= 0:
        raise InsufficientSamples("no samples after burn-in")
    if occ.mass_hist.ndim != 1:
        raise ValueError("verdict needs a single-path occupation measure; use .path(i)")
    p = occ.mass_distribution()
    target = 1.0 - delta
    csum = np.concatenate([[0.0], np.cumsum(p)])
    best = None
    lo = 0
    for hi in range(1, NBINS + 1):
        while lo < hi and csum[hi] - csum[lo + 1] >= target - 1e-12:
            lo += 1
        if csum[hi] - csum[lo] >= target - 1e-12:
            if best is None or hi - lo < best[1] - best[0]:
                best = (lo, hi)
    if best is None:
        return Verdict(False, 0.0, np.inf, float(csum[-1]))
    lo, hi = best
    b, _ = bin_bounds(lo)
    _, B = bin_bounds(hi - 1)
    frac = float(csum[hi] - csum[lo])
    persistent = lo > 0 and b >= floor
    return Verdict(bool(persistent), float(b), float(B), frac)


@dataclass
class DriftReport:
    slope: float
    intercept: float
    centers: np.ndarray
    mean_drift: np.ndarray
    counts: np.ndarray
    violations: list

    @property
    def ok(self):
        return self.slope <= 0 and not self.violations


def drift_check(mass, w2, dt, threshold=None, bins=12):
    """Empirical one-step drift of ``W2`` against ``|x|_L1``.

    ``mass`` and ``w2`` are per-step traces (axis 0 = time, extra axes are
    pooled as independent paths).  Fits ``E[dW2]/dt ~ K - c |x|_L1`` on the
    samples above ``threshold`` and lists bins above it with positive mean
    drift.
    """
    mass = np.asarray(mass, float)
    w2 = np.asarray(w2, float)
    if mass.shape[0] < 1000:
        raise InsufficientSamples("drift_check needs a trace of at least 1000 steps")
    inc = (w2[1:] - w2[:-1]) / dt
    x = mass[:-1]
    inc, x = inc.ravel(), x.ravel()
    if threshold is None:
        threshold = float(np.median(x))
    sel = x >= threshold
    if sel.sum() < 2 or np.ptp(x[sel]) == 0:
        slope, icpt = 0.0, float(inc[sel].mean()) if sel.any() else 0.0
    else:
        slope, icpt = np.polyfit(x[sel], inc[sel], 1)
    edges = np.linspace(x.min(), x.max() + 1e-12, bins + 1)
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    sums = np.bincount(which, weights=inc, minlength=bins)
    sq = np.bincount(which, weights=inc**2, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts
        var = sq / counts - mean**2
        se = np.sqrt(np.maximum(var, 0) / counts)
    centers = 0.5 * (edges[1:] + edges[:-1])
    violations = [
        float(c)
        for c, mu, s, k in zip(centers, mean, se, counts)
        if k > 10 and c >= threshold and mu > 3 * s
    ]
    return DriftReport(float(slope), float(icpt), centers, mean, counts, violations)
