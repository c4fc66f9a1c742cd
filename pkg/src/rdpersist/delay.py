"""Stochastic functional Kolmogorov systems ``dX_i = X_i f_i(Phi_t) dt + X_i g_i(Phi_t) dE_i``.

The path segment ``Phi_t`` on ``[-r, 0]`` is stored in a ring buffer whose
spacing equals the time step, so advancing in time only moves the head.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lyapunov import OccupationMeasure, persistence_verdict
from .noise import NoiseStream
from .projective import _block_stats


class SegmentError(ValueError):
    pass


class PathSegment:
    """History ``X(t + s)``, ``s in [-r, 0]``, on ``q + 1`` grid points.

    Values have shape ``batch + (n,)`` per sample; ``q * dt == r``.
    """

    def __init__(self, horizon, dt, values):
        values = np.asarray(values, dtype=float)
        q = int(round(horizon / dt)) if horizon > 0 else 0
        if horizon < 0 or not dt > 0:
            raise SegmentError("need horizon >= 0 and dt > 0")
        if not np.isclose(q * dt, horizon, rtol=1e-12, atol=1e-15):
            raise SegmentError(f"horizon {horizon} is not a multiple of dt {dt}")
        if values.shape[0] != q + 1:
            raise SegmentError(f"segment needs {q + 1} samples, got {values.shape[0]}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise SegmentError("segment values must be finite and nonnegative")
        self.horizon = float(horizon)
        self.dt = float(dt)
        self.q = q
        self._buf = values.copy()
        self._head = q  # buffer index of s = 0

    @classmethod
    def constant(cls, horizon, dt, x, batch_shape=()):
        x = np.asarray(x, dtype=float)
        q = int(round(horizon / dt)) if horizon > 0 else 0
        vals = np.broadcast_to(x, (q + 1,) + tuple(batch_shape) + x.shape[-1:]).copy()
        return cls(horizon, dt, vals)

    @property
    def n(self):
        return self._buf.shape[-1]

    @property
    def batch_shape(self):
        return self._buf.shape[1:-1]

    @property
    def head(self):
        """``X(t)``."""
        return self._buf[self._head]

    def sample(self, j):
        """Value at grid lag ``j`` steps back, ``0 <= j <= q``."""
        if not 0 <= j <= self.q:
            raise SegmentError(f"lag index {j} outside [0, {self.q}]")
        return self._buf[(self._head - j) % (self.q + 1)]

    def lag(self, s):
        """``X(t - s)`` for ``0 <= s <= r``, linearly interpolated between grid points."""
        if not -1e-12 <= s <= self.horizon + 1e-12:
            raise SegmentError(f"lag {s} outside [0, {self.horizon}]")
        pos = min(max(s / self.dt, 0.0), float(self.q))
        j = int(np.floor(pos))
        frac = pos - j
        if frac < 1e-12 or j == self.q:
            return self.sample(j)
        return (1 - frac) * self.sample(j) + frac * self.sample(j + 1)

    def values(self):
        """Samples ordered from ``s = -r`` to ``s = 0``."""
        idx = [(self._head - j) % (self.q + 1) for j in range(self.q, -1, -1)]
        return self._buf[idx]

    def times(self):
        return np.linspace(-self.horizon, 0.0, self.q + 1)

    def push(self, x):
        """Append ``X(t + dt)``; the oldest sample is dropped."""
        self._head = (self._head + 1) % (self.q + 1)
        self._buf[self._head] = x

    def copy(self):
        return PathSegment(self.horizon, self.dt, self.values())


@dataclass
class PsiParams:
    """Parameters of ``Psi = ln(1 + sum c_i x_i) + A2 int int e^{gamma (u - s)} h(phi(u)) du dmu(s)``.

    ``mu`` is a discrete measure on ``[-r, 0]`` given as ``(points, weights)``.
    """

    c: np.ndarray
    gamma_b: float = 1.0
    gamma0: float = 1.0
    A2: float = 0.0
    h: Callable = field(default=lambda x: np.ones(x.shape[:-1]))
    mu: tuple = ((0.0,), (1.0,))

    @property
    def gamma(self):
        return 0.5 * self.gamma_b


@dataclass
class SfdeModel:
    """Coefficients ``f(seg)``, ``g(seg)`` returning ``batch + (n,)`` arrays and the covariance ``sigma``."""

    n: int
    f: Callable
    g: Callable
    sigma: np.ndarray
    horizon: float = 0.0
    psi: PsiParams | None = None
    name: str = "sfde"

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if s.shape != (self.n, self.n):
            raise ValueError(f"sigma must be {self.n}x{self.n}")
        if not np.allclose(s, s.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        w, V = np.linalg.eigh(s)
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ValueError("sigma must be positive semidefinite")
        self.sigma = s
        self._root = (V * np.sqrt(np.maximum(w, 0.0))) @ V.T

    @property
    def root(self):
        """Symmetric square root of ``sigma``; ``dE = root @ dB``."""
        return self._root


def sfde_step(model: SfdeModel, seg: PathSegment, dt, stream: NoiseStream, k: int, zero=()):
    """Euler-Maruyama on the head value, clipped at 0; mutates and returns ``seg``.

    ``zero`` lists species held at exactly 0 (boundary faces).
    """
    if not np.isclose(dt, seg.dt, rtol=1e-12):
        raise SegmentError("dt must equal the segment spacing")
    x = seg.head
    f = np.asarray(model.f(seg), dtype=float)
    g = np.asarray(model.g(seg), dtype=float)
    dB = stream.normals(k, seg.batch_shape + (model.n,)) * np.sqrt(dt)
    dE = dB @ model.root.T
    new = x * (1.0 + f * dt + g * dE)
    if not np.all(np.isfinite(new)):
        raise ArithmeticError(f"{model.name}: non-finite values in the delay step")
    new = np.maximum(new, 0.0)
    if len(zero):
        new[..., list(zero)] = 0.0
    seg.push(new)
    return seg


def run_sfde(model, seg, dt, T, seed=0, stream=0, zero=(), observer=None):
    """Advance ``seg`` over ``round(T / dt)`` steps; ``observer(t, seg)`` after each."""
    rng = NoiseStream(seed, stream)
    for k in range(int(round(T / dt))):
        sfde_step(model, seg, dt, rng, k, zero)
        if observer is not None:
            observer((k + 1) * dt, seg)
    return seg


@dataclass
class DelayInvasion:
    species: int
    rate: float
    stderr: float
    path_rates: np.ndarray
    nonstationary: bool


def boundary_invasion(
    model: SfdeModel,
    i: int,
    dt: float,
    burn_in: float,
    T: float,
    x0=None,
    paths: int = 8,
    seed: int = 0,
    zero=None,
    blocks: int = 20,
) -> DelayInvasion:
    """Time average of ``f_i - sigma_ii g_i^2 / 2`` on the face ``X_i = 0``.

    ``zero`` lists every species held at 0 (default just ``i``); the others
    start from ``x0`` (default 1) and are run to stationarity first.
    """
    if not 0 <= burn_in < T:
        raise ValueError("need 0 <= burn_in < T")
    zero = (i,) if zero is None else tuple(sorted(set(zero) | {i}))
    x0 = np.ones(model.n) if x0 is None else np.asarray(x0, float)
    x0 = x0.copy()
    x0[list(zero)] = 0.0
    seg = PathSegment.constant(model.horizon, dt, x0, (paths,))
    rng = NoiseStream(seed, 2)
    nsteps = int(round(T / dt))
    nburn = int(round(burn_in / dt))
    vals = np.empty((nsteps - nburn, paths))
    sii = model.sigma[i, i]
    for k in range(nsteps):
        if k >= nburn:
            f = np.asarray(model.f(seg))[..., i]
            g = np.asarray(model.g(seg))[..., i]
            vals[k - nburn] = f - 0.5 * sii * g**2
        sfde_step(model, seg, dt, rng, k, zero)
    blocks = max(2, min(blocks, len(vals)))
    mean, se, _ = _block_stats(vals, blocks)
    _, _, bm = _block_stats(vals.mean(axis=1), min(8, len(vals)))
    diffs = np.diff(bm)
    pooled_se = float(np.sqrt(np.sum(se**2))) / paths
    mono = len(diffs) > 1 and (np.all(diffs > 0) or np.all(diffs < 0))
    nonstat = bool(mono and abs(bm[-1] - bm[0]) > 3 * pooled_se * np.sqrt(paths) + 1e-9)
    return DelayInvasion(i, float(mean.mean()), pooled_se, mean, nonstat)


def psi_monitor(model: SfdeModel, seg: PathSegment) -> np.ndarray:
    """``Psi`` on the segment grid (trapezoid rule in ``u``, exact sum over ``mu``)."""
    if model.psi is None:
        raise ValueError("model has no Psi parameters")
    p = model.psi
    x = seg.head
    c = np.broadcast_to(np.asarray(p.c, dtype=float), (seg.n,))
    out = np.log1p(np.sum(c * x, axis=-1))
    if p.A2 == 0:
        return out
    times = seg.times()
    hv = np.asarray(p.h(seg.values()), dtype=float)  # (q+1,) + batch
    total = np.zeros_like(out)
    for s, w in zip(*p.mu):
        if not -seg.horizon - 1e-12 <= s <= 1e-12:
            raise ValueError(f"mu atom {s} outside [-r, 0]")
        sel = times >= s - 1e-12
        u = times[sel]
        if len(u) < 2:
            continue
        kern = np.exp(p.gamma * (u - s))
        integrand = kern.reshape((-1,) + (1,) * (hv.ndim - 1)) * hv[sel]
        total = total + w * np.trapezoid(integrand, u, axis=0)
    return out + p.A2 * total


@dataclass
class DelayPersistence:
    verdict_min: object
    verdict_max: object
    band: tuple
    fraction_min: np.ndarray
    fraction_max: np.ndarray


def band_persistence(
    model: SfdeModel,
    dt,
    burn_in,
    T,
    x0=None,
    paths=8,
    seed=0,
    band=None,
    delta=0.05,
):
    """Occupation of ``min_i X_i`` and ``max_i X_i`` in ``[b, B]`` after burn-in.

    Without ``band`` the band is the smallest log-band holding ``1 - delta``
    of the first path's ``min_i X_i`` occupation.
    """
    x0 = np.ones(model.n) if x0 is None else np.asarray(x0, float)
    seg = PathSegment.constant(model.horizon, dt, x0, (paths,))
    bands = [] if band is None else [tuple(band)]
    occ_min = OccupationMeasure((paths,), burn_in, bands)
    occ_max = OccupationMeasure((paths,), burn_in, bands)

    def obs(t, s):
        h = s.head
        lo, hi = h.min(axis=-1), h.max(axis=-1)
        occ_min.add(lo, lo, dt, t)
        occ_max.add(hi, hi, dt, t)

    run_sfde(model, seg, dt, T, seed=seed, stream=3, observer=obs)
    vmin = persistence_verdict(occ_min.path(0), delta)
    vmax = persistence_verdict(occ_max.path(0), delta)
    if band is None:
        return DelayPersistence(vmin, vmax, (vmin.b, vmax.B), None, None)
    return DelayPersistence(vmin, vmax, tuple(band), occ_min.band_fraction(0), occ_max.band_fraction(0))


def delay_logistic(horizon, g, growth=1.0, name="delay-logistic"):
    """``f(phi) = a - phi(-r)``, ``g(phi) = g0``, unit covariance."""
    a, g0 = float(growth), float(g)

    def f(seg):
        return a - seg.lag(seg.horizon)

    def gfun(seg):
        return np.full(seg.head.shape, g0)

    return SfdeModel(1, f, gfun, np.eye(1), horizon=horizon, psi=PsiParams(c=np.ones(1)), name=name)


def delay_lv(horizon, growth, interaction, g, covariance=None, name="delay-lv"):
    """``f_i(phi) = m_i - a_ii phi_i(0) - sum_{j != i} a_ij phi_j(-r)``, ``g_i`` constant."""
    m = np.asarray(growth, dtype=float)
    A = np.asarray(interaction, dtype=float)
    n = len(m)
    if A.shape != (n, n):
        raise ValueError(f"interaction must be {n}x{n}")
    if np.any(np.diag(A) <= 0) or np.any(A < 0):
        raise ValueError("interaction must be nonnegative with positive diagonal")
    diag = np.diag(A)
    off = A - np.diag(diag)
    g0 = np.broadcast_to(np.asarray(g, dtype=float), (n,)).copy()
    cov = np.eye(n) if covariance is None else covariance

    def f(seg):
        return m - diag * seg.head - seg.lag(seg.horizon) @ off.T

    def gfun(seg):
        return np.broadcast_to(g0, seg.head.shape)

    return SfdeModel(n, f, gfun, cov, horizon=horizon, psi=PsiParams(c=np.ones(n)), name=name)
