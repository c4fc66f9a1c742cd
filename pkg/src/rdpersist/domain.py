"""Spectral discretization of the spatial domain.

A :class:`SpectralDomain` carries a grid, a positive weight density ``w`` and
a complete set of eigenfunctions of the weighted Laplacian ``u -> Lap(w u)``,
orthonormal in ``L2(D, w dx)``.  For ``w == 1`` the basis is the analytic
Fourier (torus) or cosine (Neumann) basis; for a non-constant weight it is
obtained from the symmetrized spectral differentiation matrix.

Fields are plain arrays whose trailing axis runs over the flattened grid, so
a state with ``m`` components is an array of shape ``(..., m, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("torus", "neumann")

#: relative round-off tolerance for the positivity clip
CLIP_TOL = 1e-12


class DomainError(ValueError):
    pass


class PositivityError(ArithmeticError):
    """Raised when a field goes negative beyond the round-off tolerance."""


def _axis_basis(kind, length, n):
    """Orthonormal 1-D basis (columns) with quadrature weight ``length / n``."""
    h = length / n
    if kind == "torus":
        x = np.arange(n) * h
        cols, lams, waves = [np.full(n, 1.0 / np.sqrt(length))], [0.0], [0]
        for k in range(1, n // 2):
            arg = 2 * np.pi * k * x / length
            lam = -(2 * np.pi * k / length) ** 2
            cols += [np.sqrt(2 / length) * np.cos(arg), np.sqrt(2 / length) * np.sin(arg)]
            lams += [lam, lam]
            waves += [k, -k]
        k = n // 2
        cols.append(np.cos(2 * np.pi * k * x / length) / np.sqrt(length))
        lams.append(-(2 * np.pi * k / length) ** 2)
        waves.append(k)
    else:
        x = (np.arange(n) + 0.5) * h
        cols, lams, waves = [np.full(n, 1.0 / np.sqrt(length))], [0.0], [0]
        for k in range(1, n):
            cols.append(np.sqrt(2 / length) * np.cos(np.pi * k * x / length))
            lams.append(-(np.pi * k / length) ** 2)
            waves.append(k)
    return x, np.column_stack(cols), np.array(lams), np.array(waves)


@dataclass(frozen=True, eq=False)
class SpectralDomain:
    kind: str
    dim: int
    extents: tuple
    grid_shape: tuple
    weight: np.ndarray
    points: np.ndarray
    cell_volume: float
    eigenvalues: np.ndarray
    basis: np.ndarray
    wavenumbers: np.ndarray
    _quad: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return int(np.prod(self.grid_shape))

    @property
    def volume(self) -> float:
        """Measure of the domain under ``w dx``."""
        return float(self._quad.sum())

    @property
    def quadrature(self) -> np.ndarray:
        """Grid weights ``w * dx`` of the measure."""
        return self._quad

    @property
    def uniform_weight(self) -> bool:
        return bool(np.all(self.weight == self.weight[0]))

    def check(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.n:
            raise DomainError(
                f"field has {values.shape[-1]} grid points, domain has {self.n}"
            )
        return values

    def ones(self, m=1):
        return np.ones((m, self.n))

    def inner(self, f, g):
        """Weighted ``L2`` inner product over the grid axis."""
        return np.sum(f * g * self._quad, axis=-1)

    def integrate(self, f):
        return np.sum(f * self._quad, axis=-1)

    def to_modes(self, values):
        values = self.check(values)
        return (values * self._quad) @ self.basis

    def from_modes(self, modes):
        modes = np.asarray(modes, dtype=float)
        if modes.shape[-1] != self.n:
            raise DomainError(f"mode vector has length {modes.shape[-1]}, expected {self.n}")
        return modes @ self.basis.T

    def eigenfunction(self, k):
        return self.basis[:, k].copy()

    def reshape(self, values):
        """View a field with its grid axis unflattened."""
        values = np.asarray(values)
        return values.reshape(values.shape[:-1] + tuple(self.grid_shape))


def build_domain(kind, dim, extents, grid_sizes, weight=None):
    """Build a torus or Neumann box with ``dim`` in {1, 2}.

    ``weight`` is the density of the reference measure on the grid (flattened,
    C order), a callable of the grid coordinates, or ``None`` for ``w = 1``.
    """
    if kind not in KINDS:
        raise DomainError(f"unknown domain kind {kind!r}; expected one of {KINDS}")
    if dim not in (1, 2):
        raise DomainError(f"unsupported dimension {dim}")
    extents = tuple(float(e) for e in np.broadcast_to(extents, (dim,)))
    grid_sizes = tuple(int(g) for g in np.broadcast_to(grid_sizes, (dim,)))
    for g in grid_sizes:
        if g < 8 or g & (g - 1):
            raise DomainError(f"grid size {g} is not a power of two >= 8")
    if any(e <= 0 for e in extents):
        raise DomainError("extents must be positive")

    axes = [_axis_basis(kind, L, g) for L, g in zip(extents, grid_sizes)]
    cell = float(np.prod([L / g for L, g in zip(extents, grid_sizes)]))
    if dim == 1:
        x, E0, lam0, waves = axes[0]
        points = x[:, None]
        waves = waves[:, None]
    else:
        (x, Ex, lx, wx), (y, Ey, ly, wy) = axes
        X, Y = np.meshgrid(x, y, indexing="ij")
        points = np.column_stack([X.ravel(), Y.ravel()])
        E0 = np.kron(Ex, Ey)
        lam0 = np.add.outer(lx, ly).ravel()
        waves = np.column_stack([np.repeat(wx, len(wy)), np.tile(wy, len(wx))])
    n = E0.shape[0]

    if weight is None:
        w = np.ones(n)
    elif callable(weight):
        w = np.asarray(weight(*points.T), dtype=float).reshape(n)
    else:
        w = np.asarray(weight, dtype=float).reshape(n)
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise DomainError("weight density must be finite and strictly positive")

    if np.all(w == w[0]):
        # Lap(c u) = c Lap(u): same eigenfunctions, renormalized for w dx
        order = np.argsort(-lam0, kind="stable")
        basis = E0[:, order] / np.sqrt(w[0])
        lam = lam0[order] * w[0]
        waves = waves[order]
    else:
        # u -> Lap(w u) is similar to the symmetric W^1/2 D2 W^1/2
        D2 = (E0 * lam0) @ E0.T * cell
        sw = np.sqrt(w)
        B = sw[:, None] * D2 * sw[None, :]
        B = 0.5 * (B + B.T)
        lam, Q = np.linalg.eigh(B)
        order = np.argsort(-lam, kind="stable")
        lam, Q = lam[order], Q[:, order]
        lam[0] = 0.0
        lam = np.minimum(lam, 0.0)
        basis = Q / sw[:, None] / np.sqrt(cell)
        if basis[:, 0].sum() < 0:
            basis[:, 0] *= -1
        waves = np.full((n, dim), -1)
        waves[:, 0] = np.arange(n)

    return SpectralDomain(
        kind=kind,
        dim=dim,
        extents=extents,
        grid_shape=grid_sizes,
        weight=w,
        points=points,
        cell_volume=cell,
        eigenvalues=lam,
        basis=basis,
        wavenumbers=waves,
        _quad=w * cell,
    )


@dataclass(frozen=True, eq=False)
class EllipticOp:
    """Per-component ``A_i u = d_i Lap_w(u) - c_i u``.

    ``conj_weight`` is the ``K`` of an operator ``d Lap(u / K)``; it is only
    consistent with a domain whose weight is ``1 / K``.
    """

    diffusion: np.ndarray
    shift: np.ndarray
    conj_weight: np.ndarray | None = None

    @classmethod
    def create(cls, diffusion, shift=0.0, m=None, conj_weight=None):
        diffusion = np.atleast_1d(np.asarray(diffusion, dtype=float))
        shift = np.atleast_1d(np.asarray(shift, dtype=float))
        m = m or max(len(diffusion), len(shift))
        diffusion = np.broadcast_to(diffusion, (m,)).copy()
        shift = np.broadcast_to(shift, (m,)).copy()
        if np.any(diffusion <= 0):
            raise DomainError("diffusion constants must be positive")
        K = None if conj_weight is None else np.asarray(conj_weight, dtype=float)
        return cls(diffusion, shift, K)

    @property
    def m(self):
        return len(self.diffusion)

    def validate(self, domain: SpectralDomain):
        if self.conj_weight is None:
            if not domain.uniform_weight:
                raise DomainError("weighted domain needs an operator with conj_weight = 1/w")
            return
        K = np.broadcast_to(self.conj_weight, (domain.n,))
        if not np.allclose(K * domain.weight, 1.0, rtol=1e-10, atol=0):
            raise DomainError("conj_weight K must equal 1 / domain weight")

    def symbol(self, domain: SpectralDomain):
        """Mode multipliers ``d_i lambda_k - c_i``, shape ``(m, n)``."""
        scale = 1.0
        if self.conj_weight is None and not domain.uniform_weight:
            raise DomainError("weighted domain needs an operator with conj_weight = 1/w")
        if self.conj_weight is None:
            # domain eigenvalues carry the constant weight; undo it
            scale = 1.0 / domain.weight[0]
        lam = domain.eigenvalues * scale
        return self.diffusion[:, None] * lam[None, :] - self.shift[:, None]

    def apply(self, domain, values):
        """``A x`` evaluated spectrally."""
        modes = domain.to_modes(values)
        return domain.from_modes(modes * self.symbol(domain))

    def e_tilde(self, domain):
        """``A 1``, so that ``<A x, 1> = <x, A 1>``."""
        return self.apply(domain, domain.ones(self.m))


def clip_negative(values, tol=CLIP_TOL, mode="raise"):
    """Zero out round-off negatives; return ``(values, max relative clip)``.

    ``mode='raise'`` raises when a value is below ``-tol * |values|_inf``;
    ``mode='clip'`` zeroes every negative value regardless of size.
    """
    scale = np.max(np.abs(values), axis=-1, keepdims=True)
    neg = np.minimum(values, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, -neg / scale, 0.0)
    worst = float(rel.max()) if rel.size else 0.0
    if mode == "raise" and worst > tol:
        raise PositivityError(f"negative values of relative size {worst:.3e}")
    if mode != "none" and worst > 0:
        values = np.maximum(values, 0.0)
    return values, worst


def semigroup_factor(op: EllipticOp, domain: SpectralDomain, t):
    if t < 0:
        raise ValueError("semigroup time must be nonnegative")
    return np.exp(op.symbol(domain) * t)


def apply_semigroup(op: EllipticOp, domain: SpectralDomain, values, t, positivity="raise"):
    """``S(t) x``: mode ``k`` of component ``i`` is scaled by ``exp((d_i l_k - c_i) t)``.

    ``positivity`` is ``'raise'``, ``'clip'`` or ``'none'``; nonnegative inputs
    are only checked when it is not ``'none'``.
    """
    values = domain.check(values)
    if t < 0:
        raise ValueError("semigroup time must be nonnegative")
    if t == 0:
        return values.copy()
    out = domain.from_modes(domain.to_modes(values) * semigroup_factor(op, domain, t))
    if positivity != "none" and np.all(values >= 0):
        out, _ = clip_negative(out, mode=positivity)
    return out


def norms(domain: SpectralDomain, values, beta=None, op: EllipticOp | None = None):
    """``L1`` (weighted), ``L2`` (weighted), ``Linf`` and optionally ``frac(beta)``.

    Each norm is taken per component (over the grid axis).  ``frac`` is
    ``(sum_k (c - d l_k)^(2 beta) |<x, e_k>|^2)^(1/2)`` for the operator ``op``
    and needs ``c - d l_k > 0`` on every mode.
    """
    values = domain.check(values)
    out = {
        "L1": domain.integrate(np.abs(values)),
        "L2": np.sqrt(domain.inner(values, values)),
        "Linf": np.max(np.abs(values), axis=-1),
    }
    if beta is not None:
        out["frac"] = frac_norm(domain, values, beta, op)
    return out


def frac_norm(domain, values, beta, op):
    if not -1.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [-1, 1]")
    if op is None:
        raise ValueError("frac norm needs an operator")
    pos = -op.symbol(domain)
    if values.ndim >= 2 and pos.shape[0] != values.shape[-2]:
        pos = np.broadcast_to(pos[:1], (values.shape[-2], pos.shape[1]))
    elif values.ndim == 1:
        pos = pos[0]
    if np.any(pos <= 0):
        raise ValueError("frac norm needs c - d*lambda_k > 0 on every mode")
    modes = domain.to_modes(values)
    return np.sqrt(np.sum(pos ** (2 * beta) * modes**2, axis=-1))
