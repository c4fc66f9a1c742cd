"""Principal eigenpair of ``L u = A u + c u`` for a single-component operator.

Power iteration on ``exp(tau L)``, realized by Strang splitting
``exp(tau c / 2) S(tau) exp(tau c / 2)``, converges to the positive
eigenfunction; a few Rayleigh-quotient-iteration steps with a dense solve
then polish the pair to round-off on the discrete operator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import EllipticOp, SpectralDomain


class EigenError(ArithmeticError):
    pass


@dataclass
class EigenResult:
    value: float
    field: np.ndarray
    residual: float
    iterations: int
    tau: float


def _potential(domain, potential):
    if potential is None:
        return np.zeros(domain.n)
    if callable(potential):
        c = potential(*domain.points.T)
    else:
        c = potential
    return np.broadcast_to(np.asarray(c, dtype=float), (domain.n,)).copy()


def operator_matrix(op: EllipticOp, domain: SpectralDomain, potential=None, component=0):
    """Dense grid matrix of ``A_i + c`` acting on nodal values."""
    c = _potential(domain, potential)
    sym = op.symbol(domain)[component]
    E = domain.basis
    return (E * sym) @ (E.T * domain.quadrature) + np.diag(c)


def _apply(op, domain, c, u, component):
    modes = domain.to_modes(u) * op.symbol(domain)[component]
    return domain.from_modes(modes) + c * u


def _residual(op, domain, c, u, lam, component):
    r = _apply(op, domain, c, u, component) - lam * u
    return float(np.sqrt(domain.inner(r, r) / domain.inner(u, u)))


def rayleigh(op: EllipticOp, domain: SpectralDomain, potential, u, component=0):
    """``<L u, u> / <u, u>`` in ``L2(w dx)``."""
    u = domain.check(u)
    nrm = domain.inner(u, u)
    if not nrm > 0:
        raise ValueError("Rayleigh quotient of the zero field")
    c = _potential(domain, potential)
    return float(domain.inner(_apply(op, domain, c, u, component), u) / nrm)


def principal_eig(
    op: EllipticOp,
    domain: SpectralDomain,
    potential=None,
    tol=1e-10,
    tau=None,
    max_iter=200_000,
    component=0,
    polish=True,
) -> EigenResult:
    """Largest eigenvalue of ``A_i + c`` and its positive eigenfunction (unit ``L1``).

    ``potential`` is an array on the grid, a callable of the coordinates or
    ``None``.  The splitting step defaults to ``0.05 / |c|_inf``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    c = _potential(domain, potential)
    cmax = float(np.max(np.abs(c)))
    if tau is None:
        tau = 0.05 / cmax if cmax > 0 else 1.0
    half = np.exp(0.5 * tau * c)
    factor = np.exp(op.symbol(domain)[component] * tau)

    u = np.ones(domain.n) / domain.volume
    lam_old = np.inf
    it = 0
    # stop the power phase once the splitting eigenvalue has settled
    for it in range(1, max_iter + 1):
        w = half * domain.from_modes(domain.to_modes(half * u) * factor)
        growth = domain.integrate(w)
        if not growth > 0:
            raise EigenError("power iteration lost positivity")
        u = np.maximum(w / growth, 0.0)
        lam_split = np.log(growth) / tau
        if abs(lam_split - lam_old) < 1e-3 * tol * max(1.0, abs(lam_split)) and it > 10:
            break
        lam_old = lam_split
    else:
        raise EigenError(f"power iteration did not converge in {max_iter} steps")

    lam = rayleigh(op, domain, c, u, component)
    if polish:
        M = operator_matrix(op, domain, c, component)
        for _ in range(8):
            if _residual(op, domain, c, u, lam, component) < 1e-3 * tol:
                break
            try:
                y = np.linalg.solve(M - (lam + 1e-14 * max(1, abs(lam))) * np.eye(domain.n), u)
            except np.linalg.LinAlgError:
                break
            y = y * np.sign(domain.integrate(y))
            u = y / domain.integrate(np.abs(y))
            lam = rayleigh(op, domain, c, u, component)
        u = np.maximum(u, 0.0)
        u = u / domain.integrate(u)
    res = _residual(op, domain, c, u, lam, component)
    if res >= tol:
        raise EigenError(f"eigen residual {res:.3e} above tol {tol:.1e}")
    return EigenResult(float(lam), u, res, it, float(tau))
