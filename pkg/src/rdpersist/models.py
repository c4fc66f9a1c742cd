"""Constructors for the example systems and the invasion-rate pipeline.

Coefficients given as scalars are spatially constant; callables are
evaluated on the grid coordinates and arrays are taken as nodal values.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain import EllipticOp, SpectralDomain, build_domain
from .engine import ModelError, ModelSpec, StepperConfig, simulate, validate_model
from .lyapunov import OccupationMeasure, persistence_verdict
from .noise import ChannelRule, NoiseSpec
from .projective import LinearizedModel, diverse_profiles, estimate_lambda, linearize


def grid_values(domain: SpectralDomain, value, name="coefficient"):
    """Nodal values of a scalar, array or callable of the coordinates."""
    if callable(value):
        out = value(*domain.points.T)
    else:
        out = value
    try:
        return np.broadcast_to(np.asarray(out, dtype=float), (domain.n,)).copy()
    except ValueError as exc:
        raise ModelError(f"{name}: cannot evaluate on a grid of {domain.n} points") from exc


def _identity(u):
    return u


def _rule(rule):
    return rule if isinstance(rule, ChannelRule) else ChannelRule(rule)


# --------------------------------------------------------------------------- logistic


@dataclass
class LogisticParams:
    """``du = [d Lap(u/K) + r u (1 - u/K) - E u] dt + eps sigma(u) dW``."""

    d: float = 1.0
    K: object = 1.0
    r: object = 1.0
    E: object = 0.0
    eps: float = 0.0
    sigma: Callable = _identity
    sigma_slope: float | None = 1.0
    noise: object = "white"
    taming: float = 1.0


def build_logistic(params: LogisticParams, domain: SpectralDomain) -> ModelSpec:
    """Logistic model; the returned model lives on ``domain`` reweighted by ``1/K``."""
    K = grid_values(domain, params.K, "K")
    r = grid_values(domain, params.r, "r")
    E = grid_values(domain, params.E, "E")
    if np.any(K <= 0):
        raise ModelError("K must be strictly positive")
    if np.any(r < 0) or np.any(E < 0):
        raise ModelError("r and E must be nonnegative")
    if not 0 <= params.eps:
        raise ModelError("eps must be nonnegative")
    if not np.allclose(domain.weight * K, 1.0, rtol=1e-12, atol=0):
        domain = build_domain(domain.kind, domain.dim, domain.extents, domain.grid_shape, 1.0 / K)
    op = EllipticOp.create(params.d, 0.0, m=1, conj_weight=K)
    sig = params.sigma

    def f1(x):
        return r * (1.0 - x / K) - E

    def sigma(x):
        return sig(x)

    slope = None
    if params.sigma_slope is not None:
        s0 = float(params.sigma_slope)

        def slope(x):
            return np.full(x.shape, s0)

    model = ModelSpec(
        name="logistic",
        domain=domain,
        op=op,
        f1=f1,
        sigma=sigma,
        noise=NoiseSpec.create([_rule(params.noise)], params.eps),
        tracked=(0,),
        sigma_slope=slope,
        taming=params.taming,
        poly_degree=2,
        params={"d": params.d, "eps": params.eps},
    )
    validate_model(model)
    return model


# --------------------------------------------------------------------------- KPP


@dataclass
class KppParams:
    """``du = [u_xx + u - u^2] dt + eps sigma(u) dW``."""

    eps: float = 0.0
    sigma: Callable = _identity
    sigma_slope: float | None = 1.0
    noise: object = "white"
    taming: float = 1.0


def kpp_domain(points=64, dim=1):
    return build_domain("torus", dim, 2 * np.pi, points)


def build_kpp(params: KppParams, domain: SpectralDomain | None = None) -> ModelSpec:
    domain = domain or kpp_domain()
    if params.eps < 0:
        raise ModelError("eps must be nonnegative")
    sig = params.sigma
    slope = None
    if params.sigma_slope is not None:
        s0 = float(params.sigma_slope)

        def slope(x):
            return np.full(x.shape, s0)

    model = ModelSpec(
        name="kpp",
        domain=domain,
        op=EllipticOp.create(1.0, 0.0, m=1),
        f1=lambda x: 1.0 - x,
        sigma=lambda x: sig(x),
        noise=NoiseSpec.create([_rule(params.noise)], params.eps),
        tracked=(0,),
        sigma_slope=slope,
        taming=params.taming,
        poly_degree=2,
        params={"eps": params.eps},
    )
    validate_model(model)
    return model


def build_linear(
    domain: SpectralDomain,
    diffusion=1.0,
    shift=0.0,
    growth=0.0,
    noise_strength=0.0,
    noise="scalar",
    name="linear",
) -> ModelSpec:
    """``du = [d Lap u - c u + a u] dt + s u dW``: heat, GBM and their mixtures."""
    a = float(growth)
    model = ModelSpec(
        name=name,
        domain=domain,
        op=EllipticOp.create(diffusion, shift, m=1),
        f1=lambda x: np.full(x.shape, a),
        sigma=_identity,
        noise=NoiseSpec.create([_rule(noise)], noise_strength),
        tracked=(0,),
        sigma_slope=lambda x: np.ones(x.shape),
        poly_degree=1,
        params={"growth": a, "shift": shift, "noise_strength": noise_strength},
    )
    validate_model(model)
    return model


# --------------------------------------------------------------------------- SIR


@dataclass
class SirParams:
    """Susceptible-infected model; components are ordered ``(S, I)`` and ``I`` is tracked."""

    lam: float = 1.0
    eta: float = 0.5
    delta: float = 0.1
    sigma: float = 0.1
    beta: float = 1.0
    c1: float = 0.5
    c2: float = 0.5
    c3: float = 0.0
    d1: float = 1.0
    d2: float = 1.0
    alpha1: float = 0.0
    alpha2: float = 0.0

    def check(self):
        for key in ("lam", "eta", "delta", "sigma", "beta", "c1", "c2", "d1", "d2"):
            if not getattr(self, key) > 0:
                raise ModelError(f"sir parameter {key} must be positive")
        for key in ("c3", "alpha1", "alpha2"):
            if getattr(self, key) < 0:
                raise ModelError(f"sir parameter {key} must be nonnegative")


def sir_tilde_lambda(p: SirParams) -> float:
    """Deterministic threshold ``[beta lam - (eta + delta + sigma)(c1 lam + eta)] / (c1 lam + eta)``."""
    den = p.c1 * p.lam + p.eta
    return (p.beta * p.lam - (p.eta + p.delta + p.sigma) * den) / den


def build_sir(params: SirParams, domain: SpectralDomain | None = None) -> ModelSpec:
    params.check()
    domain = domain or build_domain("neumann", 1, 1.0, 16)
    p = params
    removal = p.eta + p.delta + p.sigma

    def incidence(S, I):
        return p.beta / (1.0 + p.c1 * S + p.c2 * I + p.c3 * S * I)

    def f1(x):
        S, I = x[..., 0, :], x[..., 1, :]
        inc = incidence(S, I)
        return np.stack([-p.eta - inc * I, -removal + inc * S], axis=-2)

    def f2(x):
        out = np.zeros_like(x)
        out[..., 0, :] = p.lam
        return out

    def slope(x):
        return np.ones(x.shape[:-2] + (1, x.shape[-1]))

    model = ModelSpec(
        name="sir",
        domain=domain,
        op=EllipticOp.create([p.d1, p.d2], 0.0),
        f1=f1,
        f2=f2,
        sigma=_identity,
        noise=NoiseSpec.create(["scalar", "scalar"], [p.alpha1, p.alpha2], independent=True),
        tracked=(1,),
        sigma_slope=slope,
        poly_degree=2,
        params=dict(vars(p)),
    )
    validate_model(model)
    return model


def sir_equilibrium_state(params: SirParams, domain: SpectralDomain):
    """Disease-free state ``S = lam / eta`` with a unit-mass constant ``I`` profile."""
    x = np.empty((2, domain.n))
    x[0] = params.lam / params.eta
    x[1] = 1.0 / domain.volume
    return x


# --------------------------------------------------------------------------- Lotka-Volterra


@dataclass
class LvParams:
    """``dx_i = [d_i Lap x_i + x_i (m_i - sum_j a_ij x_j)] dt + eps_i sigma_i(x_i) dW_i``."""

    growth: list
    interaction: list
    diffusion: object = 1.0
    eps: object = 0.0
    noise: object = "white"
    sigma: Callable = _identity
    sigma_slope: float | None = 1.0
    taming: float = 1.0
    independent: bool = True

    @property
    def m(self):
        return len(self.growth)


def lv_domain(points=16, length=1.0):
    return build_domain("neumann", 1, length, points)


def build_lv(params: LvParams, domain: SpectralDomain | None = None, tracked=(0,)) -> ModelSpec:
    domain = domain or lv_domain()
    m = params.m
    A = params.interaction
    if len(A) != m or any(len(row) != m for row in A):
        raise ModelError(f"interaction must be {m}x{m}")
    mi = np.array([grid_values(domain, g, f"growth[{i}]") for i, g in enumerate(params.growth)])
    a = np.array([[grid_values(domain, A[i][j], f"interaction[{i}][{j}]") for j in range(m)] for i in range(m)])
    for i in range(m):
        if np.any(a[i, i] <= 0):
            raise ModelError(f"interaction[{i}][{i}] must be positive")
    if np.any(a < 0):
        raise ModelError("interaction coefficients must be nonnegative")
    rules = params.noise if isinstance(params.noise, (list, tuple)) else [params.noise] * m
    sig = params.sigma
    slope = None
    if params.sigma_slope is not None:
        s0 = float(params.sigma_slope)

        def slope(x):
            return np.full(x.shape[:-2] + (len(tracked), x.shape[-1]), s0)

    def f1(x):
        return mi - np.einsum("ijn,...jn->...in", a, x)

    model = ModelSpec(
        name=f"lv{m}",
        domain=domain,
        op=EllipticOp.create(params.diffusion, 0.0, m=m),
        f1=f1,
        sigma=lambda x: sig(x),
        noise=NoiseSpec.create([_rule(r) for r in rules], params.eps, params.independent),
        tracked=tuple(tracked),
        sigma_slope=slope,
        taming=params.taming,
        poly_degree=2,
    )
    validate_model(model)
    return model


class BoundaryError(RuntimeError):
    """The boundary system an invasion rate refers to is not persistent."""


@dataclass
class InvasionResult:
    species: int
    face: tuple
    rate: float
    stderr: float
    path_rates: np.ndarray
    spread: float
    multimodal: bool
    nonstationary: bool
    boundary_persistent: dict = field(default_factory=dict)

    def summary(self):
        return {
            "species": self.species,
            "face": "+".join(str(i) for i in self.face) or "empty",
            "rate": self.rate,
            "stderr": self.stderr,
            "spread": self.spread,
            "replicas": len(self.path_rates),
            "multimodal": int(self.multimodal),
            "nonstationary": int(self.nonstationary),
        }


class _FaceObserver:
    def __init__(self, domain, present, paths, burn_in):
        self.domain = domain
        self.present = list(present)
        self.occ = [OccupationMeasure((paths,), burn_in) for _ in self.present]

    def __call__(self, t, x, dt):
        mass = self.domain.integrate(x[:, self.present, :])
        sup = np.max(x[:, self.present, :], axis=-1)
        for j, occ in enumerate(self.occ):
            occ.add(mass[:, j], sup[:, j], dt, t)


def invasion_rate(
    params: LvParams,
    k: int,
    cfg: StepperConfig,
    domain: SpectralDomain | None = None,
    replicas: int = 8,
    burn_in: float = 30.0,
    T: float = 60.0,
    seed: int = 0,
    face=None,
    delta: float = 0.05,
    check_boundary: bool = True,
) -> InvasionResult:
    """Invasion rate of species ``k`` into the stationary state of ``face``.

    ``face`` lists the resident species (default: all but ``k``); the other
    species are held at 0.  ``rate = -max_replica(mean H)``, i.e. the minimum
    over replicas of the time-averaged per-capita growth of the linearized
    invader.
    """
    if replicas < 8:
        raise ValueError("invasion_rate needs at least 8 replicas")
    model = build_lv(params, domain, tracked=(k,))
    dom = model.domain
    m = params.m
    face = tuple(i for i in range(m) if i != k) if face is None else tuple(sorted(face))
    if k in face:
        raise ValueError("the invader cannot be a resident of the face")
    lin: LinearizedModel = linearize(model)
    others = list(model.others)
    rng = np.random.default_rng([seed, k, len(face)])
    z0 = np.zeros((replicas, len(others), dom.n))
    for j, s in enumerate(others):
        if s in face:
            z0[:, j, :] = (0.5 + rng.random(replicas))[:, None]
    init = diverse_profiles(dom, replicas, seed)[:, None, :]
    obs = _FaceObserver(dom, face, replicas, burn_in)
    est = estimate_lambda(lin, cfg, burn_in, T, paths=replicas, seed=seed, init=init, z0=z0, observer=obs if face else None)
    verdicts = {}
    if face and check_boundary:
        for s, occ in zip(face, obs.occ):
            per_path = [persistence_verdict(occ.path(i), delta).persistent for i in range(replicas)]
            verdicts[s] = all(per_path)
        if not all(verdicts.values()):
            lost = [s for s, ok in verdicts.items() if not ok]
            raise BoundaryError(f"residents {lost} of face {face} do not persist")
    rates = -est.path_means
    return InvasionResult(
        species=k,
        face=face,
        rate=float(-est.value),
        stderr=est.stderr,
        path_rates=rates,
        spread=float(rates.max() - rates.min()),
        multimodal=est.multimodal,
        nonstationary=est.nonstationary,
        boundary_persistent=verdicts,
    )


@dataclass
class CoexistenceReport:
    coexist: bool
    score: float
    table: list
    unreachable: list

    def rows(self):
        return [r.summary() for r in self.table]


def coexistence_check(
    params: LvParams,
    cfg: StepperConfig,
    domain: SpectralDomain | None = None,
    replicas: int = 8,
    burn_in: float = 30.0,
    T: float = 60.0,
    seed: int = 0,
    delta: float = 0.05,
) -> CoexistenceReport:
    """Min over boundary faces of the max invasion rate of the absent species.

    Faces whose residents do not persist carry no ergodic measure with full
    support on the face and are reported as unreachable.  A single species
    is judged by the occupation measure of a direct simulation instead.
    """
    m = params.m
    if m > 4:
        raise ValueError("face enumeration is limited to m <= 4")
    table, unreachable, scores = [], [], []
    for size in range(m):
        for face in itertools.combinations(range(m), size):
            rates = []
            try:
                for k in range(m):
                    if k in face:
                        continue
                    res = invasion_rate(params, k, cfg, domain, replicas, burn_in, T, seed, face, delta)
                    table.append(res)
                    rates.append(res.rate)
            except BoundaryError:
                unreachable.append(face)
                continue
            scores.append(max(rates))
    score = float(min(scores)) if scores else float("nan")
    coexist = bool(scores) and score > 0
    if m == 1:
        model = build_lv(params, domain)
        x0 = np.full((1, model.domain.n), 0.5)
        occ = OccupationMeasure((), burn_in)

        def obs(t, x, dt):
            occ.add(model.domain.integrate(x)[0], x.max(), dt, t)

        simulate(model, cfg, x0, T, observers=[obs], seed=seed)
        coexist = persistence_verdict(occ, delta).persistent
    return CoexistenceReport(coexist, score, table, unreachable)


def lv_equilibrium_rate(growth, interaction, k):
    """Constant-coefficient invasion rate ``m_k - sum_j a_kj x_j`` at the face equilibrium.

    Residents are all species except ``k``; the equilibrium solves the
    residents' linear system.  Intended for small oracle checks.
    """
    growth = np.asarray(growth, float)
    A = np.asarray(interaction, float)
    res = [i for i in range(len(growth)) if i != k]
    xbar = np.zeros(len(growth))
    if res:
        xbar[res] = np.linalg.solve(A[np.ix_(res, res)], growth[res])
    return float(growth[k] - A[k] @ xbar)
