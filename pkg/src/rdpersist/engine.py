"""Exponential-Euler time stepping of ``dx = (Ax + F(x)) dt + G(x) dW``.

One step is ``x <- S(dt) [x + dt F_tamed(x) + eps * sigma(x) * dW]`` with the
drift tamed as ``F / (1 + tau dt |F|)``.  Nonlinearities are evaluated
pointwise on the grid; the transforms are only used for ``S(dt)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .domain import CLIP_TOL, EllipticOp, PositivityError, SpectralDomain, clip_negative
from .noise import NoiseSampler, NoiseSpec, NoiseStream, bridge_refine

log = logging.getLogger(__name__)


class ModelError(ValueError):
    """A model violates the structural assumptions (exit code 2 in the CLI)."""


class BlowUpError(ArithmeticError):
    """Non-finite values appeared during stepping (exit code 3 in the CLI)."""


def _zeros_like(x):
    return np.zeros_like(x)


@dataclass
class ModelSpec:
    """Pointwise model data on a fixed domain.

    ``f1``, ``f2`` and ``sigma`` map a state of shape ``(..., m, n)`` to an
    array of the same shape; the drift is ``x * f1(x) + f2(x)``.  ``tracked``
    lists the components whose persistence is studied (the ``u`` block).
    ``sigma_slope`` optionally returns ``d sigma_i / d x_i`` at ``x_i = 0`` for
    the tracked components, shape ``(..., len(tracked), n)``.
    """

    name: str
    domain: SpectralDomain
    op: EllipticOp
    f1: Callable
    sigma: Callable
    noise: NoiseSpec
    f2: Callable = _zeros_like
    tracked: tuple = (0,)
    sigma_slope: Callable | None = None
    taming: float = 0.0
    poly_degree: int = 2
    untamed: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tracked = tuple(int(i) for i in self.tracked)
        if self.op.m != self.m:
            raise ModelError(f"operator has {self.op.m} components, noise has {self.m}")
        if not self.tracked or any(not 0 <= i < self.m for i in self.tracked):
            raise ModelError(f"tracked components {self.tracked} out of range")
        try:
            self.op.validate(self.domain)
        except ValueError as exc:
            raise ModelError(str(exc)) from exc

    @property
    def m(self):
        return self.noise.m

    @property
    def others(self):
        return tuple(i for i in range(self.m) if i not in self.tracked)

    def drift(self, x):
        return x * self.f1(x) + self.f2(x)

    def diffusion(self, x):
        """``eps_i sigma_i(x)``; multiplied pointwise by ``dW_i`` in a step."""
        return np.asarray(self.noise.strengths)[:, None] * self.sigma(x)

    def with_noise_strengths(self, strengths):
        return replace(self, noise=self.noise.replace_strengths(strengths))


def validate_model(model: ModelSpec, samples=8, seed=12345):
    """Spot-check the sign and vanishing conditions on random nonnegative states.

    Raises :class:`ModelError` naming the violated condition.
    """
    rng = np.random.default_rng(seed)
    m, n = model.m, model.domain.n
    for scale in (0.1, 1.0, 10.0):
        x = scale * rng.random((samples, m, n))
        f2 = model.f2(x)
        if np.any(f2 < -1e-12):
            raise ModelError(f"{model.name}: f2 must be nonnegative on nonnegative states")
        xu = x.copy()
        xu[:, list(model.tracked), :] = 0.0
        if np.any(np.abs(model.f2(xu)[:, list(model.tracked), :]) > 1e-12):
            raise ModelError(f"{model.name}: tracked block of f2 must vanish when u = 0")
        for i in range(m):
            xi = x.copy()
            xi[:, i, :] = 0.0
            if np.any(np.abs(model.sigma(xi)[:, i, :]) > 1e-12):
                raise ModelError(f"{model.name}: sigma_{i} must vanish when x_{i} = 0")
        if not np.all(np.isfinite(model.drift(x))):
            raise ModelError(f"{model.name}: drift is not finite")
    # polynomial growth with the declared degree
    x = rng.random((samples, m, n)) + 0.5
    ratios = []
    for s in (1.0, 10.0, 100.0):
        f = np.abs(model.drift(s * x)).max()
        ratios.append(f / (1 + s**model.poly_degree))
    if ratios[-1] > 10 * max(ratios[0], 1e-12) + 1e-9:
        raise ModelError(f"{model.name}: drift grows faster than degree {model.poly_degree}")


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    scheme: str = "exponential-euler"
    taming: float | None = None
    positivity: str = "clip"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in ("exponential-euler", "semi-implicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.positivity not in ("clip", "reject"):
            raise ValueError(f"unknown positivity mode {self.positivity!r}")


class Stepper:
    """Precomputed one-step map for a ``(model, config)`` pair."""

    def __init__(self, model: ModelSpec, cfg: StepperConfig):
        self.model = model
        self.cfg = cfg
        dom = model.domain
        self.dt = cfg.dt
        self.tau = model.taming if cfg.taming is None else cfg.taming
        sym = model.op.symbol(dom)
        if cfg.scheme == "exponential-euler":
            self.factor = np.exp(sym * cfg.dt)
        else:
            self.factor = 1.0 / (1.0 - cfg.dt * sym)
        self.sampler = NoiseSampler(model.noise, dom)
        self.noisy = any(s > 0 for s in model.noise.strengths) and len(self.sampler.active) > 0
        self.tame = np.ones(model.m, dtype=bool)
        self.tame[list(model.untamed)] = False
        self.max_clip = 0.0

    def brownian(self, stream: NoiseStream, k: int, batch_shape=()):
        """Standard Brownian increments of the active modes for step ``k``."""
        if not self.noisy:
            return None
        return self.sampler.draw(stream, k, batch_shape) * np.sqrt(self.dt)

    def noise_field(self, dB):
        """``dW_i(x)`` on the grid from active-mode Brownian increments."""
        return self.sampler.field(self.sampler.active_coefficients(dB, 1.0))

    def pre_semigroup(self, x, dB=None):
        """``x + dt F_tamed(x) + G(x) dW`` before the semigroup is applied."""
        F = self.model.drift(x)
        if self.tau > 0:
            tamed = F / (1.0 + self.tau * self.dt * np.abs(F))
            F = np.where(self.tame[:, None], tamed, F)
        y = x + self.dt * F
        if dB is not None and self.noisy:
            y = y + self.model.diffusion(x) * self.noise_field(dB)
        return y

    def __call__(self, x, dB=None):
        dom = self.model.domain
        y = self.pre_semigroup(x, dB)
        out = dom.from_modes(dom.to_modes(y) * self.factor)
        if not np.all(np.isfinite(out)):
            raise BlowUpError(f"{self.model.name}: non-finite values after a step")
        mode = "raise" if self.cfg.positivity == "reject" else "clip"
        try:
            out, worst = clip_negative(out, CLIP_TOL, mode)
        except PositivityError as exc:
            raise PositivityError(f"{self.model.name}: {exc}") from exc
        self.max_clip = max(self.max_clip, worst)
        return out


def step(model: ModelSpec, cfg: StepperConfig, x, stream: NoiseStream, k=0):
    """Advance ``x`` by one step using the ``k``-th draw of ``stream``."""
    x = model.domain.check(x)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("step needs a finite nonnegative state")
    stepper = Stepper(model, cfg)
    return stepper(x, stepper.brownian(stream, k, x.shape[:-2]))


@dataclass
class TrajectoryStats:
    steps: int
    t: float
    state: np.ndarray
    max_clip: float
    observers: list


def simulate(
    model: ModelSpec,
    cfg: StepperConfig,
    x0,
    T: float,
    observers: Sequence = (),
    seed: int = 0,
    stream: int = 0,
    first_step: int = 0,
) -> TrajectoryStats:
    """Run ``round(T / dt)`` steps; each observer is called as ``obs(t, x, dt)``.

    ``x0`` may carry leading batch axes, which are simulated as independent
    trajectories drawing from one noise stream.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    x = model.domain.check(x0).copy()
    if x.ndim < 2 or x.shape[-2] != model.m:
        raise ValueError(f"state must have shape (..., {model.m}, {model.domain.n})")
    stepper = Stepper(model, cfg)
    rng = NoiseStream(seed, stream)
    nsteps = int(round(T / cfg.dt))
    batch = x.shape[:-2]
    for k in range(nsteps):
        x = stepper(x, stepper.brownian(rng, first_step + k, batch))
        t = (k + 1) * cfg.dt
        for obs in observers:
            obs(t, x, cfg.dt)
    if stepper.max_clip > 1e-8:
        log.info("%s: largest relative positivity clip %.3e", model.name, stepper.max_clip)
    return TrajectoryStats(nsteps, nsteps * cfg.dt, x, stepper.max_clip, list(observers))


def run_with_increments(model, cfg, x0, increments):
    """Drive the scheme with given active-mode Brownian increments (axis 0 = step)."""
    stepper = Stepper(model, cfg)
    x = model.domain.check(x0).copy()
    for dB in increments:
        x = stepper(x, dB if stepper.noisy else None)
    return x


def convergence_probe(model: ModelSpec, x0, T, dts, seed=0, cfg: StepperConfig | None = None, paths=1):
    """Strong errors at ``T`` against the finest step size on shared noise paths.

    ``dts`` must be decreasing with each entry half the previous one; the finer
    paths are built from the coarsest by Brownian-bridge refinement.  Returns
    one row per step size with the RMS weighted-``L2`` error and the observed
    order against the next finer step.
    """
    dts = [float(d) for d in dts]
    for a, b in zip(dts, dts[1:]):
        if not np.isclose(a, 2 * b, rtol=1e-12):
            raise ValueError("step sizes must halve successively")
    base = cfg or StepperConfig(dt=dts[0])
    dom = model.domain
    x0 = np.broadcast_to(dom.check(x0), (paths,) + np.shape(x0)[-2:]).copy()
    sampler = NoiseSampler(model.noise, dom)
    ch = model.m if model.noise.independent else 1
    stream = NoiseStream(seed, 0)
    n0 = int(round(T / dts[0]))
    incs = stream.normals(0, (n0, paths, ch, len(sampler.active))) * np.sqrt(dts[0])
    finals = []
    for level, dt in enumerate(dts):
        if level:
            incs = bridge_refine(incs, dts[level - 1], stream, level)
        finals.append(run_with_increments(model, replace(base, dt=dt), x0, incs))
    ref = finals[-1]
    rows = []
    for dt, xf in zip(dts[:-1], finals[:-1]):
        diff = xf - ref
        err = float(np.sqrt(np.mean(dom.inner(diff, diff).sum(axis=-1))))
        rows.append({"dt": dt, "error": err})
    for a, b in zip(rows, rows[1:]):
        if a["error"] > 0 and b["error"] > 0:
            a["order"] = float(np.log(a["error"] / b["error"]) / np.log(a["dt"] / b["dt"]))
        else:
            a["order"] = float("nan")
    if rows:
        rows[-1]["order"] = float("nan")
    return rows


def observed_order(rows):
    """Least-squares order over the whole error table."""
    dt = np.array([r["dt"] for r in rows])
    err = np.array([r["error"] for r in rows])
    keep = err > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(dt[keep]), np.log(err[keep]), 1)[0])
