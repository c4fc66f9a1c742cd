"""Q-Wiener increments in the eigenbasis and the admissibility check.

Species channel ``i`` is driven by ``W_i = sum_n a_n e_n w_n`` with
independent scalar Brownian motions ``w_n``.  Supported coefficient rules:

``white``     a_n = 1
``sobolev``   a_n = (c - d lambda_n)^(-alpha/2)
``finite``    a_n given for the leading modes, 0 afterwards
``scalar``    one Brownian motion along ``1/w`` (the constant 1 when w = 1)

Randomness comes from a counter-based Philox stream keyed by
``(master seed, stream id)`` with the step index in the counter, so any
step of any trajectory can be regenerated independently of the others.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import SpectralDomain

RULES = ("white", "sobolev", "finite", "scalar", "none")

#: log-log slope of the partial sums above which a series counts as divergent
DIVERGENCE_SLOPE = 0.05
P_GRID = (2.0, 2.5, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0)


class InadmissibleNoise(ValueError):
    pass


@dataclass(frozen=True)
class ChannelRule:
    rule: str = "white"
    alpha: float = 1.0
    shift: float = 1.0
    diffusion: float = 1.0
    coefficients: tuple = ()

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown noise rule {self.rule!r}; expected one of {RULES}")

    def coefficients_on(self, domain: SpectralDomain) -> np.ndarray:
        n = domain.n
        if self.rule == "white":
            return np.ones(n)
        if self.rule == "none":
            return np.zeros(n)
        if self.rule == "sobolev":
            lam = domain.eigenvalues / (domain.weight[0] if domain.uniform_weight else 1.0)
            base = self.shift - self.diffusion * lam
            if np.any(base <= 0):
                raise InadmissibleNoise("sobolev rule needs shift - diffusion*lambda > 0")
            return base ** (-self.alpha / 2)
        if self.rule == "finite":
            a = np.zeros(n)
            vals = np.asarray(self.coefficients, dtype=float)[:n]
            a[: len(vals)] = vals
            return a
        # scalar: a_0 e_0 = 1/w, i.e. W(t, x) = B_t / w(x)
        a = np.zeros(n)
        a[0] = np.sqrt(np.sum(domain.cell_volume / domain.weight))
        return a


@dataclass(frozen=True)
class NoiseSpec:
    """Per-species rules and strengths; species share one draw unless independent."""

    channels: tuple
    strengths: tuple
    independent: bool = True

    @classmethod
    def create(cls, rules, strengths=1.0, independent=True):
        if isinstance(rules, (str, ChannelRule)):
            rules = [rules]
        rules = tuple(r if isinstance(r, ChannelRule) else ChannelRule(r) for r in rules)
        strengths = tuple(float(s) for s in np.broadcast_to(strengths, (len(rules),)))
        if any(s < 0 for s in strengths):
            raise ValueError("noise strengths must be nonnegative")
        return cls(rules, strengths, bool(independent))

    @property
    def m(self):
        return len(self.channels)

    def coefficient_table(self, domain):
        """``a_n`` per channel, shape ``(m, n)``, without the strengths."""
        return np.array([c.coefficients_on(domain) for c in self.channels])

    def replace_strengths(self, strengths):
        return NoiseSpec.create(self.channels, strengths, self.independent)


@dataclass(frozen=True)
class AdmissibilityReport:
    valid: bool
    best_p: float | None
    slopes: dict


def _partial_sum_slope(terms):
    """Slope of log partial sums against log mode count over the upper half."""
    partial = np.cumsum(terms)
    counts = np.arange(1, len(terms) + 1)
    half = len(terms) // 2
    sel = slice(max(half, 1) - 1, None)
    ps, cs = partial[sel], counts[sel]
    if ps[-1] <= 0:
        return 0.0
    if np.any(ps <= 0):
        keep = ps > 0
        ps, cs = ps[keep], cs[keep]
    if len(ps) < 2:
        return 0.0
    return float(np.polyfit(np.log(cs), np.log(ps), 1)[0])


def check_admissibility(spec: NoiseSpec, domain: SpectralDomain) -> AdmissibilityReport:
    """Probe ``sum_n a_n^p |e_n|_inf^2 < inf`` on the truncated basis.

    Returns the smallest tested ``p >= 2`` whose partial sums look Cauchy.  In
    one dimension a bounded sequence ``a_n`` is admissible with ``p = inf``.
    """
    sup_e2 = np.max(np.abs(domain.basis), axis=0) ** 2
    table = np.abs(spec.coefficient_table(domain))
    slopes = {}
    for p in P_GRID:
        terms = (table**p * sup_e2).sum(axis=0)
        slope = _partial_sum_slope(terms)
        slopes[p] = slope
        if slope <= DIVERGENCE_SLOPE:
            return AdmissibilityReport(True, p, slopes)
    if domain.dim == 1:
        # p = inf: the running maximum of a_n |e_n|_inf must stay bounded
        running = np.maximum.accumulate(table.max(axis=0) * np.sqrt(sup_e2))
        half = len(running) // 2
        cs = np.arange(1, len(running) + 1)[half:]
        rs = running[half:]
        growth = float(np.polyfit(np.log(cs), np.log(rs), 1)[0]) if rs.min() > 0 else 0.0
        slopes[np.inf] = growth
        if growth <= DIVERGENCE_SLOPE:
            return AdmissibilityReport(True, np.inf, slopes)
    return AdmissibilityReport(False, None, slopes)


class NoiseStream:
    """Counter-based normal draws: ``normals(step, shape)`` is a pure function."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream) & (2**64 - 1)

    def generator(self, step: int) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        counter = np.array([0, int(step), 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normals(self, step, shape):
        return self.generator(step).standard_normal(shape)

    def child(self, index: int) -> NoiseStream:
        """Independent stream for sub-task ``index`` (trajectory block, replica...)."""
        mixed = np.random.SeedSequence([self.seed, self.stream, int(index)]).generate_state(2, np.uint64)
        return NoiseStream(int(mixed[0]), int(mixed[1]))


@dataclass
class NoiseIncrement:
    """Mode coefficients of ``dW`` over one step, shape ``(..., m, n)``."""

    coefficients: np.ndarray
    dt: float


class NoiseSampler:
    """Pre-validated sampler for one ``(spec, domain)`` pair.

    Only modes with nonzero ``a_n`` in some channel are drawn and transformed.
    """

    def __init__(self, spec: NoiseSpec, domain: SpectralDomain, check=True):
        self.spec = spec
        self.domain = domain
        if check and any(s > 0 for s in spec.strengths):
            report = check_admissibility(spec, domain)
            if not report.valid:
                raise InadmissibleNoise(
                    f"noise coefficients fail the admissibility test on this domain (slopes {report.slopes})"
                )
            self.report = report
        else:
            self.report = None
        table = spec.coefficient_table(domain)
        self.active = np.flatnonzero(np.any(table != 0, axis=0))
        self.table = table[:, self.active]
        self.basis = domain.basis[:, self.active]
        self.strengths = np.array(spec.strengths)

    @property
    def m(self):
        return self.spec.m

    def draw(self, stream: NoiseStream, step: int, batch_shape=()):
        """Standard normals for the active modes, shape ``batch + (m or 1, k)``."""
        ch = self.m if self.spec.independent else 1
        return stream.normals(step, tuple(batch_shape) + (ch, len(self.active)))

    def active_coefficients(self, xi, dt):
        """Scale standard normals to increments of the active modes."""
        xi = np.asarray(xi)
        if xi.shape[-2] == 1 and self.m > 1:
            xi = np.broadcast_to(xi, xi.shape[:-2] + (self.m, xi.shape[-1]))
        return xi * self.table * np.sqrt(dt)

    def field(self, active_coeffs):
        """Grid values of the increments, shape ``(..., m, n)``."""
        return active_coeffs @ self.basis.T

    def sample_increment(self, stream, step, dt, batch_shape=()):
        if dt <= 0:
            raise ValueError("dt must be positive")
        act = self.active_coefficients(self.draw(stream, step, batch_shape), dt)
        full = np.zeros(act.shape[:-1] + (self.domain.n,))
        full[..., self.active] = act
        return NoiseIncrement(full, dt)


def sample_increment(spec, domain, dt, stream: NoiseStream, step=0, batch_shape=()):
    """One ``dW`` in mode coefficients; raises :class:`InadmissibleNoise`."""
    return NoiseSampler(spec, domain).sample_increment(stream, step, dt, batch_shape)


def bridge_refine(increments, dt, stream: NoiseStream, level=0):
    """Split each Brownian increment over ``dt`` into two over ``dt / 2``.

    Conditional on the sum, the first half is ``N(total / 2, dt / 4)``; the
    returned array interleaves halves along axis 0.
    """
    increments = np.asarray(increments, dtype=float)
    xi = stream.normals(10**9 + level, increments.shape)
    first = 0.5 * increments + 0.5 * np.sqrt(dt) * xi
    second = increments - first
    out = np.empty((2 * increments.shape[0],) + increments.shape[1:])
    out[0::2] = first
    out[1::2] = second
    return out
