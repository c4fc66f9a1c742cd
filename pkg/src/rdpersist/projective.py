"""Polar decomposition, boundary linearization and the average Lyapunov exponent.

The linearized system keeps the untracked block ``z`` on the extinction set
(``u = 0`` inside its coefficients) and replaces the tracked drift and noise
by their slopes at ``u = 0``.  ``Lambda`` is estimated as the ergodic time
average of

    H(v, z) = -<v, A1> - <f_hat(z) v, 1> + 1/2 sum_n a_n^2 <sigma_hat(z) v, e_n>^2

along the renormalized linear dynamics, maximized over an ensemble of
independent initial profiles.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .domain import SpectralDomain
from .engine import ModelSpec, Stepper, StepperConfig
from .noise import NoiseSampler, NoiseStream

NORMALIZATION_TOL = 1e-8


@dataclass
class ProjectiveState:
    r: np.ndarray
    v: np.ndarray
    z: np.ndarray

    def reconstruct(self, tracked, m):
        """Full state ``(r v, z)`` with components in model order."""
        v, z = np.asarray(self.v), np.asarray(self.z)
        r = np.asarray(self.r)[..., None, None]
        x = np.empty(v.shape[:-2] + (m, v.shape[-1]))
        others = [i for i in range(m) if i not in tracked]
        x[..., list(tracked), :] = r * v
        x[..., others, :] = z
        return x


def polar(domain: SpectralDomain, x, tracked=(0,)) -> ProjectiveState:
    """``(|u|_L1, u / |u|_L1, z)`` for the tracked block ``u`` of ``x``."""
    x = domain.check(x)
    tracked = list(tracked)
    u = x[..., tracked, :]
    others = [i for i in range(x.shape[-2]) if i not in tracked]
    r = domain.integrate(np.abs(u)).sum(axis=-1)
    if np.any(r <= 0):
        raise ValueError("tracked block is identically zero")
    return ProjectiveState(r, u / r[..., None, None], x[..., others, :])


def _zero_tracked(x, tracked):
    x0 = np.array(x, dtype=float, copy=True)
    x0[..., list(tracked), :] = 0.0
    return x0


@dataclass
class LinearizedModel:
    base: ModelSpec
    model: ModelSpec

    @property
    def tracked(self):
        return self.model.tracked

    def f_hat(self, x):
        """Tracked drift coefficient at ``u = 0``, shape ``(..., d, n)``."""
        return self.base.f1(_zero_tracked(x, self.tracked))[..., list(self.tracked), :]

    def sigma_hat(self, x):
        return sigma_slope(self.base, _zero_tracked(x, self.tracked))


def sigma_slope(model: ModelSpec, x0, h=1e-7):
    """``d sigma_i / d x_i`` at ``x_i = 0`` for the tracked components."""
    if model.sigma_slope is not None:
        return model.sigma_slope(x0)
    out = []
    for i in model.tracked:
        xh = np.array(x0, copy=True)
        xh[..., i, :] = h
        out.append(model.sigma(xh)[..., i, :] / h)
    return np.stack(out, axis=-2)


def linearize(model: ModelSpec) -> LinearizedModel:
    """Boundary linearization in the tracked block."""
    tracked = list(model.tracked)
    def f1(x):
        return model.f1(_zero_tracked(x, tracked))

    def f2(x):
        out = model.f2(_zero_tracked(x, tracked))
        out[..., tracked, :] = 0.0
        return out

    def sigma(x):
        x0 = _zero_tracked(x, tracked)
        out = np.array(model.sigma(x0), dtype=float, copy=True)
        out[..., tracked, :] = sigma_slope(model, x0) * x[..., tracked, :]
        return out

    def slope(x):
        return sigma_slope(model, _zero_tracked(x, tracked))

    lin = replace(
        model,
        name=f"{model.name}-linearized",
        f1=f1,
        f2=f2,
        sigma=sigma,
        sigma_slope=slope,
        untamed=tuple(sorted(set(model.untamed) | set(tracked))),
    )
    return LinearizedModel(model, lin)


class HEvaluator:
    """Vectorized ``H(v, z)`` for one linearized model."""

    def __init__(self, lin: LinearizedModel):
        self.lin = lin
        m = lin.model
        dom = m.domain
        self.dom = dom
        self.tracked = list(m.tracked)
        self.e_tilde = m.op.e_tilde(dom)[self.tracked]
        sampler = NoiseSampler(m.noise, dom, check=False)
        self.basis = sampler.basis
        self.coeff = sampler.table * np.asarray(m.noise.strengths)[:, None]
        self.coeff = self.coeff[self.tracked]
        self.independent = m.noise.independent

    def __call__(self, x):
        dom = self.dom
        v = x[..., self.tracked, :]
        mass = dom.integrate(v).sum(axis=-1)
        if np.any(np.abs(mass - 1) > NORMALIZATION_TOL):
            raise ValueError("v must have unit L1 norm")
        transport = dom.inner(v, self.e_tilde).sum(axis=-1)
        growth = dom.integrate(self.lin.f_hat(x) * v).sum(axis=-1)
        ito = 0.0
        if self.basis.shape[1]:
            proj = ((self.lin.sigma_hat(x) * v) * dom.quadrature) @ self.basis
            c = proj * self.coeff
            if self.independent:
                ito = 0.5 * np.sum(c**2, axis=(-2, -1))
            else:
                ito = 0.5 * np.sum(c.sum(axis=-2) ** 2, axis=-1)
        return -transport - growth + ito


def evaluate_H(lin: LinearizedModel, v, z=None):
    """``H`` at ``r = 0`` for profile ``v`` (tracked block) and auxiliary ``z``."""
    m = lin.model
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[None, :]
    z = np.zeros(v.shape[:-2] + (len(m.others), m.domain.n)) if z is None else np.asarray(z, float)
    if z.ndim == 1:
        z = z[None, :]
    x = ProjectiveState(np.ones(v.shape[:-2]), v, z).reconstruct(m.tracked, m.m)
    return HEvaluator(lin)(x)


def diverse_profiles(domain: SpectralDomain, count, seed=0):
    """Positive unit-mass profiles: constant, bumps, eigenfunction tilts, random."""
    rng = np.random.default_rng(seed)
    pts = domain.points
    lo = pts.min(axis=0)
    span = np.array(domain.extents)
    out = [np.ones(domain.n)]
    k = 1
    while len(out) < count:
        kind = len(out) % 3
        if kind == 1:
            c = lo + span * rng.random(domain.dim)
            d2 = np.sum(((pts - c) / span) ** 2, axis=1)
            out.append(np.exp(-d2 / 0.01) + 1e-3)
        elif kind == 2:
            e = domain.basis[:, min(k, domain.n - 1)]
            out.append(1.0 + 0.9 * e / np.max(np.abs(e)))
            k += 1
        else:
            out.append(0.05 + rng.random(domain.n))
    prof = np.array(out[:count])
    return prof / domain.integrate(prof)[:, None]


@dataclass
class LambdaEstimate:
    value: float
    stderr: float
    path_means: np.ndarray
    path_stderr: np.ndarray
    log_growth: float
    log_growth_stderr: float
    path_log_growth: np.ndarray
    path_log_growth_stderr: np.ndarray
    agree: bool
    multimodal: bool
    nonstationary: bool
    block_means: np.ndarray
    dt: float

    def summary(self):
        return {
            "Lambda": self.value,
            "Lambda_stderr": self.stderr,
            "log_growth_Lambda": self.log_growth,
            "log_growth_stderr": self.log_growth_stderr,
            "H_mean_over_paths": float(np.mean(self.path_means)),
            "paths": len(self.path_means),
            "estimators_agree": int(self.agree),
            "multimodal": int(self.multimodal),
            "nonstationary": int(self.nonstationary),
        }


def _block_stats(samples, blocks):
    """Means and standard errors from ``blocks`` batch means along axis 0."""
    n = samples.shape[0] // blocks * blocks
    if n == 0:
        mean = samples.mean(axis=0)
        return mean, np.zeros_like(mean), mean[None]
    b = samples[:n].reshape((blocks, n // blocks) + samples.shape[1:]).mean(axis=1)
    return b.mean(axis=0), b.std(axis=0, ddof=1) / np.sqrt(blocks), b


def estimate_lambda(
    lin: LinearizedModel,
    cfg: StepperConfig,
    burn_in: float,
    T: float,
    paths: int = 8,
    seed: int = 0,
    init=None,
    z0=None,
    blocks: int = 20,
    observer=None,
    stream: int = 1,
) -> LambdaEstimate:
    """Time average of ``H`` after ``burn_in`` along the renormalized linear flow.

    ``init`` gives initial profiles ``(paths, d, n)`` for the tracked block
    (default :func:`diverse_profiles`); ``z0`` the auxiliary block, either
    ``(m - d, n)`` or per path.  The value is the maximum of the per-path
    averages; the log-growth estimator ``-(1/T) sum ln(|u_k+1|/|u_k|)`` is
    returned alongside for cross-validation.
    """
    if not 0 <= burn_in < T:
        raise ValueError("need 0 <= burn_in < T")
    model = lin.model
    dom = model.domain
    d = len(model.tracked)
    if init is None:
        prof = diverse_profiles(dom, paths, seed)
        init = np.repeat(prof[:, None, :], d, axis=1) / d
    init = np.asarray(init, dtype=float)
    paths = init.shape[0]
    if z0 is None:
        z0 = np.ones((len(model.others), dom.n))
    z0 = np.broadcast_to(np.asarray(z0, float), (paths, len(model.others), dom.n))
    x = ProjectiveState(np.ones(paths), init, z0).reconstruct(model.tracked, model.m)
    tracked = list(model.tracked)
    mass = dom.integrate(x[:, tracked, :]).sum(axis=-1)
    x[:, tracked, :] /= mass[:, None, None]

    stepper = Stepper(model, cfg)
    H = HEvaluator(lin)
    rng = NoiseStream(seed, stream)
    nsteps = int(round(T / cfg.dt))
    nburn = int(round(burn_in / cfg.dt))
    keep = nsteps - nburn
    Hs = np.empty((keep, paths))
    Gs = np.empty((keep, paths))
    for k in range(nsteps):
        h = H(x) if k >= nburn else None
        x = stepper(x, stepper.brownian(rng, k, (paths,)))
        mass = dom.integrate(x[:, tracked, :]).sum(axis=-1)
        if np.any(mass <= 0):
            raise ArithmeticError("tracked block collapsed to zero in the linear flow")
        x[:, tracked, :] /= mass[:, None, None]
        if k >= nburn:
            Hs[k - nburn] = h
            Gs[k - nburn] = -np.log(mass) / cfg.dt
        if observer is not None:
            observer((k + 1) * cfg.dt, x, cfg.dt)

    blocks = max(2, min(blocks, keep))
    hmean, hse, _ = _block_stats(Hs, blocks)
    gmean, gse, _ = _block_stats(Gs, blocks)
    _, _, bm = _block_stats(Hs.mean(axis=1), min(8, keep))
    return _finalize(hmean, hse, gmean, gse, bm, cfg.dt)


def _finalize(hmean, hse, gmean, gse, bm, dt):
    paths = len(hmean)
    best = int(np.argmax(hmean))
    value = float(hmean[best])

    ens_h, ens_g = float(hmean.mean()), float(gmean.mean())
    se_h = float(np.sqrt(np.sum(hse**2))) / paths
    se_g = float(np.sqrt(np.sum(gse**2))) / paths
    # exponential Euler biases the log-growth rate by O(dt)
    allowance = 5 * dt * (1 + abs(ens_h)) ** 2
    agree = abs(ens_h - ens_g) <= 3 * np.hypot(se_h, se_g) + allowance

    floor = 1e-6 * max(1.0, abs(value))
    lo = int(np.argmin(hmean))
    spread = float(hmean[best] - hmean[lo])
    joint = float(np.hypot(hse[best], hse[lo]))
    multimodal = paths > 1 and spread > 5 * joint + floor

    diffs = np.diff(bm)
    mono = len(diffs) > 1 and (np.all(diffs > 0) or np.all(diffs < 0))
    nonstationary = bool(mono and abs(bm[-1] - bm[0]) > 3 * se_h * np.sqrt(paths) + floor)

    return LambdaEstimate(
        value=value,
        stderr=float(hse[best]),
        path_means=hmean,
        path_stderr=hse,
        log_growth=ens_g,
        log_growth_stderr=se_g,
        path_log_growth=gmean,
        path_log_growth_stderr=gse,
        agree=bool(agree),
        multimodal=bool(multimodal),
        nonstationary=nonstationary,
        block_means=bm,
        dt=dt,
    )


def merge_estimates(parts) -> LambdaEstimate:
    """Pool estimates of disjoint path ensembles run with the same settings."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")

    def cat(name):
        return np.concatenate([getattr(p, name) for p in parts])

    weights = np.array([len(p.path_means) for p in parts], float)
    bm = sum(w * p.block_means for w, p in zip(weights, parts)) / weights.sum()
    return _finalize(
        cat("path_means"), cat("path_stderr"), cat("path_log_growth"), cat("path_log_growth_stderr"), bm, parts[0].dt
    )


@dataclass
class ConsistencyReport:
    r_mean: float
    r_max: float
    v_mean: float
    v_max: float
    steps: int


def project_step_consistency(model: ModelSpec, cfg: StepperConfig, x0, T, seed=0, increments=None):
    """Compare simulated ``(r, v)`` increments with the projective equations.

    For every step the predicted increments use the same noise as the scheme:

        dr = [<u, A1> + <F_u(x), 1>] dt + <G_u(x) dW, 1>
        dv = A_u v dt + v[-<v, A1> - <F~, 1> + |G~* 1|^2] dt + F~ dt
             - G~ G~* 1 dt + G~ dW - <G~* 1, dW> v

    with ``F~ = F_u(x) / r`` and ``G~ = G_u(x) / r``.  Residuals are divided by
    ``r dt`` (respectively ``dt``); their mean is O(dt) for a consistent
    scheme.  ``increments`` (axis 0 = step) overrides the sampled noise.
    """
    dom = model.domain
    tracked = list(model.tracked)
    stepper = Stepper(model, cfg)
    sampler = stepper.sampler
    coeff = sampler.table
    e_t = model.op.e_tilde(dom)
    x = dom.check(x0).copy()
    rng = NoiseStream(seed, 0)
    nsteps = int(round(T / cfg.dt)) if increments is None else len(increments)
    r_res, v_res = [], []
    dt = cfg.dt
    for k in range(nsteps):
        dB = stepper.brownian(rng, k, x.shape[:-2]) if increments is None else increments[k]
        st = polar(dom, x, tracked)
        u = x[..., tracked, :]
        F = model.drift(x)[..., tracked, :]
        if stepper.tau > 0:
            F = F / (1 + stepper.tau * dt * np.abs(F))
        Gamp = model.diffusion(x)[..., tracked, :]
        if dB is not None and stepper.noisy:
            dW = stepper.noise_field(dB)[..., tracked, :]
            Gt = Gamp / st.r[..., None, None]
            proj = (Gt * dom.quadrature) @ sampler.basis
            gstar = proj * coeff[tracked]
            if not model.noise.independent:
                gstar = gstar.sum(axis=-2, keepdims=True)
            gnorm = np.sum(gstar**2, axis=(-2, -1))
            gg = Gt * ((gstar * coeff[tracked]) @ sampler.basis.T)
        else:
            dW = np.zeros_like(u)
            gg = np.zeros_like(u)
            gnorm = 0.0
        noise_r = dom.integrate(Gamp * dW).sum(axis=-1)
        drift_r = (dom.inner(u, e_t[tracked]) + dom.integrate(F)).sum(axis=-1)
        pred_dr = drift_r * dt + noise_r

        Ftil = F / st.r[..., None, None]
        Gdw = Gamp * dW / st.r[..., None, None]
        Av = model.op.apply(dom, x)[..., tracked, :] / st.r[..., None, None]
        bracket = -dom.inner(st.v, e_t[tracked]).sum(-1) - dom.integrate(Ftil).sum(-1) + gnorm
        pred_dv = (
            Av * dt
            + st.v * (bracket * dt)[..., None, None]
            + Ftil * dt
            - gg * dt
            + Gdw
            - st.v * dom.integrate(Gdw).sum(-1)[..., None, None]
        )

        x_new = stepper(x, dB)
        new = polar(dom, x_new, tracked)
        r_res.append(np.ravel((new.r - st.r - pred_dr) / (st.r * dt)))
        dv = new.v - st.v - pred_dv
        v_res.append(np.ravel(np.sqrt(dom.inner(dv, dv).sum(-1)) / dt))
        x = x_new
    r_res = np.concatenate(r_res)
    v_res = np.concatenate(v_res)
    return ConsistencyReport(
        r_mean=float(abs(r_res.mean())),
        r_max=float(np.abs(r_res).max()),
        v_mean=float(v_res.mean()),
        v_max=float(v_res.max()),
        steps=nsteps,
    )
