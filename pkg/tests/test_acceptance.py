"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Lines are collected in ``RESULTS`` and echoed in the terminal summary.
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import gbm_rates, lv_boundary_rate, sir_threshold
from rdpersist.delay import PathSegment, band_persistence, boundary_invasion, delay_logistic, run_sfde
from rdpersist.domain import EllipticOp, apply_semigroup, build_domain
from rdpersist.eigen import principal_eig
from rdpersist.engine import Stepper, StepperConfig, simulate
from rdpersist.lyapunov import OccupationMeasure, persistence_verdict
from rdpersist.models import (
    KppParams,
    LogisticParams,
    LvParams,
    SirParams,
    build_kpp,
    build_linear,
    build_logistic,
    build_lv,
    build_sir,
    coexistence_check,
    invasion_rate,
)
from rdpersist.noise import ChannelRule, NoiseSpec, NoiseStream, bridge_refine, sample_increment
from rdpersist.projective import estimate_lambda, linearize, project_step_consistency

pytestmark = pytest.mark.acceptance

RESULTS = {}


def record(n, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s / {budget:.0f}s]"
    print(RESULTS[n])
    return ok


def _torus(points=64):
    return build_domain("torus", 1, 2 * np.pi, points)


class TestCriterion1:
    """Explicit exponents of du = [u_xx - u] dt + 10 u dB from constant data."""

    def test_exponents(self):
        t0 = time.perf_counter()
        d = _torus()
        model = build_linear(d, shift=1.0, noise_strength=10.0, noise="scalar")
        a_rate, m2_rate = gbm_rates(-1.0, 10.0)

        # (a) 64 paths, T = 1, dt = 1e-4.  With scalar noise dW = dB exactly, so
        # the exponent is the t-coefficient of ln|u_t| - ln|u_0| - 10 B_t.
        dt, T, paths = 1e-4, 1.0, 64
        st = Stepper(model, StepperConfig(dt))
        rng = NoiseStream(2024, 0)
        x = np.ones((paths, 1, d.n))
        B = np.zeros(paths)
        for k in range(int(round(T / dt))):
            dB = st.brownian(rng, k, (paths,))
            x = st(x, dB)
            B += dB[:, 0, 0]
        logr = np.log(d.integrate(x)[:, 0] / (2 * np.pi))
        exponent = float(np.mean(logr - 10 * B) / T)
        naive = float(np.mean(logr) / T)
        ok_a = abs(exponent - a_rate) <= 2.0

        # (b) 1e5 paths, T = 0.1: rate of E|u_t|^2 as a product of one-step
        # ensemble moments of |u_{k+1}| / |u_k| (steps are independent).
        dt, T, chunk, chunks = 2.5e-4, 0.1, 10_000, 10
        st = Stepper(model, StepperConfig(dt))
        nsteps = int(round(T / dt))
        step_m2 = np.zeros(nsteps)
        final_m2 = 0.0
        for c in range(chunks):
            rng = NoiseStream(2024, 100 + c)
            x = np.ones((chunk, 1, d.n))
            r = d.integrate(x)[:, 0]
            r0 = r.copy()
            for k in range(nsteps):
                x = st(x, st.brownian(rng, k, (chunk,)))
                rn = d.integrate(x)[:, 0]
                step_m2[k] += np.sum((rn / r) ** 2)
                r = rn
            final_m2 += np.sum((r / r0) ** 2)
        npaths = chunk * chunks
        rate = float(np.sum(np.log(step_m2 / npaths)) / T)
        naive_rate = float(np.log(final_m2 / npaths) / T)
        ok_b = abs(rate - m2_rate) <= 5.0

        elapsed = time.perf_counter() - t0
        detail = (
            f"(a) exponent {exponent:.3f} vs {a_rate:.0f} +/- 2 (plain ln|u_T|/T {naive:.3f}); "
            f"(b) second-moment rate {rate:.2f} vs {m2_rate:.0f} +/- 5 (single-shot estimate {naive_rate:.2f})"
        )
        assert record(1, ok_a and ok_b, detail, elapsed, 120), detail


class TestCriterion2:
    """Principal eigenvalue of u_xx + u on the torus."""

    def test_kpp_eigen(self):
        t0 = time.perf_counter()
        model = build_kpp(KppParams(), _torus())
        lin = linearize(model)
        x = np.ones((1, 64))
        res = principal_eig(model.op, model.domain, lin.f_hat(x)[0])
        flat = float(np.ptp(res.field) / res.field.mean())
        elapsed = time.perf_counter() - t0
        ok = abs(res.value - 1.0) <= 1e-8 and flat < 1e-8
        detail = f"lambda {res.value:.12f}, eigenfunction relative spread {flat:.1e}"
        assert record(2, ok, detail, elapsed, 1), detail


class TestCriterion3:
    """Lambda = -lambda for the noise-free heterogeneous logistic model."""

    def test_identity(self):
        t0 = time.perf_counter()
        K = lambda x: 1 + 0.5 * np.sin(x)
        model = build_logistic(LogisticParams(K=K, r=1.0, E=0.2, eps=0.0), _torus())
        lin = linearize(model)
        lam = principal_eig(model.op, model.domain, lin.f_hat(np.ones((1, 64)))[0]).value
        est = estimate_lambda(lin, StepperConfig(0.01), 20.0, 200.0, paths=4)
        elapsed = time.perf_counter() - t0
        err = abs(est.value + lam)
        ok = err <= 1e-2 * max(1.0, lam)
        detail = f"Lambda {est.value:.6f}, lambda {lam:.6f}, |Lambda + lambda| {err:.2e}"
        assert record(3, ok, detail, elapsed, 30), detail


SIR_SETS = [
    SirParams(lam=1.0, eta=0.5, delta=0.1, sigma=0.1, beta=1.5, c1=0.5, c2=0.5),
    SirParams(lam=2.0, eta=1.0, delta=0.2, sigma=0.3, beta=2.0, c1=0.2, c2=1.0),
    SirParams(lam=0.5, eta=0.25, delta=0.05, sigma=0.05, beta=0.8, c1=1.0, c2=0.3, c3=0.1),
]


class TestCriterion4:
    """SIR threshold identity and its Ito shift."""

    def test_threshold(self):
        t0 = time.perf_counter()
        alpha2 = 0.4
        lines, ok = [], True
        for i, p in enumerate(SIR_SETS):
            tl = sir_threshold(p.lam, p.eta, p.delta, p.sigma, p.beta, p.c1)
            assert tl > 0
            z0 = p.lam / p.eta
            cfg = StepperConfig(0.01)
            base = estimate_lambda(linearize(build_sir(p)), cfg, 10.0, 50.0, paths=8, z0=z0, seed=i)
            noisy_p = SirParams(**{**vars(p), "alpha2": alpha2})
            noisy = estimate_lambda(linearize(build_sir(noisy_p)), cfg, 10.0, 50.0, paths=8, z0=z0, seed=i)
            rel = abs(base.value + tl) / tl
            shift = noisy.value - base.value
            se = np.hypot(noisy.stderr, base.stderr)
            ok_i = rel <= 0.02 and abs(shift - 0.5 * alpha2**2) <= 3 * se + 1e-9 and noisy.agree
            ok &= ok_i
            lines.append(f"set{i}: -tl {-tl:.4f} Lambda {base.value:.4f} (rel {rel:.1e}), shift {shift:.4f} vs {0.5 * alpha2**2:.4f}")
        elapsed = time.perf_counter() - t0
        detail = "; ".join(lines)
        assert record(4, ok, detail, elapsed, 300), detail


class TestCriterion5:
    """Band occupation of the stochastic KPP mass across 16 seeds."""

    def _run(self, model, seed, band=None):
        d = model.domain
        occ = OccupationMeasure((), 20.0, [band] if band else [])

        def obs(t, x, dt):
            m = d.integrate(x)[0]
            occ.add(m, x.max(), dt, t)

        simulate(model, StepperConfig(0.01), np.ones((1, d.n)), 220.0, [obs], seed=seed)
        return occ

    def test_persistence(self):
        t0 = time.perf_counter()
        model = build_kpp(KppParams(eps=0.1, noise="white"), _torus())
        pilot = persistence_verdict(self._run(model, seed=10_000), delta=0.01)
        band = (pilot.b, pilot.B)
        fractions = np.array([self._run(model, seed=s, band=band).band_fraction(0) for s in range(16)])
        elapsed = time.perf_counter() - t0
        ok = pilot.persistent and fractions.min() >= 0.95
        detail = f"pilot band [{band[0]:.3f}, {band[1]:.3f}], fraction min {fractions.min():.4f} mean {fractions.mean():.4f}"
        assert record(5, ok, detail, elapsed, 300), detail


class TestCriterion6:
    """Invasion-rate oracle and the coexistence flip for two LV species."""

    def test_invasion(self):
        t0 = time.perf_counter()
        cfg = StepperConfig(0.01)
        lines, ok, verdicts = [], True, []
        for m1, a11, m2, a21 in [(1, 1, 0.5, 0.3), (1, 1, 0.2, 0.3)]:
            p = LvParams([m1, m2], [[a11, 0.3], [a21, 1.0]])
            expected = m2 - a21 * m1 / a11
            assert expected == pytest.approx(lv_boundary_rate(p.growth, p.interaction, 1))
            res = invasion_rate(p, 1, cfg, replicas=8, burn_in=20.0, T=40.0)
            rel = abs(res.rate - expected) / abs(expected)
            ok &= rel <= 0.05
            rep = coexistence_check(p, cfg, replicas=8, burn_in=20.0, T=40.0)
            verdicts.append(rep.coexist)
            lines.append(f"({m1},{a11},{m2},{a21}): r2 {res.rate:.5f} vs {expected:.2f} (rel {rel:.1e}), coexist={rep.coexist}")
        ok &= verdicts == [True, False]
        elapsed = time.perf_counter() - t0
        detail = "; ".join(lines)
        assert record(6, ok, detail, elapsed, 180), detail


class TestCriterion7:
    """Projective step residuals decay linearly in dt."""

    DTS = (1e-3, 5e-4, 2.5e-4)

    def _ratios(self, values):
        return [values[i] / values[i + 1] for i in range(len(values) - 1)]

    def test_consistency(self):
        t0 = time.perf_counter()
        d = _torus()
        x0 = (1 + 0.5 * np.cos(d.points[:, 0]))[None]
        T = 0.05
        heat = build_linear(d, shift=1.0)
        heat_r, heat_v = [], []
        for dt in self.DTS:
            rep = project_step_consistency(heat, StepperConfig(dt), x0, T)
            heat_r.append(rep.r_mean)
            heat_v.append(rep.v_mean)

        a, s = 1.0, 0.5
        gbm = build_linear(d, shift=-a, noise_strength=s, noise="scalar")
        incs = NoiseStream(77, 0).normals(0, (int(round(T / self.DTS[0])), 1, 1)) * np.sqrt(self.DTS[0])
        gbm_r = []
        stream = NoiseStream(77, 0)
        for level, dt in enumerate(self.DTS):
            if level:
                incs = bridge_refine(incs, self.DTS[level - 1], stream, level)
            gbm_r.append(project_step_consistency(gbm, StepperConfig(dt), x0, T, increments=incs).r_mean)

        ratios = {"heat r": self._ratios(heat_r), "heat v": self._ratios(heat_v), "gbm r": self._ratios(gbm_r)}
        ok = all(abs(q - 2.0) <= 0.3 for qs in ratios.values() for q in qs)
        elapsed = time.perf_counter() - t0
        detail = ", ".join(f"{k} ratios {', '.join(f'{q:.3f}' for q in qs)}" for k, qs in ratios.items())
        assert record(7, ok, detail, elapsed, 60), detail


class TestCriterion8:
    """Always-on property checks in one pass."""

    def _positivity_and_faces(self):
        d = build_domain("neumann", 1, 1.0, 16)
        model = build_lv(LvParams([1.0, 0.5, 0.8], [[1.0, 0.3, 0.2], [0.3, 1.0, 0.1], [0.2, 0.1, 1.0]], eps=1.0), d)
        ok = True
        for seed in range(8):
            x0 = np.random.default_rng(seed).random((3, 16)) + 0.1
            x0[seed % 3] = 0.0

            def obs(t, x, dt, z=seed % 3):
                nonlocal ok
                ok &= bool(x.min() >= 0) and not x[z].any()

            simulate(model, StepperConfig(0.02), x0, 2.0, [obs], seed=seed)
        return ok

    def _normalization(self):
        d = build_domain("torus", 1, 2 * np.pi, 32)
        lin = linearize(build_kpp(KppParams(eps=1.0), d))
        worst = [0.0]

        def obs(t, x, dt):
            worst[0] = max(worst[0], float(np.abs(d.integrate(x[:, 0, :]) - 1).max()))

        estimate_lambda(lin, StepperConfig(0.01), 0.0, 2.0, paths=4, observer=obs)
        return worst[0] < 1e-12

    def _spectral(self):
        ok = True
        rng = np.random.default_rng(0)
        for args in [("torus", 1, 2 * np.pi, 64), ("neumann", 2, (1.0, 2.0), (16, 8))]:
            d = build_domain(*args)
            op = EllipticOp.create(0.7, shift=0.3)
            u = rng.normal(size=(1, d.n))
            ok &= abs(d.inner(u, u)[0] - np.sum(d.to_modes(u) ** 2)) < 1e-10 * d.inner(u, u)[0]
            a = apply_semigroup(op, d, apply_semigroup(op, d, u, 0.2, "none"), 0.3, "none")
            ok &= np.allclose(a, apply_semigroup(op, d, u, 0.5, "none"), atol=1e-12)
        return ok

    def _covariance(self):
        d = build_domain("neumann", 1, np.pi, 32)
        spec = NoiseSpec.create(ChannelRule("sobolev", alpha=1.0))
        N, dt = 4000, 0.01
        c = sample_increment(spec, d, dt, NoiseStream(8), batch_shape=(N,)).coefficients[:, 0, :]
        expected = spec.coefficient_table(d)[0] ** 2 * dt
        return bool(np.all(np.abs(c.var(axis=0) - expected) < 4 * expected * np.sqrt(2 / N)))

    def _reproducible(self, tmp_path):
        cfg = tmp_path / "lv.ini"
        cfg.write_text(
            "[domain]\nkind = neumann\npoints = 8\n[noise]\nrule = white\neps = 0.5\n"
            "[model]\nname = lv\nspecies = 2\nrates = 1, 0.5\ninteraction = 1, 0.3; 0.3, 1\n"
            "[stepper]\ndt = 0.01\n[estimator]\nT = 1\npaths = 2\n"
        )
        outs = []
        for run in ("a", "b"):
            res = subprocess.run(
                [sys.executable, "-m", "rdpersist", "simulate", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / run)],
                capture_output=True, text=True, check=True,
            )
            outdir = res.stdout.strip().splitlines()[-1]
            outs.append(open(f"{outdir}/trace.csv", "rb").read() + open(f"{outdir}/histogram.csv", "rb").read())
        return outs[0] == outs[1]

    def test_properties(self, tmp_path):
        t0 = time.perf_counter()
        checks = {
            "positivity+faces": self._positivity_and_faces(),
            "v normalization": self._normalization(),
            "Parseval+semigroup": self._spectral(),
            "noise covariance": self._covariance(),
            "byte reproducibility": self._reproducible(tmp_path),
        }
        elapsed = time.perf_counter() - t0
        detail = ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
        assert record(8, all(checks.values()), detail, elapsed, 120), detail


class TestCriterion9:
    """Delay logistic: boundary rate and band persistence."""

    def test_delay(self):
        t0 = time.perf_counter()
        model = delay_logistic(0.5, 0.3)
        inv = boundary_invasion(model, 0, 0.01, 1.0, 5.0, paths=4)
        expected = 1.0 - 0.5 * 0.3**2
        ok_rate = abs(inv.rate - expected) <= 0.02

        pilot = band_persistence(model, 0.01, 20.0, 220.0, paths=1, seed=500, delta=0.01)
        band = (pilot.verdict_min.b, pilot.verdict_min.B)
        res = band_persistence(model, 0.01, 20.0, 220.0, paths=8, seed=1, band=band)
        frac = float(res.fraction_min.min())
        ok = ok_rate and pilot.verdict_min.persistent and frac >= 0.95
        elapsed = time.perf_counter() - t0
        detail = f"lambda_1 {inv.rate:.4f} vs {expected:.3f} +/- 0.02; band [{band[0]:.3f}, {band[1]:.3f}] fraction min {frac:.4f}"
        assert record(9, ok, detail, elapsed, 120), detail
