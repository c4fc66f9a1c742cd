"""Polar coordinates, the H functional and the Lambda estimator."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import fd_principal_eigenvalue, gbm_rates, quadrature, sir_threshold
from rdpersist.domain import build_domain
from rdpersist.engine import StepperConfig
from rdpersist.models import (
    KppParams,
    LogisticParams,
    SirParams,
    build_kpp,
    build_linear,
    build_logistic,
    build_sir,
    sir_equilibrium_state,
)
from rdpersist.projective import (
    ProjectiveState,
    diverse_profiles,
    estimate_lambda,
    evaluate_H,
    linearize,
    merge_estimates,
    polar,
    project_step_consistency,
)


class TestPolar:
    """(r, v, z) decomposition of a state."""

    def test_constant(self, torus64):
        st_ = polar(torus64, np.full((1, 64), 3.0))
        assert st_.r == pytest.approx(6 * np.pi)
        np.testing.assert_allclose(st_.v, 1 / (2 * np.pi))

    def test_positive_part_of_sine(self, torus64):
        """r = int max(sin, 0) = 2 up to the grid quadrature error."""
        u = np.maximum(np.sin(torus64.points[:, 0]), 0)[None]
        expected = quadrature(lambda x: np.maximum(np.sin(x), 0), 0, 2 * np.pi)
        assert polar(torus64, u).r == pytest.approx(expected, abs=2e-3)

    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e6))
    def test_reconstruct_and_scaling(self, seed, scale):
        d = build_domain("neumann", 1, 1.0, 16)
        x = np.random.default_rng(seed).random((3, 16)) + 0.01
        st_ = polar(d, x, tracked=(0, 2))
        np.testing.assert_allclose(st_.reconstruct((0, 2), 3), x, rtol=1e-12)
        assert d.integrate(st_.v).sum() == pytest.approx(1.0)
        scaled = polar(d, scale * x, tracked=(0, 2))
        np.testing.assert_allclose(scaled.v, st_.v, rtol=1e-10)
        assert scaled.r == pytest.approx(scale * st_.r, rel=1e-12)

    def test_zero_tracked_block(self, torus64):
        with pytest.raises(ValueError):
            polar(torus64, np.zeros((1, 64)))


class TestLinearize:
    """Boundary linearization at u = 0."""

    def test_kpp(self, torus64):
        lin = linearize(build_kpp(KppParams(eps=0.3), torus64))
        x = np.abs(np.random.default_rng(0).normal(size=(1, 64)))
        np.testing.assert_allclose(lin.f_hat(x), 1.0)
        np.testing.assert_allclose(lin.model.drift(x), x)
        np.testing.assert_allclose(lin.model.sigma(x), x)

    def test_logistic_keeps_heterogeneous_rates(self, neumann_pi):
        r = lambda x: 1 + 0.5 * np.cos(x)
        model = build_logistic(LogisticParams(r=r, E=0.2, K=2.0), neumann_pi)
        lin = linearize(model)
        x = np.ones((1, 64))
        np.testing.assert_allclose(lin.f_hat(x)[0], r(neumann_pi.points[:, 0]) - 0.2)

    def test_sir_auxiliary_block(self):
        p = SirParams()
        lin = linearize(build_sir(p))
        x = np.vstack([np.full(16, 2.0), np.full(16, 0.5)])
        # the I component drops out of S's equation at I = 0
        f = lin.model.drift(x)
        np.testing.assert_allclose(f[0], p.lam - p.eta * 2.0)
        inc = p.beta / (1 + p.c1 * 2.0)
        np.testing.assert_allclose(f[1], 0.5 * (inc * 2.0 - (p.eta + p.delta + p.sigma)))


class TestH:
    """Closed-form values of H."""

    def test_kpp_constant_profile(self, torus64):
        lin = linearize(build_kpp(KppParams(), torus64))
        assert evaluate_H(lin, np.full(64, 1 / (2 * np.pi))) == pytest.approx(-1.0)

    def test_gbm(self, torus64):
        lin = linearize(build_linear(torus64, growth=1.0, noise_strength=0.5))
        v = np.full(64, 1 / (2 * np.pi))
        assert evaluate_H(lin, v) == pytest.approx(-gbm_rates(1.0, 0.5)[0])

    def test_white_noise_correction_is_l2(self, torus64):
        """For white noise the Ito term is eps^2 |v|_L2^2 / 2."""
        lin = linearize(build_kpp(KppParams(eps=0.4), torus64))
        v = diverse_profiles(torus64, 3, seed=1)[2]
        expected = -1.0 + 0.5 * 0.16 * torus64.inner(v, v)
        assert evaluate_H(lin, v) == pytest.approx(expected, rel=1e-10)

    def test_sir_disease_free(self):
        p = SirParams()
        lin = linearize(build_sir(p))
        x = sir_equilibrium_state(p, lin.model.domain)
        expected = -sir_threshold(p.lam, p.eta, p.delta, p.sigma, p.beta, p.c1)
        assert evaluate_H(lin, x[1], x[0]) == pytest.approx(expected)

    def test_batch_of_profiles(self, torus64):
        lin = linearize(build_kpp(KppParams(), torus64))
        out = evaluate_H(lin, diverse_profiles(torus64, 4)[:, None, :])
        np.testing.assert_allclose(out, -1.0)

    def test_unit_mass_required(self, torus64):
        lin = linearize(build_kpp(KppParams(), torus64))
        with pytest.raises(ValueError):
            evaluate_H(lin, np.ones(64))

    def test_profiles_are_unit_mass(self, torus2d):
        prof = diverse_profiles(torus2d, 9)
        assert np.all(prof > 0)
        np.testing.assert_allclose(torus2d.integrate(prof), 1.0)


class TestEstimateLambda:
    """Long-run averages of H along the renormalized linear flow."""

    def test_kpp_deterministic(self):
        d = build_domain("torus", 1, 2 * np.pi, 16)
        est = estimate_lambda(linearize(build_kpp(KppParams(), d)), StepperConfig(0.01), 5.0, 20.0, paths=4)
        assert est.value == pytest.approx(-1.0, abs=1e-3)
        assert est.agree and not est.multimodal

    def test_heterogeneous_logistic_matches_eigenvalue(self):
        d = build_domain("neumann", 1, np.pi, 32)
        c = lambda x: 1 + 0.5 * np.cos(x) - 0.2
        model = build_logistic(LogisticParams(r=lambda x: 1 + 0.5 * np.cos(x), E=0.2), d)
        est = estimate_lambda(linearize(model), StepperConfig(0.005), 10.0, 20.0, paths=3)
        lam = fd_principal_eigenvalue(np.pi, c)
        assert est.value == pytest.approx(-lam, abs=1e-2 * max(1, lam))

    def test_gbm_ensemble(self, small_torus):
        a, s = 1.0, 0.5
        lin = linearize(build_linear(small_torus, growth=a, noise_strength=s))
        est = estimate_lambda(lin, StepperConfig(1e-3), 1.0, 21.0, paths=16, seed=2)
        assert est.value == pytest.approx(-gbm_rates(a, s)[0], abs=1e-9)
        # the pathwise log-growth rate is noisy but centred on the same value
        assert abs(est.log_growth - est.value) < 4 * est.log_growth_stderr + 0.01
        assert est.agree

    def test_heat_profile_flattens(self, small_torus):
        states = []
        lin = linearize(build_linear(small_torus, diffusion=1.0))
        estimate_lambda(lin, StepperConfig(0.01), 0.0, 20.0, paths=3, observer=lambda t, x, dt: states.append(x))
        np.testing.assert_allclose(states[-1], 1 / (2 * np.pi), atol=1e-6)

    def test_profile_stays_normalized_and_positive(self):
        d = build_domain("torus", 1, 2 * np.pi, 16)
        lin = linearize(build_kpp(KppParams(eps=0.8), d))
        seen = []
        estimate_lambda(lin, StepperConfig(0.01), 0.0, 2.0, paths=4, observer=lambda t, x, dt: seen.append(x))
        xs = np.array(seen)
        assert xs.min() >= 0
        np.testing.assert_allclose(d.integrate(xs[..., 0, :]), 1.0, rtol=1e-10)

    def test_sir(self):
        p = SirParams(alpha2=0.2)
        lin = linearize(build_sir(p))
        est = estimate_lambda(lin, StepperConfig(0.01), 5.0, 25.0, paths=4, z0=p.lam / p.eta)
        expected = -sir_threshold(p.lam, p.eta, p.delta, p.sigma, p.beta, p.c1) + 0.5 * 0.2**2
        assert est.value == pytest.approx(expected, abs=1e-3)

    def test_merge_is_order_free(self, small_torus):
        lin = linearize(build_linear(small_torus, growth=0.3, noise_strength=0.8, noise="white"))
        parts = [
            estimate_lambda(lin, StepperConfig(0.01), 1.0, 6.0, paths=2, seed=0, stream=s) for s in (1, 2)
        ]
        a, b = merge_estimates(parts), merge_estimates(parts[::-1])
        assert a.value == b.value
        assert a.value == max(p.value for p in parts)
        assert len(a.path_means) == 4

    def test_bad_window(self, small_torus):
        lin = linearize(build_linear(small_torus))
        with pytest.raises(ValueError):
            estimate_lambda(lin, StepperConfig(0.1), 5.0, 5.0)


class TestConsistency:
    """Simulated (r, v) increments agree with the projective equations."""

    def test_heat_exact_to_second_order(self, small_torus):
        model = build_linear(small_torus)
        x0 = (1 + 0.5 * np.cos(small_torus.points[:, 0]))[None]
        rep = project_step_consistency(model, StepperConfig(1e-4), x0, 0.01)
        assert rep.r_max < 1e-6 and rep.v_max < 1e-2

    def test_residual_shrinks_with_dt(self):
        d = build_domain("torus", 1, 2 * np.pi, 16)
        model = build_kpp(KppParams(eps=0.5, noise="scalar"), d)
        x0 = (0.5 + 0.2 * np.cos(d.points[:, 0]))[None]
        coarse = project_step_consistency(model, StepperConfig(1e-2), x0, 0.5, seed=1)
        fine = project_step_consistency(model, StepperConfig(1e-3), x0, 0.5, seed=1)
        # mass moves exactly as predicted; the profile residual is O(dt)
        assert max(fine.r_max, coarse.r_max) < 1e-10
        assert fine.v_mean < 0.5 * coarse.v_mean

    def test_projective_state_dataclass(self):
        s = ProjectiveState(np.ones(2), np.ones((2, 1, 8)), np.zeros((2, 1, 8)))
        assert s.reconstruct((1,), 2).shape == (2, 2, 8)
