"""Lyapunov functionals, occupation measures and persistence verdicts."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rdpersist.domain import EllipticOp, build_domain
from rdpersist.engine import StepperConfig, simulate
from rdpersist.lyapunov import (
    EDGES,
    NBINS,
    InsufficientSamples,
    LyapunovMonitor,
    Observer,
    OccupationMeasure,
    bin_bounds,
    bin_index,
    drift_check,
    g_splice,
    h_of_r,
    observe,
    persistence_verdict,
)
from rdpersist.models import KppParams, LogisticParams, build_kpp, build_linear, build_logistic


def _run(model, x0, T, burn_in, dt=0.01, seed=0, record=True):
    dom = model.domain
    occ = OccupationMeasure((), burn_in, [(1.0, 10.0)])
    mon = LyapunovMonitor(dom, EllipticOp.create(1.0, shift=1.0, m=model.m), model.tracked, record=record)
    simulate(model, StepperConfig(dt), x0, T, [Observer(mon, occ)], seed=seed)
    return occ, mon


class TestSplice:
    """The C^2 splice g and V = g(-ln r)."""

    def test_values(self):
        assert h_of_r(np.exp(-2.0)) == pytest.approx(2.0)
        assert h_of_r(np.exp(-1.0)) == pytest.approx(1.0)
        assert h_of_r(1.0) == 0.0 and h_of_r(5.0) == 0.0
        assert h_of_r(0.0) == np.inf

    @pytest.mark.parametrize("s0", [0.0, 1.0])
    def test_c2_at_junctions(self, s0):
        h = 1e-4
        left = g_splice(np.array([s0 - 2 * h, s0 - h, s0]))
        right = g_splice(np.array([s0, s0 + h, s0 + 2 * h]))
        d1l, d1r = (left[2] - left[1]) / h, (right[1] - right[0]) / h
        d2l = (left[2] - 2 * left[1] + left[0]) / h**2
        d2r = (right[2] - 2 * right[1] + right[0]) / h**2
        assert d1l == pytest.approx(d1r, abs=1e-3)
        assert d2l == pytest.approx(d2r, abs=5e-3)

    @given(a=st.floats(-5, 5), b=st.floats(-5, 5))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert g_splice(lo) <= g_splice(hi)


class TestMonitor:
    """Values of W1, W2 and V on simple states."""

    def test_zero_state(self, torus64):
        mon = LyapunovMonitor(torus64, EllipticOp.create(1.0, shift=1.0))
        vals = mon.values(np.zeros((1, 64)))
        assert vals["W2"] == 1.0 and vals["W1"] == 1.0 and vals["V"] == np.inf

    def test_constant_state(self, torus64):
        mon = LyapunovMonitor(torus64, EllipticOp.create(1.0, shift=1.0), beta=-0.3)
        vals = mon.values(np.full((1, 64), 2.0))
        assert vals["W2"] == pytest.approx(1 + 4 * np.pi)
        # constant mode: (shift)^(2 beta) |<x, e0>|^2 = 8 pi
        assert vals["W1"] == pytest.approx(1 + 4 * np.pi)
        assert vals["V"] == 0.0

    @given(seed=st.integers(0, 2**32 - 1))
    def test_w1_at_least_one(self, seed):
        d = build_domain("neumann", 1, 1.0, 16)
        mon = LyapunovMonitor(d, EllipticOp.create([1.0, 2.0], shift=1.0), tracked=(0, 1))
        x = np.random.default_rng(seed).random((3, 2, 16))
        vals = mon.values(x)
        assert np.all(vals["W1"] >= 1.0) and vals["W2"].shape == (3,)


class TestOccupation:
    """Time-weighted log-binned histograms."""

    def test_bins(self):
        assert bin_index(0.0) == 0 and bin_index(1e-40) == 0
        assert bin_index(1e40) == NBINS - 1
        i = bin_index(3.0)
        lo, hi = bin_bounds(int(i))
        assert lo <= 3.0 < hi and hi / lo == pytest.approx(10 ** (1 / 20))
        assert len(EDGES) == 1201

    @given(
        masses=st.lists(st.floats(0, 1e35, allow_nan=False), min_size=1, max_size=40),
        dt=st.floats(1e-4, 1.0),
    )
    def test_mass_sums_to_one(self, masses, dt):
        occ = OccupationMeasure()
        for k, m in enumerate(masses):
            occ.add(m, m, dt, (k + 1) * dt)
        assert occ.mass_distribution().sum() == pytest.approx(1.0, rel=1e-12)

    @given(
        a=st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=20),
        b=st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=20),
    )
    def test_merge_is_symmetric(self, a, b):
        def build(ms):
            o = OccupationMeasure((), 0.0, [(0.1, 10.0)])
            for k, m in enumerate(ms):
                o.add(m, m, 0.1, 0.1 * (k + 1))
            return o

        x, y = build(a).merge(build(b)), build(b).merge(build(a))
        np.testing.assert_allclose(x.mass_hist, y.mass_hist)
        assert x.kept_time == pytest.approx(0.1 * (len(a) + len(b)))
        np.testing.assert_allclose(x.band_time, y.band_time)

    def test_burn_in_excluded(self):
        occ = OccupationMeasure((), burn_in=1.0)
        for k in range(20):
            occ.add(5.0 if k < 10 else 0.5, 1.0, 0.1, 0.1 * (k + 1))
        assert occ.kept_time == pytest.approx(1.0)
        assert occ.mass_hist[bin_index(5.0)] == 0.0

    def test_batch_and_path(self):
        occ = OccupationMeasure((3,), 0.0, [(1.0, 2.0)])
        occ.add(np.array([1.5, 0.5, 1.5]), np.ones(3), 0.5, 0.5)
        np.testing.assert_allclose(occ.band_fraction(), [1.0, 0.0, 1.0])
        assert occ.path(1).mass_hist.sum() == pytest.approx(0.5)

    def test_observe_helper(self, torus64):
        mon = LyapunovMonitor(torus64, EllipticOp.create(1.0, shift=1.0))
        occ = OccupationMeasure()
        vals = observe(mon, occ, np.full((1, 64), 1.0), 0.1, 0.1)
        assert vals["mass"] == pytest.approx(2 * np.pi) and occ.kept_time == pytest.approx(0.1)


class TestVerdict:
    """Smallest band holding 1 - delta of the time."""

    def test_kpp_is_persistent(self):
        d = build_domain("torus", 1, 2 * np.pi, 16)
        occ, _ = _run(build_kpp(KppParams(), d), np.full((1, 16), 0.5), 30.0, 10.0)
        v = persistence_verdict(occ)
        assert v.persistent and v.b <= 2 * np.pi <= v.B and v.B / v.b < 1.2

    def test_decay_is_not_persistent(self, small_torus):
        occ, _ = _run(build_linear(small_torus, shift=1.0), np.ones((1, 8)), 200.0, 10.0, dt=0.05, record=False)
        assert not persistence_verdict(occ).persistent

    def test_noise_driven_extinction(self, small_torus):
        """a - s^2/2 < 0: almost-sure decay even though a > 0."""
        model = build_linear(small_torus, growth=0.1, noise_strength=1.0)
        occ, _ = _run(model, np.ones((1, 8)), 400.0, 10.0, dt=0.05, seed=3, record=False)
        assert not persistence_verdict(occ).persistent

    def test_band_fraction_one_for_equilibrium(self):
        d = build_domain("torus", 1, 2 * np.pi, 8)
        occ = OccupationMeasure((), 0.0, [(6.0, 6.5)])
        mon = LyapunovMonitor(d, EllipticOp.create(1.0, shift=1.0))
        simulate(build_kpp(KppParams(), d), StepperConfig(0.01), np.ones((1, 8)), 5.0, [Observer(mon, occ)])
        assert occ.band_fraction() == pytest.approx(1.0)

    def test_floor(self):
        occ = OccupationMeasure()
        occ.add(1e-10, 1e-10, 1.0, 1.0)
        assert not persistence_verdict(occ, floor=1e-8).persistent
        assert persistence_verdict(occ, floor=1e-12).persistent

    def test_requires_samples(self):
        with pytest.raises(InsufficientSamples):
            persistence_verdict(OccupationMeasure((), burn_in=5.0))

    def test_requires_single_path(self):
        occ = OccupationMeasure((2,))
        occ.add(np.ones(2), np.ones(2), 1.0, 1.0)
        with pytest.raises(ValueError):
            persistence_verdict(occ)


class TestDrift:
    """Empirical drift of W2 at large mass."""

    def test_kpp_drift_negative_at_large_mass(self):
        d = build_domain("torus", 1, 2 * np.pi, 16)
        _, mon = _run(build_kpp(KppParams(eps=0.3), d), np.full((1, 16), 5.0), 12.0, 0.0, seed=1)
        rep = drift_check(mon.series("mass"), mon.series("W2"), 0.01, threshold=7.0)
        assert rep.ok and rep.slope < 0

    def test_extinction_drift_everywhere_negative(self, neumann_pi):
        model = build_logistic(LogisticParams(E=1.5), neumann_pi)
        _, mon = _run(model, np.full((1, 64), 2.0), 15.0, 0.0)
        rep = drift_check(mon.series("mass"), mon.series("W2"), 0.01, threshold=0.0)
        assert np.all(rep.mean_drift[rep.counts > 0] < 0)

    def test_short_trace(self):
        with pytest.raises(InsufficientSamples):
            drift_check(np.ones(10), np.ones(10), 0.1)
