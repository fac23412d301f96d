"""Value expansion, correction terms and approximation selection."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowvol._numerics import central_derivative
from slowvol.dynamics import MarketModel, StrategyFamily
from slowvol.errors import ValidationError
from slowvol.expansion import (
    SlowFactorFrozen,
    ZerothOrder,
    approximation_select,
    expand,
    pi0_eval,
    v0_eval,
    v0_x_eval,
    v0_xx_eval,
    v0_xz_eval,
    v0_z_eval,
    v1_eval,
    vtilde1_quarter_eval,
    vtilde_2alpha_eval,
)
from slowvol.utility import MixturePowers, Power

from conftest import BETA, GAMMA, MU, RHO, cir_pi0, cir_v0, cir_v1, cir_vtilde_2alpha


def frozen_cir(z=1.0, rho=RHO, T=1.0):
    return SlowFactorFrozen.from_model(MarketModel.cir_model(MU, 1.0, BETA, rho), z, T)


def constant_lambda_frozen(lam=0.4, rho=-0.3):
    return SlowFactorFrozen(1.0, lambda z: lam, lambda z: 0.0, lambda z: 0.5, rho)


def zero(t, x, z):
    return np.zeros_like(np.asarray(x, float))


class TestFrozen:
    def test_rejects_correlation_out_of_range(self):
        with pytest.raises(ValidationError):
            SlowFactorFrozen(1.0, lambda z: 1.0, lambda z: 0.0, lambda z: 1.0, 1.0)

    def test_cir_coefficients(self):
        fr = frozen_cir(z=4.0)
        assert fr.lam == pytest.approx(MU * 2.0)
        assert fr.lam_prime == pytest.approx(MU / 4.0)
        assert fr.g == pytest.approx(BETA * 2.0)


class TestCIRClosedForms:
    """Closed forms for the CIR example with power utility."""

    pts = [(0.0, 1.0, 1.0), (0.3, 2.5, 0.5), (0.9, 0.2, 3.0)]

    @pytest.mark.parametrize("t,x,z", pts)
    def test_v0(self, t, x, z):
        assert v0_eval(frozen_cir(z), Power(GAMMA), t, x) == pytest.approx(cir_v0(t, x, z), rel=1e-13)

    @pytest.mark.parametrize("t,x,z", pts)
    def test_v1(self, t, x, z):
        assert v1_eval(frozen_cir(z), Power(GAMMA), t, x) == pytest.approx(cir_v1(t, x, z), rel=1e-12)

    @pytest.mark.parametrize("t,x,z", pts)
    def test_pi0(self, t, x, z):
        assert pi0_eval(frozen_cir(z), Power(GAMMA), t, x) == pytest.approx(cir_pi0(t, x, z), rel=1e-13)

    @pytest.mark.parametrize("t,x,z", pts)
    def test_v0_z_analytic(self, t, x, z):
        expected = cir_v0(t, x, z) * MU**2 * GAMMA * (1.0 - t) / (2 * (1 - GAMMA))
        assert v0_z_eval(frozen_cir(z), Power(GAMMA), t, x) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("t,x,z", pts)
    def test_vtilde_2alpha(self, t, x, z):
        fam = StrategyFamily.scaled(lambda t, x, z: cir_pi0(t, x, z), 1.0, 1.0, 0.2)
        got = vtilde_2alpha_eval(frozen_cir(z), Power(GAMMA), fam, t, x)
        assert got.method == "closed_form"
        assert got.value == pytest.approx(cir_vtilde_2alpha(t, x, z), rel=1e-12)

    def test_v1_pde_residual(self):
        # v1_t + lam^2 R^2 v1_xx / 2 + lam^2 R v1_x = -rho lam g R v0_xz
        fr, u = frozen_cir(), Power(GAMMA)
        lam, g = fr.lam, fr.g
        for t in (0.2, 0.5):
            x = np.array([0.5, 1.0, 2.0])
            v1t = central_derivative(lambda tt: v1_eval(fr, u, tt, x), np.full(3, t), 1, h=1e-3)
            v1x = central_derivative(lambda xx: v1_eval(fr, u, t, xx), x, 1, h=1e-3 * x)
            v1xx = central_derivative(lambda xx: v1_eval(fr, u, t, xx), x, 2, h=1e-3 * x)
            r = x / (1 - GAMMA)
            lhs = v1t + 0.5 * lam**2 * r**2 * v1xx + lam**2 * r * v1x
            rhs = -RHO * lam * g * r * v0_xz_eval(fr, u, t, x)
            assert np.max(np.abs(lhs - rhs) / np.abs(v1_eval(fr, u, t, x))) < 1e-5


class TestStructuralZeros:
    def test_v1_vanishes_at_horizon(self):
        fr = frozen_cir()
        for u in (Power(GAMMA), MixturePowers([0.5, 0.5], [0.25, 0.75])):
            np.testing.assert_array_equal(v1_eval(fr, u, 1.0, np.array([0.5, 2.0])), 0.0)

    def test_v1_vanishes_without_correlation(self):
        fr = frozen_cir(rho=0.0)
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        np.testing.assert_array_equal(v1_eval(fr, u, 0.2, np.array([0.5, 2.0])), 0.0)

    def test_v0_z_vanishes_for_constant_sharpe(self):
        np.testing.assert_array_equal(v0_z_eval(constant_lambda_frozen(), Power(0.5), 0.0, np.array([1.0, 2.0])), 0.0)

    def test_v0_z_vanishes_at_horizon(self):
        assert v0_z_eval(frozen_cir(), Power(GAMMA), 1.0, 1.0) == 0.0

    def test_zero_sharpe_value_is_utility(self):
        fr = constant_lambda_frozen(lam=0.0)
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        assert v0_eval(fr, u, 0.0, 2.0) == pytest.approx(u.u(2.0), rel=1e-13)
        assert pi0_eval(fr, u, 0.0, 2.0) == 0.0

    def test_strategy_vanishes_at_zero_wealth(self):
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        assert pi0_eval(frozen_cir(), u, 0.0, 1e-10) < 1e-8


class TestFiniteDifferenceConsistency:
    @settings(max_examples=10, deadline=None)
    @given(z=st.floats(0.3, 3.0), x=st.floats(0.2, 5.0), t=st.floats(0.0, 0.9))
    def test_v0_z_matches_difference_mixture(self, z, x, t):
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        fr = frozen_cir(z)
        h = 1e-4 * z
        fd = (v0_eval(fr.at(z + h), u, t, x) - v0_eval(fr.at(z - h), u, t, x)) / (2 * h)
        assert v0_z_eval(fr, u, t, x) == pytest.approx(fd, rel=1e-5, abs=1e-12)

    def test_v0_x_and_xx_match_differences(self):
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        fr = frozen_cir()
        x = np.array([0.5, 1.0, 2.0])
        f = lambda xx: v0_eval(fr, u, 0.3, xx)  # noqa: E731
        np.testing.assert_allclose(v0_x_eval(fr, u, 0.3, x), central_derivative(f, x, 1, h=1e-3 * x), rtol=1e-7)
        np.testing.assert_allclose(v0_xx_eval(fr, u, 0.3, x), central_derivative(f, x, 2, h=1e-2 * x), rtol=1e-5)

    def test_v0_xz_matches_difference(self):
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        fr = frozen_cir()
        x, h = 1.3, 1e-4
        fd = (v0_x_eval(fr.at(1 + h), u, 0.2, x) - v0_x_eval(fr.at(1 - h), u, 0.2, x)) / (2 * h)
        assert v0_xz_eval(fr, u, 0.2, x) == pytest.approx(fd, rel=1e-6)


class TestCorrections:
    def _family(self, alpha=0.2, scale=1.0):
        return StrategyFamily.scaled(lambda t, x, z: cir_pi0(t, x, z), 1.0, scale, alpha)

    def test_zero_perturbation(self):
        fam = StrategyFamily(lambda t, x, z: cir_pi0(t, x, z), zero, 0.2, identical_to_pi0=True)
        got = vtilde_2alpha_eval(frozen_cir(), Power(GAMMA), fam, 0.0, 1.0, force_mc=True)
        assert got.value == 0.0 and got.stderr == 0.0

    def test_zero_at_horizon(self):
        assert vtilde_2alpha_eval(frozen_cir(), Power(GAMMA), self._family(), 1.0, 1.0).value == 0.0

    def test_monte_carlo_agrees_with_closed_form(self):
        fr, u = frozen_cir(), Power(GAMMA)
        mc = vtilde_2alpha_eval(fr, u, self._family(), 0.0, 1.0, force_mc=True, n_paths=20_000, seed=3)
        assert mc.method == "monte_carlo"
        assert abs(mc.value - cir_vtilde_2alpha(0.0, 1.0, 1.0)) < 3 * mc.stderr

    def test_strictly_negative_general_utility(self):
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        fr = frozen_cir()
        zo = ZerothOrder(MarketModel.cir_model(MU, 1.0, BETA, RHO), u, 1.0)
        fam = StrategyFamily(zo.pi0, lambda t, x, z: 0.5 * np.asarray(zo.pi0(t, x, z)), 0.2, identical_to_pi0=True)
        got = vtilde_2alpha_eval(fr, u, fam, 0.0, 1.0, n_paths=4000, n_times=16)
        assert got.value + 3 * got.stderr < 0

    def test_requires_identical_family(self):
        fam = StrategyFamily.scaled(lambda t, x, z: cir_pi0(t, x, z), 0.5, 1.0, 0.2)
        with pytest.raises(ValidationError):
            vtilde_2alpha_eval(frozen_cir(), Power(GAMMA), fam, 0.0, 1.0)

    def test_budget_flag(self):
        got = vtilde_2alpha_eval(
            frozen_cir(), Power(GAMMA), self._family(), 0.0, 1.0, force_mc=True, n_paths=200, target_stderr=1e-12
        )
        assert got.budget_warning

    def test_quarter_superposition_exact(self):
        fr, u = frozen_cir(), Power(GAMMA)
        fam = self._family(alpha=0.25)
        got = vtilde1_quarter_eval(fr, u, fam, 0.0, 1.0)
        assert got.value == v1_eval(fr, u, 0.0, 1.0) + vtilde_2alpha_eval(fr, u, fam, 0.0, 1.0).value
        assert got.value == pytest.approx(cir_v1(0, 1, 1) + cir_vtilde_2alpha(0, 1, 1), rel=1e-12)

    def test_quarter_superposition_monte_carlo_path(self):
        fr, u = frozen_cir(), Power(GAMMA)
        fam = self._family(alpha=0.25)
        got = vtilde1_quarter_eval(fr, u, fam, 0.0, 1.0, force_mc=True, n_paths=2000, seed=5)
        vt = vtilde_2alpha_eval(fr, u, fam, 0.0, 1.0, force_mc=True, n_paths=2000, seed=5)
        assert got.value == v1_eval(fr, u, 0.0, 1.0) + vt.value

    def test_quarter_with_zero_perturbation_is_v1(self):
        fam = StrategyFamily.scaled(lambda t, x, z: cir_pi0(t, x, z), 1.0, 0.0, 0.25)
        fr, u = frozen_cir(), Power(GAMMA)
        assert vtilde1_quarter_eval(fr, u, fam, 0.0, 1.0).value == v1_eval(fr, u, 0.0, 1.0)
        assert vtilde1_quarter_eval(frozen_cir(rho=0.0), u, fam, 0.0, 1.0).value == 0.0

    def test_quarter_requires_alpha(self):
        with pytest.raises(ValidationError):
            vtilde1_quarter_eval(frozen_cir(), Power(GAMMA), self._family(alpha=0.3), 0.0, 1.0)

    def test_expand_bundle(self):
        res = expand(frozen_cir(), Power(GAMMA), self._family(alpha=0.25))
        assert res.extra_tag == "vtilde1"
        assert res.v0(0.0, 1.0) == pytest.approx(cir_v0(0, 1, 1), rel=1e-13)
        assert res.extra(0.0, 1.0).value == pytest.approx(cir_v1(0, 1, 1) + cir_vtilde_2alpha(0, 1, 1), rel=1e-12)
        assert expand(frozen_cir(), Power(GAMMA), self._family(alpha=0.2)).extra_tag == "vtilde_2alpha"
        assert expand(frozen_cir(), Power(GAMMA)).extra is None


class TestApproximationSelect:
    pi0 = staticmethod(lambda t, x, z: cir_pi0(t, x, z))
    point = (0.0, 1.0, 1.0)

    @pytest.mark.parametrize(
        "alpha,name,order",
        [
            (0.5, "v0+sqrt(delta)*v1", 1.0),
            (0.8, "v0+sqrt(delta)*v1", 1.0),
            (0.3, "v0+sqrt(delta)*v1", 0.6),
            (0.25, "v0+sqrt(delta)*vtilde1", 0.75),
            (0.2, "v0+delta^(2alpha)*vtilde_2alpha", 0.5),
            (0.1, "v0+delta^(2alpha)*vtilde_2alpha", 0.3),
        ],
    )
    def test_identical_rows(self, alpha, name, order):
        d = approximation_select(StrategyFamily.scaled(self.pi0, 1.0, 1.0, alpha), self.point)
        assert d.expansion == name
        assert d.accuracy_order == pytest.approx(order)
        assert not d.indeterminate

    def test_zero_perturbation_small_alpha(self):
        fam = StrategyFamily(self.pi0, zero, 0.2, identical_to_pi0=True)
        d = approximation_select(fam, self.point)
        assert d.expansion == "v0+sqrt(delta)*v1" and d.region == "C1" and d.accuracy_order == 1.0

    def test_different_leading_strategy(self):
        fam = StrategyFamily.scaled(self.pi0, 0.5, 0.0, 0.5)
        d = approximation_select(fam, self.point, pi0=self.pi0)
        assert d.expansion == "vtilde0" and d.region == "K" and d.accuracy_order == 0.5

    def test_leading_strategy_equal_by_sampling(self):
        fam = StrategyFamily(self.pi0, self.pi0, 0.3, identical_to_pi0=False)
        d = approximation_select(fam, self.point, pi0=self.pi0)
        assert d.expansion == "v0+sqrt(delta)*v1" and d.region == "C"

    def test_noise_floor_is_indeterminate(self):
        fam = StrategyFamily(lambda t, x, z: cir_pi0(t, x, z) * (1 + 1e-10), self.pi0, 0.3)
        d = approximation_select(fam, self.point, pi0=self.pi0)
        assert d.indeterminate

    def test_requires_pi0_for_region_test(self):
        with pytest.raises(ValidationError):
            approximation_select(StrategyFamily.scaled(self.pi0, 0.5, 0.0, 0.5), self.point)


class TestZerothOrder:
    def test_matches_frozen_evaluators_mixture(self):
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        model = MarketModel.cir_model(MU, 1.0, BETA, RHO)
        zo = ZerothOrder(model, u, 1.0)
        x = np.array([0.5, 1.0, 2.0])
        z = np.array([0.5, 1.0, 2.0])
        gx, gz = zo.gradient(0.3, x, z)
        for i in range(3):
            fr = SlowFactorFrozen.from_model(model, z[i], 1.0)
            assert zo.pi0(0.3, x[i : i + 1], z[i : i + 1])[0] == pytest.approx(pi0_eval(fr, u, 0.3, x[i]), rel=1e-12)
            assert gx[i] == pytest.approx(v0_x_eval(fr, u, 0.3, x[i]), rel=1e-12)
            assert gz[i] == pytest.approx(v0_z_eval(fr, u, 0.3, x[i]), rel=1e-12)
            assert zo.value(0.3, x[i : i + 1], z[i : i + 1])[0] == pytest.approx(v0_eval(fr, u, 0.3, x[i]), rel=1e-12)

    def test_tabulated_state_matches_exact(self):
        u = MixturePowers([0.5, 0.5], [0.25, 0.75])
        model = MarketModel.cir_model(MU, 1.0, BETA, RHO)
        rng = np.random.default_rng(3)
        x = np.exp(rng.normal(0.0, 1.5, 200))
        x[:2] = [1e-7, 1e7]  # outside the table: exact fallback
        z = rng.uniform(0.1, 3.0, 200)
        tab = ZerothOrder(model, u, 1.0)
        exact = ZerothOrder(model, u, 1.0, tabulate=False)
        np.testing.assert_allclose(tab.pi0(0.2, x, z), exact.pi0(0.2, x, z), rtol=1e-7)
        for a, b in zip(tab.gradient(0.2, x, z), exact.gradient(0.2, x, z)):
            np.testing.assert_allclose(a, b, rtol=1e-7)

    def test_power_fast_path(self):
        model = MarketModel.cir_model(MU, 1.0, BETA, RHO)
        zo = ZerothOrder(model, Power(GAMMA), 1.0)
        x, z = np.array([1.0, 2.0]), np.array([1.0, 0.5])
        np.testing.assert_allclose(zo.pi0(0.0, x, z), cir_pi0(0, x, z), rtol=1e-14)
        np.testing.assert_allclose(zo.value(0.0, x, z), cir_v0(0, x, z), rtol=1e-14)

    def test_absorbed_paths_are_inert(self):
        zo = ZerothOrder(MarketModel.cir_model(MU, 1.0, BETA, RHO), MixturePowers([1, 1], [0.3, 0.6]), 1.0)
        x, z = np.array([0.0, 1.0]), np.array([1.0, 1.0])
        assert zo.pi0(0.0, x, z)[0] == 0.0
        gx, gz = zo.gradient(0.0, x, z)
        assert gx[0] == 0.0 and gz[0] == 0.0 and math.isfinite(gx[1])
