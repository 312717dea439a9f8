import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadelab.model import DispersionSpec, GridSpec
from cascadelab.weights import (
    SingularityError,
    WeightError,
    big_psi,
    build_sigma,
    carleman_factor,
    check_constraints,
    check_orderings,
    clamped_exp,
    decay_exponent_sup,
    default_params,
    lambda2_interval,
    log_theta,
    psi,
    r_over_k_integral,
    theta,
    weights_at,
    weights_csv,
)

GRID = GridSpec.aligned(100, 100, 0.4, 1.0)


def sign_count_critical_point(b, n=10_000):
    """Oracle: locations where the derivative of x(1-x)(1+bx) changes sign on a fine scan."""
    x = np.linspace(0, 1, n + 1)
    d = 1 + 2 * (b - 1) * x - 3 * b * x**2
    pos = d > 0
    flips = np.flatnonzero(pos[:-1] != pos[1:])
    return x[flips]


def bisect_b(xc):
    """Independent oracle: bisection on b for a sign change of sigma_x at xc."""
    lo, hi = -0.999999, 1e6
    f = lambda b: 1 + 2 * (b - 1) * xc - 3 * b * xc**2  # noqa: E731
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


class TestSigma:
    def test_symmetric_case(self):
        sig = build_sigma((0.4, 0.6), GRID)
        assert sig.b == pytest.approx(0.0, abs=1e-14)
        assert sig.sigma_inf == pytest.approx(0.25, abs=1e-15)
        assert sig.critical_point == 0.5

    def test_offset_case_matches_bisection_and_sign_scan(self):
        sig = build_sigma((0.55, 0.75), GRID)
        assert sig.b == pytest.approx(bisect_b(0.65), rel=1e-9)
        flips = sign_count_critical_point(sig.b)
        assert flips.size == 1
        assert abs(flips[0] - 0.65) <= 1e-4

    def test_boundary_zeros(self):
        sig = build_sigma((0.45, 0.65), GRID)
        assert sig(0.0) == 0.0 and sig(1.0) == 0.0
        assert np.all(sig(GRID.x[1:-1]) > 0)

    def test_slope_nonzero_outside_omega0(self):
        sig = build_sigma((0.45, 0.65), GRID)
        lo, hi = sig.omega0
        x = GRID.x
        outside = (x < lo) | (x > hi)
        assert np.all(sig.derivative(x)[outside] != 0)
        assert lo <= sig.critical_point <= hi

    def test_unreachable_critical_point(self):
        with pytest.raises(WeightError, match="critical point"):
            build_sigma((0.75, 0.85), GRID)

    @settings(max_examples=50, deadline=None)
    @given(c=st.floats(0.36, 0.64), w=st.floats(0.01, 0.03))
    def test_property_unique_critical_point(self, c, w):
        sig = build_sigma((c - w, c + w), GRID)
        flips = sign_count_critical_point(sig.b)
        assert flips.size == 1 and abs(flips[0] - c) <= 2e-4
        assert sig.sigma_inf == pytest.approx(float(sig(GRID.x).max()), rel=1e-3)


class TestTheta:
    def test_values(self):
        assert theta(0.5, 1.0, 1.0) == pytest.approx(256.0)
        assert theta(0.5, 0.5, 1.0) == pytest.approx(4096.0)

    @settings(max_examples=50, deadline=None)
    @given(t=st.floats(0.01, 0.99), a=st.floats(0.01, 2.0))
    def test_symmetry(self, t, a):
        assert theta(t, a, 1.0) == pytest.approx(theta(1.0 - t, a, 1.0), rel=1e-12)
        assert log_theta(t, a, 1.0) == pytest.approx(math.log(theta(t, a, 1.0)), rel=1e-12)

    @pytest.mark.parametrize("t,a", [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0)])
    def test_singular(self, t, a):
        with pytest.raises(SingularityError):
            theta(t, a, 1.0)


class TestPsi:
    def test_constant_k(self, cfg):
        p = default_params(cfg)
        k = DispersionSpec(kind="constant", gamma=0.0)
        from dataclasses import replace

        p = replace(p, lambda1=1.0, d1=1.0)
        assert psi(1, 1.0, p, k) == pytest.approx(-0.5)
        assert psi(1, 0.0, p, k) == pytest.approx(-1.0)

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.6, 0.9])
    def test_power_closed_form_vs_quadrature(self, alpha):
        from scipy.integrate import quad

        k = DispersionSpec(kind="power", gamma=alpha, alpha=alpha)
        for x in (0.1, 0.5, 1.0):
            ref, _ = quad(lambda r: r ** (1 - alpha), 0, x, epsabs=1e-13, epsrel=1e-13)
            assert float(r_over_k_integral(k, x)) == pytest.approx(ref, abs=1e-8)

    def test_tabulated_graded_trapezoid(self):
        x = np.linspace(0, 1, 2001)
        k = DispersionSpec(kind="tabulated", gamma=0.5, values=tuple(np.sqrt(x)))
        exact = DispersionSpec(kind="power", gamma=0.5, alpha=0.5)
        got = r_over_k_integral(k, np.array([0.25, 0.5, 1.0]))
        want = r_over_k_integral(exact, np.array([0.25, 0.5, 1.0]))
        # interpolation error of the table, not quadrature error, dominates
        assert np.allclose(got, want, rtol=2e-3)

    def test_psi_negative_everywhere(self, cfg):
        p = default_params(cfg)
        for i in (1, 2):
            assert np.all(psi(i, cfg.grid.x, p) < 0)
            assert psi(i, 0.0, p) == pytest.approx(-(p.lambda1 if i == 1 else p.lambda2) * (p.d1 if i == 1 else p.d2))


class TestWeightsAt:
    def test_signs(self, cfg):
        p = default_params(cfg)
        g = cfg.grid
        t = g.t[1:-1, None, None]
        a = g.a[None, 1:, None]
        w = weights_at(t, a, g.x[None, None, :], p, g.T)
        assert np.all(w["phi1"] < 0) and np.all(w["phi2"] < 0) and np.all(w["Phi"] < 0)
        assert np.all(w["small_phi"] > 0)
        assert np.all(w["phi1"] <= w["phi2"]) and np.all(w["phi2"] <= w["Phi"])

    def test_psi_arithmetic_at_sigma_max(self):
        sig = build_sigma((0.4, 0.6), GRID)
        kappa = 4 * math.log(2) / sig.sigma_inf
        assert math.exp(kappa * sig.sigma_inf) == pytest.approx(16.0)

        class P:
            pass

        p = P()
        p.kappa, p.sigma = kappa, sig
        assert big_psi(0.5, p) == pytest.approx(-240.0)
        assert big_psi(0.0, p) == pytest.approx(1 - 256.0)

    def test_pure(self, cfg):
        p = default_params(cfg)
        a = weights_at(0.2, 0.5, cfg.grid.x, p, cfg.T)
        b = weights_at(0.2, 0.5, cfg.grid.x, p, cfg.T)
        for key in a:
            assert np.array_equal(a[key], b[key])

    def test_underflow_is_graceful(self, cfg):
        p = default_params(cfg)
        g = cfg.grid
        w = weights_at(g.t[1], g.a[1], g.x, p, g.T)
        f = carleman_factor(1e3, w["phi1"])
        assert np.all(np.isfinite(f)) and np.all(f == 0.0)
        assert np.all(clamped_exp(2e3 * w["phi1"]) > 0)


class TestInterval:
    def test_worked_example(self):
        k2 = DispersionSpec(kind="constant", gamma=0.0)
        sig = build_sigma((0.4, 0.6), GRID)
        kappa = 4 * math.log(2) / sig.sigma_inf
        iv = lambda2_interval(5.0, kappa, sig, k2)
        assert iv.lo == pytest.approx(510 / 9, rel=1e-12)
        assert iv.hi == pytest.approx(64.0, rel=1e-12)
        assert iv.hypotheses_met and iv.lo < iv.hi

    def test_hi_scales_inverse_d2(self):
        k2 = DispersionSpec(kind="constant", gamma=0.0)
        sig = build_sigma((0.4, 0.6), GRID)
        kappa = 4 * math.log(2) / sig.sigma_inf
        a = lambda2_interval(5.0, kappa, sig, k2).hi
        b = lambda2_interval(10.0, kappa, sig, k2).hi
        assert a / b == pytest.approx(2.0)

    def test_gate_when_kappa_small(self):
        k2 = DispersionSpec(kind="constant", gamma=0.0)
        sig = build_sigma((0.4, 0.6), GRID)
        iv = lambda2_interval(5.0, 0.5 * 4 * math.log(2) / sig.sigma_inf, sig, k2)
        assert not iv.hypotheses_met

    @settings(max_examples=60, deadline=None)
    @given(g=st.floats(0.0, 0.95), k1=st.floats(0.2, 5.0), f=st.floats(1.0, 10.0), kf=st.floats(1.0, 5.0))
    def test_nonempty_under_hypotheses(self, g, k1, f, kf):
        k2 = DispersionSpec(kind="power", gamma=g, alpha=g, coeff=k1)
        sig = build_sigma((0.45, 0.65), GRID)
        d2 = f * 5.0 / (k1 * (2 - g))
        kappa = kf * 4 * math.log(2) / sig.sigma_inf
        iv = lambda2_interval(d2, kappa, sig, k2)
        assert iv.hypotheses_met and iv.lo < iv.hi


class TestOrderings:
    def test_default_params_valid(self, cfg):
        p = default_params(cfg)
        assert all(c.passed for c in check_constraints(p))
        rep = check_orderings(p, cfg.grid)
        assert rep.passed and not rep.header

    def test_above_hi_flagged(self, cfg):
        p = default_params(cfg)
        iv = lambda2_interval(p.d2, p.kappa, p.sigma, p.k2)
        rep = check_orderings(p.with_lambda2(1.05 * iv.hi), cfg.grid)
        assert any("unguaranteed" in h for h in rep.header)

    def test_margin_trend_along_interval(self, cfg):
        """Scanning lambda2 toward hi: the (4/3)Psi < psi2 margin shrinks and psi2 <= Psi widens."""
        p = default_params(cfg)
        iv = lambda2_interval(p.d2, p.kappa, p.sigma, p.k2)
        lams = np.linspace(iv.lo, iv.hi, 12)[:-1]
        lower = [check_orderings(p.with_lambda2(l), cfg.grid).margins["(4/3)Psi < psi2"] for l in lams]
        upper = [check_orderings(p.with_lambda2(l), cfg.grid).margins["psi2 <= Psi"] for l in lams]
        assert np.all(np.diff(lower) < 0)
        assert np.all(np.diff(upper) > 0)

    @settings(max_examples=25, deadline=None)
    @given(frac=st.floats(0.0, 0.999), a1=st.floats(0.0, 0.9), a2=st.floats(0.0, 0.9))
    def test_orderings_hold_across_interval(self, cfg, frac, a1, a2):
        g = max(a1, a2) + 0.05
        c = cfg.replace(k1={"kind": "power", "alpha": a1, "gamma": g},
                        k2={"kind": "power", "alpha": a2, "gamma": g})
        p = default_params(c)
        iv = lambda2_interval(p.d2, p.kappa, p.sigma, p.k2)
        lam2 = iv.lo + frac * (iv.hi - iv.lo)
        from dataclasses import replace

        gap = p.d1 - float(r_over_k_integral(p.k1, 1.0))
        p = replace(p, lambda2=lam2, lambda1=1.01 * lam2 * p.d2 / gap)
        assert check_orderings(p, c.grid).passed


@pytest.mark.parametrize("p", range(1, 8))
@pytest.mark.parametrize("combo", ["2Phi-phi2", "4Phi-3phi2"])
def test_decay_products_bounded(cfg, p, combo):
    params = default_params(cfg, s=1.0)
    assert math.isfinite(decay_exponent_sup(params, cfg.grid, p, combo))
    assert decay_exponent_sup(params, cfg.grid, p, combo) < 0


def test_csv_columns(small_cfg):
    p = default_params(small_cfg)
    text = weights_csv(p, small_cfg.grid, t_indices=[1])
    head = text.splitlines()[0].split(",")
    assert head == ["t", "a", "x", "Theta", "psi1", "psi2", "sigma", "Psi", "phi1", "phi2", "Phi", "small_phi"]
    assert len(text.splitlines()) == 1 + small_cfg.grid.n_a * (small_cfg.grid.n_x + 1)
