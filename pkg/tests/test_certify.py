import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadelab.certify import (
    VARIANTS,
    CertConfigError,
    LogQuadrature,
    _diverging,
    caccioppoli_check,
    carleman_eval,
    carleman_terms,
    empirical_s0,
    hardy_poincare_constant,
    hardy_rayleigh,
    log_s_grid,
    observability_quotient,
    refinement_factor,
    resolved_s,
    sample_draws,
    scan_s,
    solve_draw,
)
from cascadelab.model import DispersionSpec, load_preset, quadrature_weights
from cascadelab.solver import solve_adjoint
from cascadelab.weights import default_params, weights_at

POWER_HALF = DispersionSpec(kind="power", gamma=0.5, alpha=0.5)
CONSTANT = DispersionSpec(kind="constant", gamma=0.0)


@pytest.fixture(scope="module")
def small_params(small_cfg):
    return default_params(small_cfg)


@pytest.fixture(scope="module")
def small_draw(small_cfg):
    return sample_draws(7, 1)[0]


class TestLogQuadrature:
    def test_matches_direct_sum(self, small_cfg, small_params, small_draw):
        """At a resolved s the log-space sum equals a plain weighted sum."""
        g = small_cfg.grid
        s = resolved_s(small_cfg, small_params)
        traj, _ = solve_draw(small_draw, small_cfg, "renewal_2_38")
        q = LogQuadrature(small_cfg, small_params)
        dens = traj.first[1:-1, 1:, :] ** 2
        got = q.log_integral(dens, s, 3, "phi1")
        t = g.t[1:-1, None, None]
        a = g.a[None, 1:, None]
        w = weights_at(t, a, g.x[None, None, :], small_params, g.T)
        th = np.exp(q.lt)
        f = (s * th) ** 3 * np.exp(2 * s * w["phi1"]) * dens
        wt, wa, wx = (quadrature_weights(g, ax) for ax in ("t", "a", "x"))
        want = float(np.einsum("nij,n,i,j->", f, wt[1:-1], wa[1:], wx))
        assert got == pytest.approx(math.log(want), rel=1e-12)

    def test_zero_density_is_minus_inf(self, small_cfg, small_params):
        q = LogQuadrature(small_cfg, small_params)
        z = np.zeros((small_cfg.grid.n_t - 1, small_cfg.grid.n_a, small_cfg.grid.n_x + 1))
        assert q.log_integral(z, 1.0, 3, "phi1") == -math.inf

    def test_no_underflow_at_large_s(self, cfg, bump_data):
        p = default_params(cfg)
        q = LogQuadrature(cfg, p)
        dens = np.ones((cfg.grid.n_t - 1, cfg.grid.n_a, cfg.grid.n_x + 1))
        v = q.log_integral(dens, 1e3, 3, "phi1")
        assert math.isfinite(v) and v < -1e6


class TestCarlemanEval:
    def test_zero_data_is_vacuous(self, small_cfg, small_params):
        z = np.zeros(small_cfg.grid.field_shape)
        traj = solve_adjoint(z, z, "renewal", "renewal", small_cfg)
        e = carleman_eval(traj, small_params.with_s(1.0), "renewal_2_38")
        assert e.vacuous and math.isnan(e.ratio) and e.lhs == 0.0

    @pytest.mark.parametrize("variant", ["renewal_2_38", "omega_2_49", "lemma_2_50", "intermediate_2_16",
                                         "single_2_18"],
                             ids=["renewal", "observation", "coupling-lemma", "two-sources", "single-source"])
    def test_finite_at_resolved_s(self, small_cfg, small_params, small_draw, variant):
        s = resolved_s(small_cfg, small_params)
        traj, src = solve_draw(small_draw, small_cfg, variant)
        e = carleman_eval(traj, small_params.with_s(s), variant, src)
        assert math.isfinite(e.log_ratio) and e.ratio > 0

    def test_nondeg_needs_constant_k2(self, small_cfg, small_params, small_draw):
        traj, src = solve_draw(small_draw, small_cfg, "nondeg_2_21")
        with pytest.raises(CertConfigError, match="nondegenerate"):
            carleman_eval(traj, small_params, "nondeg_2_21", src)

    def test_nondeg_on_constant_preset(self, small_draw):
        c = load_preset("constant_k")
        c = c.with_grid(c.grid.__class__.aligned(24, 20, c.T, c.A))
        p = default_params(c)
        traj, src = solve_draw(small_draw, c, "nondeg_2_21")
        e = carleman_eval(traj, p.with_s(resolved_s(c, p)), "nondeg_2_21", src)
        assert math.isfinite(e.log_ratio)

    def test_sources_required(self, small_cfg, small_params, small_draw):
        traj, _ = solve_draw(small_draw, small_cfg, "renewal_2_38")
        with pytest.raises(CertConfigError):
            carleman_eval(traj, small_params, "intermediate_2_16", None)

    def test_unknown_variant(self, small_cfg, small_params, small_draw):
        traj, _ = solve_draw(small_draw, small_cfg, "renewal_2_38")
        with pytest.raises(CertConfigError):
            carleman_eval(traj, small_params, "nope")

    def test_lemma_rejects_small_mu3(self, small_cfg, small_params, small_draw):
        rates = dict(small_cfg.rates.to_dict(), mu3={"kind": "constant", "value": 0.5})
        c = small_cfg.replace(rates=rates)
        traj, _ = solve_draw(small_draw, c, "lemma_2_50")
        with pytest.raises(CertConfigError, match="mu3"):
            carleman_eval(traj, default_params(c), "lemma_2_50")

    @settings(max_examples=15, deadline=None)
    @given(logs=st.floats(-10.0, 3.0))
    def test_phi2_weight_lowers_rhs(self, small_cfg, small_params, small_draw, logs):
        """phi2 <= Phi pointwise, so swapping the right-hand weight can only shrink it."""
        traj, src = solve_draw(small_draw, small_cfg, "intermediate_2_16")
        q = LogQuadrature(small_cfg, small_params)
        terms = carleman_terms(traj, "intermediate_2_16", src, q)
        s = 10.0**logs
        for t in terms.rhs:
            swapped = type(t)(t.b, t.p, "phi2", t.cols, t.x_log)
            assert q.evaluate(swapped, s) <= q.evaluate(t, s) + 1e-12

    def test_all_variants_known(self):
        assert len(VARIANTS) == 6


class TestScan:
    def test_grid_too_small(self):
        with pytest.raises(ValueError, match="s-grid too small"):
            log_s_grid(1e-2, 1e3, 7)

    def test_scan_vacuous_draws_counted(self, small_cfg, small_params):
        from cascadelab.certify import DrawSpec

        zero = DrawSpec((), ())
        rep = scan_s("omega_2_49", [zero, sample_draws(0, 1)[0]], small_cfg, small_params,
                     log_s_grid(1e-9, 1e-6, 8))
        assert rep.n_vacuous == 1 and rep.n_draws == 2

    def test_scan_deterministic(self, small_cfg, small_params):
        draws = sample_draws(0, 2)
        grid = log_s_grid(1e-9, 1e-6, 8)
        a = scan_s("renewal_2_38", draws, small_cfg, small_params, grid)
        b = scan_s("renewal_2_38", draws, small_cfg, small_params, grid, workers=2)
        assert a.csv() == b.csv() and a.to_dict() == b.to_dict()

    def test_empirical_s0_plateau(self):
        s = np.logspace(-2, 3, 11)
        lr = np.log(np.r_[np.linspace(50, 6, 5), 5.2, 5.1, 5.0, 5.0, 5.0, 5.0])
        s0, logC = empirical_s0(s, lr)
        assert s0 == pytest.approx(s[5]) and logC == pytest.approx(math.log(5.2))

    def test_empirical_s0_none_when_moving(self):
        s = np.logspace(-2, 3, 11)
        s0, _ = empirical_s0(s, -np.linspace(0, 100, 11))
        assert s0 is None

    def test_diverging_flag(self):
        s = np.logspace(-2, 3, 16)
        assert _diverging(s, np.linspace(0, 40, 16))
        assert not _diverging(s, np.zeros(16))

    def test_refinement_factor(self):
        assert refinement_factor(0.0, math.log(1.2)) == pytest.approx(0.2)
        assert refinement_factor(None, 1.0) == math.inf


class TestHardy:
    def test_constant_monotone_toward_four(self):
        vals = [hardy_poincare_constant(CONSTANT, n)[0] for n in (50, 100, 200, 400)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert all(v < 4.0 for v in vals)

    @pytest.mark.parametrize("k", [CONSTANT, POWER_HALF], ids=["constant", "power-half"])
    def test_extremizer_beats_probes(self, k, rng):
        n = 200
        lam, w = hardy_poincare_constant(k, n)
        assert hardy_rayleigh(k, n, w) == pytest.approx(lam, rel=1e-10)
        assert np.all(w >= -1e-12) and w[0] == 0 and w[-1] == 0
        x = np.linspace(0, 1, n + 1)
        for _ in range(100):
            c = rng.standard_normal(6)
            probe = sum(ci * np.sin((i + 1) * np.pi * x) for i, ci in enumerate(c))
            probe += rng.uniform(0, 1) * x ** rng.uniform(0.1, 1.5) * (1 - x)
            assert hardy_rayleigh(k, n, probe) <= lam * (1 + 1e-10)

    def test_generalized_eigenpair(self):
        from cascadelab.certify import _tri_matvec, hardy_matrices

        n = 100
        lam, w = hardy_poincare_constant(POWER_HALF, n)
        (Kd, Ko), (Bd, Bo) = hardy_matrices(POWER_HALF, n)
        r = _tri_matvec(Bd, Bo, w[1:-1]) - lam * _tri_matvec(Kd, Ko, w[1:-1])
        assert np.linalg.norm(r) <= 1e-6 * np.linalg.norm(_tri_matvec(Bd, Bo, w[1:-1]))


class TestCaccioppoli:
    def test_shrinking_omega_prime_lowers_lhs(self, small_cfg, small_params, small_draw):
        p = small_params.with_s(resolved_s(small_cfg, small_params))
        traj, src = solve_draw(small_draw, small_cfg, "intermediate_2_16")
        wide = caccioppoli_check(traj, src, p, (0.42, 0.68))
        narrow = caccioppoli_check(traj, src, p, (0.5, 0.6))
        for i in (1, 2):
            assert narrow.log_lhs[i] <= wide.log_lhs[i]
            assert narrow.log_rhs[i] == wide.log_rhs[i]

    def test_omega_prime_must_be_inside(self, small_cfg, small_params, small_draw):
        traj, src = solve_draw(small_draw, small_cfg, "intermediate_2_16")
        with pytest.raises(CertConfigError):
            caccioppoli_check(traj, src, small_params, (0.3, 0.6))


class TestObservability:
    def test_zero_is_vacuous(self, small_cfg):
        z = np.zeros(small_cfg.grid.field_shape)
        assert observability_quotient(z, z, small_cfg) is None

    @settings(max_examples=10, deadline=None)
    @given(c=st.floats(0.01, 100.0))
    def test_scale_invariant(self, small_cfg, small_draw, c):
        uT, vT = small_draw.fields(small_cfg)
        a = observability_quotient(uT, vT, small_cfg)
        b = observability_quotient(c * uT, c * vT, small_cfg)
        assert b == pytest.approx(a, rel=1e-12)

    def test_hum_cone_draws_supported_past_delta(self, small_cfg):
        d = sample_draws(1, 3, hum_cone=True)
        for draw in d:
            uT, vT = draw.fields(small_cfg)
            young = small_cfg.grid.a <= small_cfg.delta
            assert np.all(uT[young] == 0) and np.all(vT[young] == 0)
            assert observability_quotient(uT, vT, small_cfg) is not None
