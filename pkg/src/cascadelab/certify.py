"""Numerical evaluation of the weighted inequalities.

Every weighted integral is accumulated in log space (shifted sum of
exponentials) so that
factors such as ``s^3 Theta^3 exp(2 s phi)``, which span hundreds of orders of
magnitude across the grid, never underflow before the ratio is formed.
Quadrature is the composite trapezoid rule with the singular nodes
``t = 0``, ``t = T`` and ``a = 0`` given zero weight.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .model import DispersionSpec, GridSpec, ProblemConfig, gaussian_bumps, interval_weights, quadrature_weights
from .solver import RENEWAL, Trajectory, solve_adjoint, x_derivative
from .weights import WeightParams, big_psi, log_theta, psi, theta_min

VARIANTS = ("intermediate_2_16", "single_2_18", "nondeg_2_21", "renewal_2_38", "omega_2_49", "lemma_2_50")
RENEWAL_VARIANTS = ("renewal_2_38", "omega_2_49", "lemma_2_50")
SOURCE_VARIANTS = ("intermediate_2_16", "single_2_18", "nondeg_2_21")

STABILIZE_TOL = 0.10
REFINE_TOL = 0.25
VACUOUS_LOG = math.log(1e-300)


class CertConfigError(ValueError):
    """A variant was asked for on data or a config it does not apply to."""


# ---------------------------------------------------------------------------
# weighted quadrature in log space


@dataclass
class Term:
    """One weighted integral, int (s Theta)^p exp(2 s Theta psi_w + x_log) dens.

    ``b`` already carries the quadrature weights; columns with zero x weight
    are dropped up front.
    """

    b: np.ndarray
    p: int
    weight: str | None
    cols: np.ndarray
    x_log: np.ndarray | None = None


class LogQuadrature:
    """Weighted integrals over the interior (t, a) nodes and all x nodes."""

    def __init__(self, config: ProblemConfig, params: WeightParams):
        g = config.grid
        self.config, self.params, self.g = config, params, g
        self.wt = quadrature_weights(g, "t")[1:-1]
        self.wa = quadrature_weights(g, "a")[1:]
        self.wx = quadrature_weights(g, "x")
        self.lt = log_theta(g.t[1:-1, None], g.a[None, 1:], g.T)[..., None]
        self.th = np.exp(self.lt)
        x = g.x
        self.x = x
        self.psi = {"phi1": psi(1, x, params), "phi2": psi(2, x, params), "Phi": big_psi(x, params)}
        self.sigma = params.sigma(x)
        self._wta = self.wt[:, None, None] * self.wa[None, :, None]

    @property
    def excluded(self) -> dict:
        return {"t_nodes": [0, self.g.n_t], "a_nodes": [0]}

    def interior(self, f: np.ndarray) -> np.ndarray:
        return f[1:-1, 1:, :]

    def term(self, dens: np.ndarray, p: int = 0, weight: str | None = None,
             x_weights: np.ndarray | None = None, x_log: np.ndarray | None = None) -> Term:
        wx = self.wx if x_weights is None else x_weights
        cols = np.flatnonzero(wx > 0)
        b = self._wta * wx[cols][None, None, :] * dens[:, :, cols]
        return Term(b, p, weight, cols, None if x_log is None else x_log[cols])

    def evaluate(self, term: Term, s: float) -> float:
        """log of the weighted integral at parameter s (-inf if it vanishes)."""
        b = term.b
        pos = b > 0
        if not pos.any():
            return -math.inf
        expo = term.p * (math.log(s) + self.lt) if term.p else np.zeros_like(self.lt)
        if term.weight is not None:
            expo = expo + 2.0 * s * self.th * self.psi[term.weight][term.cols][None, None, :]
        if term.x_log is not None:
            expo = expo + term.x_log[None, None, :]
        expo = np.broadcast_to(expo, b.shape)
        m = float(np.max(np.where(pos, expo, -np.inf)))
        with np.errstate(under="ignore"):
            tot = float(np.sum(b * np.exp(np.minimum(expo - m, 0.0))))
        return m + math.log(tot)

    def log_integral(self, dens, s, p=0, weight=None, x_weights=None, x_log=None) -> float:
        return self.evaluate(self.term(dens, p, weight, x_weights, x_log), s)

    def trace_term(self, dens: np.ndarray, p: int, weight: str, j: int) -> Term:
        """Boundary integral over (t, a) at the x node ``j``."""
        b = self._wta * dens[:, :, None]
        return Term(b, p, weight, np.array([j % self.g.field_shape[1]]))


def _logadd(*vals: float) -> float:
    vals = [v for v in vals if v > -math.inf]
    if not vals:
        return -math.inf
    return float(np.logaddexp.reduce(vals))


def _x2_over_k(k: DispersionSpec, x: np.ndarray) -> np.ndarray:
    kx = k(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(x > 0, x**2 / kx, 0.0)
    return r


def _terminal_young(uT: np.ndarray, vT: np.ndarray, config: ProblemConfig) -> float:
    """int_0^1 int_0^delta (u_T^2 + v_T^2)."""
    g = config.grid
    wa = interval_weights(g.a, 0.0, config.delta)
    return float(wa @ (uT**2 + vT**2) @ quadrature_weights(g, "x"))


def _log(v: float) -> float:
    return math.log(v) if v > 0 else -math.inf


# ---------------------------------------------------------------------------
# single evaluations


@dataclass
class CertEntry:
    variant: str
    s: float
    log_lhs: float
    log_rhs: float

    @property
    def vacuous(self) -> bool:
        return self.log_lhs <= VACUOUS_LOG and self.log_rhs <= VACUOUS_LOG

    @property
    def log_ratio(self) -> float:
        if self.vacuous:
            return math.nan
        return self.log_lhs - self.log_rhs

    @property
    def lhs(self) -> float:
        return math.exp(self.log_lhs) if self.log_lhs > -745 else 0.0

    @property
    def rhs(self) -> float:
        return math.exp(self.log_rhs) if self.log_rhs > -745 else 0.0

    @property
    def ratio(self) -> float:
        lr = self.log_ratio
        if math.isnan(lr):
            return math.nan
        return math.exp(lr) if lr < 709 else math.inf

    def to_dict(self) -> dict:
        return {"variant": self.variant, "s": self.s, "lhs": self.lhs, "rhs": self.rhs,
                "log_lhs": self.log_lhs, "log_rhs": self.log_rhs, "ratio": self.ratio,
                "log_ratio": self.log_ratio, "vacuous": self.vacuous}


@dataclass
class VariantTerms:
    """Both sides of one inequality for one solution, ready to scan in s.

    ``rhs_extra`` is an s-independent piece (log value); ``rhs_scaled`` holds
    ``(term, log_coeff)`` pairs for terms with a constant prefactor.
    """

    variant: str
    lhs: list
    rhs: list
    rhs_extra: float = -math.inf
    rhs_scaled: list = field(default_factory=list)

    def at(self, q: LogQuadrature, s: float) -> CertEntry:
        lhs = _logadd(*(q.evaluate(t, s) for t in self.lhs))
        rhs = [q.evaluate(t, s) for t in self.rhs]
        rhs += [lc + q.evaluate(t, s) for t, lc in self.rhs_scaled]
        return CertEntry(self.variant, s, lhs, _logadd(*rhs, self.rhs_extra))


def _pair_terms(q: LogQuadrature, u, v, k1, k2, x_weights=None) -> list:
    """Weighted energy terms of the left-hand sides (either component)."""
    g = q.g
    terms = []
    if k1 is not None:
        ui, uxi = q.interior(u), q.interior(x_derivative(u, g.dx))
        terms += [q.term(ui**2 * _x2_over_k(k1, q.x), 3, "phi1", x_weights),
                  q.term(uxi**2 * k1(q.x), 1, "phi1", x_weights)]
    if k2 is not None:
        vi, vxi = q.interior(v), q.interior(x_derivative(v, g.dx))
        terms += [q.term(vi**2 * _x2_over_k(k2, q.x), 3, "phi2", x_weights),
                  q.term(vxi**2 * k2(q.x), 1, "phi2", x_weights)]
    return terms


def carleman_terms(traj: Trajectory, variant: str, sources, q: LogQuadrature) -> VariantTerms:
    config = traj.config
    if variant not in VARIANTS:
        raise CertConfigError(f"unknown variant {variant!r}")
    if variant in SOURCE_VARIANTS and sources is None:
        raise CertConfigError(f"{variant} needs the sources (h1, h2) of its trajectory")
    if variant == "nondeg_2_21" and config.k2.degenerate:
        raise CertConfigError("nondeg_2_21 needs a nondegenerate (constant-kind) k2")
    if variant == "lemma_2_50":
        w1, w2 = config.omega1
        x = config.grid.x
        mu3 = config.rate_full("mu3")[:, :, (x >= w1) & (x <= w2)]
        if mu3.size and float(mu3.min()) < config.nu:
            raise CertConfigError("lemma_2_50 needs mu3 >= nu on omega1")
    g = config.grid
    u, v = traj.first, traj.second
    wq = interval_weights(g.x, *config.omega)
    young = _log(_terminal_young(u[-1], v[-1], config)) if variant in RENEWAL_VARIANTS else -math.inf

    if variant == "intermediate_2_16":
        h1, h2 = (np.asarray(h) for h in sources)
        return VariantTerms(variant, _pair_terms(q, u, v, config.k1, config.k2),
                            [q.term(q.interior(h1**2 + h2**2), 0, "Phi"),
                             q.term(q.interior(u**2 + v**2), 3, "Phi", wq)])
    if variant == "single_2_18":
        h2 = np.asarray(sources[1])
        vx1 = x_derivative(v, g.dx)[1:-1, 1:, -1]
        # s k(1) int Theta v_x(., ., 1)^2 e^{2 s phi2(., ., 1)}: p = 1 carries s Theta
        boundary = [(q.trace_term(vx1**2, 1, "phi2", -1), _log(float(config.k2(1.0))))]
        return VariantTerms(variant, _pair_terms(q, u, v, None, config.k2),
                            [q.term(q.interior(h2**2), 0, "phi2")], rhs_scaled=boundary)
    if variant == "nondeg_2_21":
        h2 = np.asarray(sources[1])
        vi, vxi = q.interior(v), q.interior(x_derivative(v, g.dx))
        ks = q.params.kappa * q.sigma
        return VariantTerms(variant,
                            [q.term(vi**2, 3, "Phi", x_log=3 * ks), q.term(vxi**2, 1, "Phi", x_log=ks)],
                            [q.term(q.interior(h2**2), 0, "Phi"), q.term(vi**2, 3, "Phi", wq, x_log=3 * ks)])
    if variant == "renewal_2_38":
        return VariantTerms(variant, _pair_terms(q, u, v, config.k1, config.k2),
                            [q.term(q.interior(u**2 + v**2), 3, "Phi", wq)], rhs_extra=young)
    if variant == "omega_2_49":
        obs = q.term(q.interior(u**2), 0, None, wq)
        return VariantTerms(variant, _pair_terms(q, u, v, config.k1, config.k2), [obs], rhs_extra=young)
    w1 = interval_weights(g.x, *config.omega1)
    return VariantTerms(variant, [q.term(q.interior(v**2), 3, "Phi", w1)],
                        _pair_terms(q, u, v, None, config.k2) + [q.term(q.interior(u**2), 0, None, wq)],
                        rhs_extra=young)


def carleman_eval(traj: Trajectory, params: WeightParams, variant: str, sources=None,
                  quad: LogQuadrature | None = None) -> CertEntry:
    """Both sides of one weighted inequality at ``params.s``.

    ``sources`` is ``(h1, h2)`` for the variants driven by prescribed sources
    and is ignored by the renewal variants, whose terminal data are read from
    the last slice of ``traj``.
    """
    q = quad or LogQuadrature(traj.config, params)
    return carleman_terms(traj, variant, sources, q).at(q, params.s)


def resolved_s(config: ProblemConfig, params: WeightParams) -> float:
    """The s at which 2 s Theta |psi1| is 1 at the smallest Theta.

    Below this scale the weights are resolved by the grid; the default scan
    range sits many orders of magnitude above it.
    """
    m = float(np.max(np.abs(psi(1, config.grid.x, params))))
    return 1.0 / (2.0 * theta_min(config.T, config.A) * m)


# ---------------------------------------------------------------------------
# random data


@dataclass(frozen=True)
class DrawSpec:
    """Grid-independent description of one random draw.

    Each component is a sum of Gaussian bumps ``(amp, a_c, a_w, x_c, x_w)``
    with ``a_c``, ``a_w`` in units of A; sampled fields are normalized to
    unit L2 on whatever grid they are evaluated on.
    """

    u_bumps: tuple
    v_bumps: tuple
    hum_cone: bool = False

    def fields(self, config: ProblemConfig) -> tuple[np.ndarray, np.ndarray]:
        g = config.grid
        mask = None
        if self.hum_cone:
            mask = (g.a > config.delta).astype(float)
        out = []
        for bumps in (self.u_bumps, self.v_bumps):
            scaled = [(amp, ac * g.A, aw * g.A, xc, xw) for amp, ac, aw, xc, xw in bumps]
            f = gaussian_bumps(g, scaled, a_mask=mask)
            nrm = math.sqrt(float(quadrature_weights(g, "a") @ f**2 @ quadrature_weights(g, "x")))
            out.append(f / nrm if nrm > 0 else f)
        return out[0], out[1]

    def sources(self, config: ProblemConfig) -> tuple[np.ndarray, np.ndarray]:
        """Space-time sources: the bump fields times sin(pi t / T)."""
        g = config.grid
        f1, f2 = self.fields(config)
        ramp = np.sin(np.pi * g.t / g.T)[:, None, None]
        return ramp * f1[None], ramp * f2[None]


def _bumps(rng: np.random.Generator, n: int, a_range=(0.1, 0.9)):
    return tuple(
        (float(rng.normal()), float(rng.uniform(*a_range)), float(rng.uniform(0.05, 0.2)),
         float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.05, 0.2)))
        for _ in range(n)
    )


def sample_draws(seed: int, n: int, *, hum_cone: bool = False, delta_over_A: float = 0.5) -> list[DrawSpec]:
    rng = np.random.default_rng(seed)
    a_range = (delta_over_A + 0.05, 0.9) if hum_cone else (0.1, 0.9)
    return [DrawSpec(_bumps(rng, 3, a_range), _bumps(rng, 3, a_range), hum_cone) for _ in range(n)]


def solve_draw(draw: DrawSpec, config: ProblemConfig, variant: str) -> tuple[Trajectory, tuple | None]:
    """Trajectory for one draw in the mode the variant needs."""
    uT, vT = draw.fields(config)
    if variant in SOURCE_VARIANTS:
        h1, h2 = draw.sources(config)
        return solve_adjoint(uT, vT, h1, h2, config), (h1, h2)
    return solve_adjoint(uT, vT, RENEWAL, RENEWAL, config), None


# ---------------------------------------------------------------------------
# s scans


def log_s_grid(lo: float, hi: float, n: int) -> np.ndarray:
    if n < 8:
        raise ValueError(f"s-grid too small: {n} points (need >= 8)")
    if not 0 < lo < hi:
        raise ValueError("s-grid needs 0 < lo < hi")
    return np.logspace(math.log10(lo), math.log10(hi), n)


DEFAULT_S_GRID = (1e-2, 1e3, 16)


@dataclass
class CertReport:
    inequality: str
    s_values: list[float]
    log_lhs: list[float]
    log_rhs: list[float]
    log_ratio: list[float]
    n_draws: int
    n_vacuous: int
    s0: float | None
    log_C: float | None
    diverging: bool
    refinement: dict | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def C(self) -> float | None:
        if self.log_C is None:
            return None
        return math.exp(self.log_C) if self.log_C < 709 else math.inf

    @property
    def finite(self) -> bool:
        return self.log_C is not None and math.isfinite(self.log_C)

    @property
    def verdict(self) -> bool:
        ok = self.finite and self.s0 is not None and not self.diverging
        if self.refinement is not None:
            ok = ok and bool(self.refinement["stable"])
        return ok

    def to_dict(self) -> dict:
        return {
            "inequality": self.inequality, "s": self.s_values,
            "lhs": [math.exp(v) if v > -745 else 0.0 for v in self.log_lhs],
            "rhs": [math.exp(v) if v > -745 else 0.0 for v in self.log_rhs],
            "log_lhs": self.log_lhs, "log_rhs": self.log_rhs, "log_ratio": self.log_ratio,
            "n_draws": self.n_draws, "n_vacuous": self.n_vacuous,
            "s0": self.s0, "C": self.C, "log_C": self.log_C, "diverging": self.diverging,
            "refinement": self.refinement, "verdict": "pass" if self.verdict else "fail",
            "notes": self.notes,
        }

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "LHS", "RHS", "ratio", "log_LHS", "log_RHS", "log_ratio"])
        for s, l, r, q in zip(self.s_values, self.log_lhs, self.log_rhs, self.log_ratio):
            w.writerow([repr(s), repr(math.exp(l) if l > -745 else 0.0), repr(math.exp(r) if r > -745 else 0.0),
                        repr(math.exp(q) if -745 < q < 709 else (0.0 if q <= -745 else math.inf)),
                        repr(l), repr(r), repr(q)])
        return buf.getvalue()


def empirical_s0(s_values, log_ratio, tol: float = STABILIZE_TOL) -> tuple[float | None, float | None]:
    """Smallest s beyond which the ratio stays within ``tol`` of its last value.

    Works on log ratios; at least two grid points must lie in the tail.
    Returns ``(s0, log C)`` with C the largest ratio from s0 on.
    """
    lr = np.asarray(log_ratio, dtype=float)
    if lr.size < 2 or not np.all(np.isfinite(lr)):
        return None, None
    band = math.log1p(tol)
    close = np.abs(lr - lr[-1]) <= band
    k = lr.size - 1
    while k > 0 and close[k - 1]:
        k -= 1
    if k >= lr.size - 1:
        return None, float(lr.max())
    return float(s_values[k]), float(lr[k:].max())


def _diverging(s_values, log_ratio) -> bool:
    s = np.asarray(s_values)
    lr = np.asarray(log_ratio)
    top = s >= s[-1] / 10.0
    seg = lr[top]
    if seg.size < 2 or not np.all(np.isfinite(seg)):
        return False
    return bool(np.all(np.diff(seg) > 0) and seg[-1] - seg[0] > math.log(10.0))


def scan_s(variant: str, draws, config: ProblemConfig, params: WeightParams, s_grid,
           workers: int | None = None) -> CertReport:
    """Ratio of the two sides over ``s_grid``, worst case over the draws."""
    s_grid = [float(s) for s in s_grid]
    if len(s_grid) < 8:
        raise ValueError(f"s-grid too small: {len(s_grid)} points (need >= 8)")
    if any(b <= a for a, b in zip(s_grid, s_grid[1:])):
        raise ValueError("s-grid must be increasing")
    draws = list(draws)
    quad = LogQuadrature(config, params)

    def one(draw):
        traj, src = solve_draw(draw, config, variant)
        terms = carleman_terms(traj, variant, src, quad)
        return [terms.at(quad, s) for s in s_grid]

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            table = list(pool.map(one, draws))
    else:
        table = [one(d) for d in draws]

    live = [row for row in table if not all(e.vacuous for e in row)]
    n_vac = len(table) - len(live)
    lr, ll, lrh = [], [], []
    for j in range(len(s_grid)):
        entries = [row[j] for row in live if not row[j].vacuous]
        if not entries:
            lr.append(math.nan)
            ll.append(-math.inf)
            lrh.append(-math.inf)
            continue
        worst = max(entries, key=lambda e: e.log_ratio)
        lr.append(worst.log_ratio)
        ll.append(worst.log_lhs)
        lrh.append(worst.log_rhs)
    s0, logC = empirical_s0(s_grid, lr)
    notes = [f"quadrature excludes t nodes {quad.excluded['t_nodes']} and a node 0"]
    if s0 is None:
        notes.append("ratio did not stabilize within 10% over the s-grid")
    return CertReport(variant, s_grid, ll, lrh, lr, len(draws), n_vac, s0, logC, _diverging(s_grid, lr), notes=notes)


def refinement_factor(log_coarse: float | None, log_fine: float | None) -> float:
    """Relative change |C_fine / C_coarse - 1| computed from log constants."""
    if log_coarse is None or log_fine is None:
        return math.inf
    d = log_fine - log_coarse
    if not math.isfinite(d):
        return math.inf
    return math.expm1(abs(d)) if abs(d) < 700 else math.inf


def scan_with_refinement(variant: str, draws, config: ProblemConfig, s_grid, params_for=None,
                         workers: int | None = None, tol: float = REFINE_TOL) -> CertReport:
    """scan_s on the config and on one dyadic refinement; attaches the stability record."""
    from .weights import default_params

    params_for = params_for or (lambda c: default_params(c))
    draws = list(draws)
    coarse = scan_s(variant, draws, config, params_for(config), s_grid, workers)
    fine_cfg = config.refined()
    fine = scan_s(variant, draws, fine_cfg, params_for(fine_cfg), s_grid, workers)
    f = refinement_factor(coarse.log_C, fine.log_C)
    coarse.refinement = {
        "grid_fine": fine_cfg.grid.to_dict(), "log_C_fine": fine.log_C, "s0_fine": fine.s0,
        "factor": f, "tol": tol, "stable": f <= tol,
        "log_C_shift": None if coarse.log_C is None or fine.log_C is None else fine.log_C - coarse.log_C,
    }
    return coarse


# ---------------------------------------------------------------------------
# observability


def observability_quotient(uT, vT, config: ProblemConfig, params: WeightParams | None = None) -> float | None:
    """Initial adjoint energy over observation plus young terminal data.

    Returns ``None`` when the denominator is below 1e-30 (vacuous draw).
    ``params`` is accepted for interface symmetry and not used.
    """
    g = config.grid
    traj = solve_adjoint(uT, vT, RENEWAL, RENEWAL, config)
    u, v = traj.first, traj.second
    wt, wa, wx = (quadrature_weights(g, ax) for ax in ("t", "a", "x"))
    num = float(wa @ (u[0] ** 2 + v[0] ** 2) @ wx)
    wq = interval_weights(g.x, *config.omega)
    obs = float(np.einsum("nij,n,i,j->", u**2, wt, wa, wq))
    den = obs + _terminal_young(u[-1], v[-1], config)
    if den < 1e-30:
        return None
    return num / den


@dataclass
class ObservabilityReport:
    quotients: list[float | None]
    hum_cone_quotients: list[float | None]

    @property
    def C_delta(self) -> float | None:
        vals = [q for q in self.quotients if q is not None]
        return max(vals) if vals else None

    @property
    def hum_cone_finite(self) -> bool:
        return all(q is not None and math.isfinite(q) for q in self.hum_cone_quotients)

    def to_dict(self) -> dict:
        return {"C_delta": self.C_delta, "quotients": self.quotients,
                "n_vacuous": sum(q is None for q in self.quotients),
                "hum_cone_quotients": self.hum_cone_quotients, "hum_cone_finite": self.hum_cone_finite}


def observability_study(config: ProblemConfig, draws, hum_draws=(), workers: int | None = None) -> ObservabilityReport:
    def one(d):
        return observability_quotient(*d.fields(config), config)

    draws, hum_draws = list(draws), list(hum_draws)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            qs = list(pool.map(one, draws))
            hs = list(pool.map(one, hum_draws))
    else:
        qs = [one(d) for d in draws]
        hs = [one(d) for d in hum_draws]
    return ObservabilityReport(qs, hs)


# ---------------------------------------------------------------------------
# Hardy-Poincare


class EigenError(RuntimeError):
    pass


_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


def _first_cell_k_integral(k: DispersionSpec, h: float) -> float:
    """int_0^h k(x) dx, exact for closed forms."""
    if k.kind == "power":
        return k.coeff * h ** (k.alpha + 1) / (k.alpha + 1)
    if k.kind == "constant":
        return k.coeff * h
    xs = 0.5 * h * (_GL_X + 1)
    return float(np.sum(0.5 * h * _GL_W * k(xs)))


def hardy_matrices(k: DispersionSpec, n_x: int):
    """P1 stiffness K (int k w'^2) and weighted mass B (int k w^2 / x^2).

    Both are tridiagonal on the interior nodes, returned as (diag, off).
    """
    h = 1.0 / n_x
    x = np.linspace(0.0, 1.0, n_x + 1)
    xl = x[:-1, None]
    xs = xl + 0.5 * h * (_GL_X[None, :] + 1)
    ws = 0.5 * h * _GL_W[None, :]
    kq = k(xs)
    phiL = (xl + h - xs) / h
    phiR = (xs - xl) / h
    wk = ws * kq
    kint = wk.sum(axis=1)
    kint[0] = _first_cell_k_integral(k, h)
    with np.errstate(divide="ignore"):
        g = ws * kq / xs**2
    bLL = (g * phiL**2).sum(axis=1)
    bRR = (g * phiR**2).sum(axis=1)
    bLR = (g * phiL * phiR).sum(axis=1)
    bRR[0] = kint[0] / h**2  # k/x^2 (x/h)^2 = k/h^2 on the first cell
    m = n_x - 1
    Kd = (kint[:-1] + kint[1:]) / h**2
    Ko = -kint[1:-1] / h**2
    Bd = bRR[:-1] + bLL[1:]
    Bo = bLR[1:-1]
    assert Kd.size == m
    return (Kd, Ko), (Bd, Bo)


def _tri_matvec(d, o, w):
    out = d * w
    out[:-1] += o * w[1:]
    out[1:] += o * w[:-1]
    return out


def hardy_poincare_constant(k: DispersionSpec, grid: GridSpec | int, *, tol: float = 1e-12,
                            max_iter: int = 10_000) -> tuple[float, np.ndarray]:
    """Largest Rayleigh quotient int (k/x^2) w^2 / int k w_x^2 over the P1 space.

    Inverse iteration on the pencil ``K w = mu B w`` (smallest ``mu``) with
    tridiagonal solves.  Returns the constant ``1/mu`` and the extremizer on
    all nodes (unit max-norm, positive).
    """
    n_x = grid if isinstance(grid, int) else grid.n_x
    (Kd, Ko), (Bd, Bo) = hardy_matrices(k, n_x)
    ab = np.zeros((3, Kd.size))
    ab[0, 1:] = Ko
    ab[1] = Kd
    ab[2, :-1] = Ko
    x = np.linspace(0.0, 1.0, n_x + 1)[1:-1]
    w = np.sqrt(x) * (1 - x)
    lam_old = 0.0
    for it in range(max_iter):
        z = solve_banded((1, 1), ab, _tri_matvec(Bd, Bo, w))
        w = z / np.linalg.norm(z)
        lam = float(w @ _tri_matvec(Bd, Bo, w)) / float(w @ _tri_matvec(Kd, Ko, w))
        if it > 2 and abs(lam - lam_old) <= tol * abs(lam):
            full = np.concatenate([[0.0], w, [0.0]])
            full = full * np.sign(full[np.argmax(np.abs(full))])
            return lam, full / np.max(np.abs(full))
        lam_old = lam
    raise EigenError(f"inverse iteration did not converge in {max_iter} iterations")


def hardy_rayleigh(k: DispersionSpec, n_x: int, w_nodes: np.ndarray) -> float:
    """Discrete Rayleigh quotient of a P1 function given on all nodes."""
    (Kd, Ko), (Bd, Bo) = hardy_matrices(k, n_x)
    w = np.asarray(w_nodes, dtype=float)[1:-1]
    return float(w @ _tri_matvec(Bd, Bo, w)) / float(w @ _tri_matvec(Kd, Ko, w))


# ---------------------------------------------------------------------------
# Caccioppoli


@dataclass
class CaccioppoliEntry:
    s: float
    log_lhs: dict
    log_rhs: dict

    @property
    def vacuous(self) -> bool:
        return all(v <= VACUOUS_LOG for v in list(self.log_lhs.values()) + list(self.log_rhs.values()))

    def log_ratio(self, i: int) -> float:
        if self.vacuous:
            return math.nan
        return self.log_lhs[i] - self.log_rhs[i]

    def ratio(self, i: int) -> float:
        lr = self.log_ratio(i)
        return math.nan if math.isnan(lr) else math.exp(min(lr, 709.0))

    def to_dict(self) -> dict:
        return {"s": self.s, "vacuous": self.vacuous,
                "ratios": {f"phi{i}": self.ratio(i) for i in (1, 2)},
                "log_lhs": {f"phi{i}": self.log_lhs[i] for i in (1, 2)},
                "log_rhs": {f"phi{i}": self.log_rhs[i] for i in (1, 2)}}


def caccioppoli_check(traj: Trajectory, sources, params: WeightParams,
                      omega_prime: tuple[float, float]) -> CaccioppoliEntry:
    """Local gradient energy on omega' against the weighted zero-order terms."""
    config = traj.config
    lo, hi = omega_prime
    x1, x2 = config.omega
    if not (x1 < lo < hi < x2):
        raise CertConfigError(f"omega' = {omega_prime} is not compactly inside omega = {config.omega}")
    q = LogQuadrature(config, params)
    g = config.grid
    s = params.s
    u, v = traj.first, traj.second
    h1, h2 = (np.asarray(h) for h in sources)
    grad = q.interior(x_derivative(u, g.dx) ** 2 + x_derivative(v, g.dx) ** 2)
    zero = q.interior(u**2 + v**2)
    src = q.interior(h1**2 + h2**2)
    wp = interval_weights(g.x, lo, hi)
    lhs, rhs = {}, {}
    for i in (1, 2):
        wgt = f"phi{i}"
        lhs[i] = q.log_integral(grad, s, 0, wgt, wp)
        rhs[i] = _logadd(q.log_integral(zero, s, 2, wgt), q.log_integral(src, s, 0, wgt))
    return CaccioppoliEntry(s, lhs, rhs)


def caccioppoli_study(config: ProblemConfig, params: WeightParams, draws, omega_prime=None) -> dict:
    """Worst ratio over draws for i = 1, 2 (log values)."""
    omega_prime = omega_prime or config.omega1
    worst = {1: -math.inf, 2: -math.inf}
    n_vac = 0
    for d in draws:
        traj, src = solve_draw(d, config, "intermediate_2_16")
        e = caccioppoli_check(traj, src, params, omega_prime)
        if e.vacuous:
            n_vac += 1
            continue
        for i in (1, 2):
            worst[i] = max(worst[i], e.log_ratio(i))
    return {"s": params.s, "omega_prime": list(omega_prime), "n_vacuous": n_vac,
            "log_ratio": {f"phi{i}": worst[i] for i in (1, 2)},
            "ratio": {f"phi{i}": math.exp(worst[i]) if math.isfinite(worst[i]) else None for i in (1, 2)}}
