"""Carleman weight functions and their parameter constraints.

With ``Theta(t, a) = 1 / ((t (T - t))**4 a**4)`` the weights are

    psi_i(x)   = lambda_i * (int_0^x r / k_i(r) dr - d_i)
    phi_i      = Theta * psi_i
    small_phi  = Theta * exp(kappa * sigma(x))
    Psi(x)     = exp(kappa * sigma(x)) - exp(2 kappa |sigma|_inf)
    Phi        = Theta * Psi

``sigma`` is a cubic bump whose only interior critical point sits at the
midpoint of ``omega1``.  Every quantity that ends up inside an exponential is
handled in log space by the callers (see :mod:`cascadelab.certify`).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .model import DispersionSpec, GridSpec, ProblemConfig

LN2 = math.log(2.0)
EXP_FLOOR = -700.0


class WeightError(ValueError):
    """Construction or evaluation failure for a weight function."""


class SingularityError(WeightError):
    """Theta evaluated on t = 0, t = T or a = 0."""


# ---------------------------------------------------------------------------
# sigma


@dataclass(frozen=True)
class SigmaFunction:
    """sigma(x) = x (1 - x) (1 + b x)."""

    b: float
    critical_point: float
    omega0: tuple[float, float]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x * (1.0 - x) * (1.0 + self.b * x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 + 2.0 * (self.b - 1.0) * x - 3.0 * self.b * x**2

    @property
    def sigma_inf(self) -> float:
        return float(self(self.critical_point))


def _sigma_slope_at(b: float, xc: float) -> float:
    return 1.0 + 2.0 * (b - 1.0) * xc - 3.0 * b * xc**2


def build_sigma(omega1: tuple[float, float], grid: GridSpec) -> SigmaFunction:
    """Cubic sigma with its interior maximum at the midpoint of ``omega1``.

    ``omega0`` is the closed middle third of ``omega1``.  The family
    x(1-x)(1+bx) stays positive on (0, 1) only for b > -1, which limits the
    reachable critical points to (1/3, 2/3).
    """
    lo, hi = omega1
    if not (0.0 < lo < hi < 1.0):
        raise WeightError(f"omega1 = {omega1} is not inside (0, 1)")
    xc = 0.5 * (lo + hi)
    third = (hi - lo) / 3.0
    omega0 = (lo + third, hi - third)

    f = lambda b: _sigma_slope_at(b, xc)  # noqa: E731
    b_lo, b_hi = -1.0 + 1e-12, 1e8
    if f(b_lo) * f(b_hi) > 0:
        raise WeightError(
            f"no b > -1 puts the critical point of x(1-x)(1+bx) at {xc:.6g}; "
            "midpoint of omega1 must lie in (1/3, 2/3)"
        )
    b = brentq(f, b_lo, b_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    sig = SigmaFunction(b=float(b), critical_point=xc, omega0=omega0)

    x = grid.x
    vals = sig(x[1:-1])
    bad = np.flatnonzero(vals <= 0)
    if bad.size:
        j = bad[0] + 1
        raise WeightError(f"sigma <= 0 at node {j} (x = {x[j]:.6g})")
    outside = (x < omega0[0]) | (x > omega0[1])
    slope = sig.derivative(x)
    bad = np.flatnonzero(outside & (slope == 0.0))
    if bad.size:
        raise WeightError(f"sigma_x vanishes at node {bad[0]} (x = {x[bad[0]]:.6g}) outside omega0")
    return sig


# ---------------------------------------------------------------------------
# Theta and psi


def log_theta(t, a, T: float):
    """log Theta(t, a); raises on the singular lines."""
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any(t <= 0) or np.any(t >= T) or np.any(a <= 0):
        raise SingularityError("Theta is singular at t in {0, T} and a = 0; use interior nodes")
    return -4.0 * np.log(t * (T - t)) - 4.0 * np.log(a)


def theta(t, a, T: float):
    """Theta(t, a) = 1 / ((t (T - t))**4 a**4).

    >>> float(theta(0.5, 1.0, 1.0))
    256.0
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any(t <= 0) or np.any(t >= T) or np.any(a <= 0):
        raise SingularityError("Theta is singular at t in {0, T} and a = 0; use interior nodes")
    return 1.0 / ((t * (T - t)) ** 4 * a**4)


def theta_min(T: float, A: float) -> float:
    """Smallest value of Theta on (0, T) x (0, A)."""
    return 256.0 / (T**8 * A**4)


def _graded_cumulative(k: DispersionSpec, m: int) -> tuple[np.ndarray, np.ndarray]:
    s = np.linspace(0.0, 1.0, m + 1)
    r = s**3  # graded toward 0 where r / k has an unbounded slope
    with np.errstate(divide="ignore", invalid="ignore"):
        f = r / k(r)
    if k.kind == "tabulated":
        # r / k -> 1 / k'(0+) for a piecewise-linear table with k(0) = 0
        slope0 = float(k.derivative(np.array([0.0]))[0])
        f[0] = 1.0 / slope0 if slope0 > 0 else np.inf
    else:
        f[0] = 0.0
    if not np.all(np.isfinite(f)):
        raise WeightError("int_0^x r / k(r) dr diverges: k vanishes inside (0, 1] or too fast at 0")
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(r))])
    return r, cum


def r_over_k_integral(k: DispersionSpec, x, *, rtol: float = 1e-10, max_level: int = 22) -> np.ndarray:
    """int_0^x r / k(r) dr.

    Closed form for the power and constant kinds; graded adaptive trapezoid
    for tabulated tables.
    """
    x = np.asarray(x, dtype=float)
    if k.kind == "power":
        p = 2.0 - k.alpha
        return np.power(x, p) / (k.coeff * p)
    if k.kind == "constant":
        return x**2 / (2.0 * k.coeff)
    m = 1024
    r, cum = _graded_cumulative(k, m)
    prev = np.interp(x, r, cum)
    for _ in range(max_level):
        m *= 2
        r, cum = _graded_cumulative(k, m)
        cur = np.interp(x, r, cum)
        if np.max(np.abs(cur - prev)) <= rtol * max(1.0, float(np.max(np.abs(cur)))):
            return cur
        prev = cur
        if m > 2**24:
            break
    raise WeightError("graded trapezoid for int_0^x r / k(r) dr did not converge")


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class WeightParams:
    lambda1: float
    lambda2: float
    d1: float
    d2: float
    kappa: float
    s: float
    sigma: SigmaFunction
    k1: DispersionSpec
    k2: DispersionSpec

    def with_s(self, s: float) -> WeightParams:
        return replace(self, s=float(s))

    def with_lambda2(self, lambda2: float) -> WeightParams:
        return replace(self, lambda2=float(lambda2))

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "d1": self.d1,
            "d2": self.d2,
            "kappa": self.kappa,
            "s": self.s,
            "sigma": {"b": self.sigma.b, "critical_point": self.sigma.critical_point,
                      "sigma_inf": self.sigma.sigma_inf, "omega0": list(self.sigma.omega0)},
        }


@dataclass(frozen=True)
class Lambda2Interval:
    lo: float
    hi: float
    hypotheses_met: bool

    def contains(self, lam: float) -> bool:
        return self.lo <= lam < self.hi


def lambda2_interval(d2: float, kappa: float, sigma: SigmaFunction, k2: DispersionSpec) -> Lambda2Interval:
    """Admissible half-open interval [lo, hi) for lambda2.

    When ``d2`` and ``kappa`` meet their lower bounds the interval must be
    nonempty; an empty one is treated as an internal bug.
    """
    k21 = float(k2(1.0))
    g = k2.gamma
    e1 = math.exp(kappa * sigma.sigma_inf)
    e2 = e1 * e1
    lo = k21 * (2.0 - g) * (e2 - 1.0) / (d2 * k21 * (2.0 - g) - 1.0)
    hi = 4.0 * (e2 - e1) / (3.0 * d2)
    met = d2 >= 5.0 / (k21 * (2.0 - g)) and kappa * sigma.sigma_inf >= 4.0 * LN2 * (1 - 1e-15)
    if met and not lo < hi:
        raise AssertionError(f"lambda2 interval empty under valid hypotheses: lo={lo}, hi={hi}")
    return Lambda2Interval(lo=lo, hi=hi, hypotheses_met=met)


def default_params(config: ProblemConfig, s: float = 1.0) -> WeightParams:
    """Deterministic parameters meeting every constraint with safety factors."""
    k1, k2 = config.k1, config.k2
    sigma = build_sigma(config.omega1, config.grid)
    d2 = 1.01 * 5.0 / (float(k2(1.0)) * (2.0 - k2.gamma))
    kappa = 4.0 * LN2 / sigma.sigma_inf
    iv = lambda2_interval(d2, kappa, sigma, k2)
    lambda2 = 0.5 * (iv.lo + iv.hi)
    d1 = 1.1 / (float(k1(1.0)) * (2.0 - k1.gamma))
    gap = d1 - float(r_over_k_integral(k1, 1.0))
    if gap <= 0:
        raise WeightError(f"d1 - int_0^1 r/k1 = {gap:.4g} <= 0; default d1 too small for this k1")
    lambda1 = 1.01 * lambda2 * d2 / gap
    return WeightParams(lambda1, lambda2, d1, d2, kappa, float(s), sigma, k1, k2)


@dataclass
class ConstraintCheck:
    clause: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"clause": self.clause, "passed": self.passed, "detail": self.detail}


def check_constraints(params: WeightParams) -> list[ConstraintCheck]:
    p = params
    k1_1, k2_1 = float(p.k1(1.0)), float(p.k2(1.0))
    d1_min = 1.0 / (k1_1 * (2.0 - p.k1.gamma))
    d2_min = 5.0 / (k2_1 * (2.0 - p.k2.gamma))
    kap_min = 4.0 * LN2 / p.sigma.sigma_inf
    integral = float(r_over_k_integral(p.k1, 1.0))
    gap = p.d1 - integral
    iv = lambda2_interval(p.d2, p.kappa, p.sigma, p.k2)
    ratio_ok = gap > 0 and p.lambda1 / p.lambda2 >= p.d2 / gap
    return [
        ConstraintCheck("d1 > 1/(k1(1)(2-gamma))", p.d1 > d1_min, f"d1 = {p.d1:.6g}, bound {d1_min:.6g}"),
        ConstraintCheck("d2 >= 5/(k2(1)(2-gamma))", p.d2 >= d2_min, f"d2 = {p.d2:.6g}, bound {d2_min:.6g}"),
        ConstraintCheck("kappa >= 4 ln2 / |sigma|_inf", p.kappa >= kap_min * (1 - 1e-15), f"kappa = {p.kappa:.6g}, bound {kap_min:.6g}"),
        ConstraintCheck("lambda1/lambda2 >= d2/(d1 - int_0^1 r/k1)", bool(ratio_ok),
                        f"ratio {p.lambda1 / p.lambda2:.6g}, gap {gap:.6g}"),
        ConstraintCheck("lambda2 in [lo, hi)", iv.contains(p.lambda2), f"lambda2 = {p.lambda2:.6g}, I = [{iv.lo:.6g}, {iv.hi:.6g})"),
        ConstraintCheck("s > 0", p.s > 0, f"s = {p.s:.6g}"),
    ]


# ---------------------------------------------------------------------------
# evaluation


def psi(i: int, x, params: WeightParams, k: DispersionSpec | None = None):
    """psi_i(x) = lambda_i (int_0^x r/k_i dr - d_i)."""
    if i not in (1, 2):
        raise ValueError("i must be 1 or 2")
    k = k if k is not None else (params.k1 if i == 1 else params.k2)
    lam, d = (params.lambda1, params.d1) if i == 1 else (params.lambda2, params.d2)
    return lam * (r_over_k_integral(k, x) - d)


def big_psi(x, params: WeightParams):
    """Psi(x) = exp(kappa sigma) - exp(2 kappa |sigma|_inf)."""
    return np.exp(params.kappa * params.sigma(x)) - math.exp(2.0 * params.kappa * params.sigma.sigma_inf)


def weights_at(t, a, x, params: WeightParams, T: float) -> dict[str, np.ndarray]:
    """phi1, phi2, small_phi and Phi at (broadcast) points (t, a, x)."""
    th = theta(t, a, T)
    x = np.asarray(x, dtype=float)
    return {
        "phi1": th * psi(1, x, params),
        "phi2": th * psi(2, x, params),
        "small_phi": th * np.exp(params.kappa * params.sigma(x)),
        "Phi": th * big_psi(x, params),
    }


def carleman_factor(s: float, phi) -> np.ndarray:
    """exp(2 s phi); underflows to 0 (never NaN) where phi is very negative."""
    with np.errstate(under="ignore"):
        return np.exp(2.0 * s * np.asarray(phi, dtype=float))


def clamped_exp(log_value) -> np.ndarray:
    """exp of a log-space magnitude with the exponent floored at -700."""
    return np.exp(np.maximum(np.asarray(log_value, dtype=float), EXP_FLOOR))


@dataclass
class OrderingReport:
    margins: dict[str, float]
    worst_node: dict[str, float]
    header: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        m = self.margins
        return m["psi1 <= psi2"] >= 0 and m["(4/3)Psi < psi2"] > 0 and m["psi2 <= Psi"] >= 0

    def to_dict(self) -> dict:
        return {"passed": self.passed, "margins": self.margins,
                "worst_node": self.worst_node, "header": self.header}


def check_orderings(params: WeightParams, grid: GridSpec) -> OrderingReport:
    """Worst margin at the x-nodes of psi1 <= psi2 and (4/3) Psi < psi2 <= Psi."""
    x = grid.x
    p1, p2, P = psi(1, x, params), psi(2, x, params), big_psi(x, params)
    gaps = {
        "psi1 <= psi2": p2 - p1,
        "(4/3)Psi < psi2": p2 - 4.0 / 3.0 * P,
        "psi2 <= Psi": P - p2,
    }
    margins = {k: float(v.min()) for k, v in gaps.items()}
    worst = {k: float(x[int(np.argmin(v))]) for k, v in gaps.items()}
    header = []
    iv = lambda2_interval(params.d2, params.kappa, params.sigma, params.k2)
    if not iv.contains(params.lambda2):
        side = "above hi" if params.lambda2 >= iv.hi else "below lo"
        header.append(f"lambda2 = {params.lambda2:.6g} is {side} of [{iv.lo:.6g}, {iv.hi:.6g}): "
                      "(4/3)Psi < psi2 is unguaranteed")
    if not all(c.passed for c in check_constraints(params)):
        header.append("parameter constraints unmet; orderings are unguaranteed")
    return OrderingReport(margins, worst, header)


def decay_exponent_sup(params: WeightParams, grid: GridSpec, p: int, combo: str = "2Phi-phi2") -> float:
    """log of sup over interior nodes of s^p Theta^p exp(2 s (c1 Phi - c2 phi2)).

    ``combo`` is ``"2Phi-phi2"`` or ``"4Phi-3phi2"``.  Both combinations are
    negative multiples of Theta under the orderings, so the sup is finite.
    """
    c1, c2 = {"2Phi-phi2": (2.0, 1.0), "4Phi-3phi2": (4.0, 3.0)}[combo]
    t, a, x = grid.t[1:-1], grid.a[1:], grid.x
    lt = log_theta(t[:, None], a[None, :], grid.T)[..., None]
    comb = c1 * big_psi(x, params) - c2 * psi(2, x, params)
    s = params.s
    val = p * math.log(s) + p * lt + 2.0 * s * np.exp(lt) * comb[None, None, :]
    return float(val.max())


def weights_csv(params: WeightParams, grid: GridSpec, t_indices=None) -> str:
    """CSV snapshot of every weight at interior (t, a) nodes and all x nodes."""
    t_idx = range(1, grid.n_t) if t_indices is None else t_indices
    x = grid.x
    p1, p2, sig, P = psi(1, x, params), psi(2, x, params), params.sigma(x), big_psi(x, params)
    ephi = np.exp(params.kappa * sig)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "a", "x", "Theta", "psi1", "psi2", "sigma", "Psi", "phi1", "phi2", "Phi", "small_phi"])
    for n in t_idx:
        for i in range(1, grid.n_a + 1):
            th = float(theta(grid.t[n], grid.a[i], grid.T))
            for j in range(x.size):
                w.writerow([repr(v) for v in (
                    grid.t[n], grid.a[i], x[j], th, p1[j], p2[j], sig[j], P[j],
                    th * p1[j], th * p2[j], th * P[j], th * ephi[j])])
    return buf.getvalue()
