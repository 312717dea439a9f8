"""Penalized null-control synthesis.

For ``eps > 0`` the cost

    J(theta) = 1/(2 eps) int_0^1 int_delta^A (y(T)^2 + p(T)^2) + 1/2 int_q theta^2

is a strictly convex quadratic in the control.  It is minimized directly over
``theta`` by conjugate gradients in the q-weighted inner product, with the
gradient supplied by the exact discrete transpose of the forward map.  The
relation ``theta = -u chi_omega`` is checked afterwards as a certificate.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import Field2D, ProblemConfig, quadrature_weights
from .solver import (
    ControlField,
    StepOperators,
    control_weights,
    discrete_adjoint_apply,
    solve_forward,
    target_weights,
)

log = logging.getLogger(__name__)

DEFAULT_EPSILONS = (1e-1, 1e-2, 1e-3, 1e-4)
DEFAULT_TOL = 1e-8
RESTART_EVERY = 50


def _fields(y0, p0, config):
    g = config.grid
    y0 = y0.values if isinstance(y0, Field2D) else np.asarray(y0, dtype=float)
    p0 = p0.values if isinstance(p0, Field2D) else np.asarray(p0, dtype=float)
    return y0.reshape(g.field_shape), p0.reshape(g.field_shape)


def terminal_residuals(yT: np.ndarray, pT: np.ndarray, config: ProblemConfig) -> tuple[float, float]:
    """int_0^1 int_delta^A y(T)^2 and the same for p."""
    W = target_weights(config)
    return float(np.sum(W * yT**2)), float(np.sum(W * pT**2))


def young_residuals(yT: np.ndarray, pT: np.ndarray, config: ProblemConfig) -> tuple[float, float]:
    """The same integrals over ages (0, delta); informational only."""
    g = config.grid
    m = ~config.target_mask()
    m[0] = False
    W = np.outer(g.da * m, quadrature_weights(g, "x"))
    return float(np.sum(W * yT**2)), float(np.sum(W * pT**2))


def evaluate_J(control: ControlField, epsilon: float, y0, p0, config: ProblemConfig,
               ops: StepOperators | None = None) -> tuple[float, tuple[float, float]]:
    """J_eps at ``control`` and the two terminal residuals."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    y0, p0 = _fields(y0, p0, config)
    yT, pT = solve_forward(y0, p0, control, config, ops, record=False)
    ry, rp = terminal_residuals(yT, pT, config)
    energy = float(np.sum(control_weights(config) * control.values**2))
    return (ry + rp) / (2.0 * epsilon) + 0.5 * energy, (ry, rp)


def gradient_J(control: ControlField, epsilon: float, y0, p0, config: ProblemConfig,
               ops: StepOperators | None = None) -> ControlField:
    """Riesz representative of dJ in the q inner product."""
    ops = ops or StepOperators(config)
    y0, p0 = _fields(y0, p0, config)
    yT, pT = solve_forward(y0, p0, control, config, ops, record=False)
    adj = discrete_adjoint_apply(yT, pT, config, ops)
    return ControlField(control.values + adj.values / epsilon, config)


@dataclass
class HumResult:
    control: ControlField
    epsilon: float
    terminal_residual_y: float
    terminal_residual_p: float
    control_energy: float
    iterations: int
    optimality_gap: float
    converged: bool
    tol: float
    J_history: list[float] = field(default_factory=list)
    young_residual: tuple[float, float] = (0.0, 0.0)

    @property
    def terminal_residual(self) -> float:
        return self.terminal_residual_y + self.terminal_residual_p

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "converged": self.converged,
            "tol": self.tol,
            "J_history": list(self.J_history),
            "residuals": {"y": self.terminal_residual_y, "p": self.terminal_residual_p,
                          "total": self.terminal_residual},
            "young_residuals_info": {"y": self.young_residual[0], "p": self.young_residual[1]},
            "control_energy": self.control_energy,
            "optimality_gap": self.optimality_gap,
        }


def minimize_J(epsilon: float, y0, p0, config: ProblemConfig, tol: float = DEFAULT_TOL,
               max_iter: int = 2000) -> HumResult:
    """Polak-Ribiere conjugate gradients from theta = 0.

    The line search is exact because J is quadratic.  The search direction is
    reset to steepest descent every 50 iterations, with the gradient
    recomputed from scratch at that point.  Hitting ``max_iter`` flags the
    result as non-converged.
    """
    if epsilon <= 0 or tol <= 0:
        raise ValueError("epsilon and tol must be positive")
    ops = StepOperators(config)
    y0, p0 = _fields(y0, p0, config)
    wq = control_weights(config)
    zero = np.zeros(config.grid.field_shape)

    def ip(f, h):
        return float(np.sum(wq * f * h))

    def hess(d):
        yT, pT = solve_forward(zero, zero, ControlField(d, config), config, ops, record=False)
        return d + discrete_adjoint_apply(yT, pT, config, ops).values / epsilon

    g_ = config.grid
    theta = np.zeros((g_.n_t, g_.n_a + 1, g_.n_x + 1))
    J0, _ = evaluate_J(ControlField(theta, config), epsilon, y0, p0, config, ops)
    g = gradient_J(ControlField(theta, config), epsilon, y0, p0, config, ops).values
    g0 = math.sqrt(ip(g, g))
    history = [J0]
    it = 0
    gap = 0.0 if g0 == 0 else 1.0
    d = -g
    gg = ip(g, g)
    while gap > tol and it < max_iter:
        Hd = hess(d)
        dHd = ip(d, Hd)
        gd = ip(g, d)
        if dHd <= 0 or gd >= 0:
            d = -g
            continue
        alpha = -gd / dHd
        theta = theta + alpha * d
        it += 1
        history.append(history[-1] + alpha * gd + 0.5 * alpha**2 * dHd)
        if it % RESTART_EVERY == 0:
            g_new = gradient_J(ControlField(theta, config), epsilon, y0, p0, config, ops).values
            gg_new = ip(g_new, g_new)
            d = -g_new
        else:
            g_new = g + alpha * Hd
            gg_new = ip(g_new, g_new)
            beta = max(0.0, (gg_new - ip(g_new, g)) / gg)
            d = -g_new + beta * d
        g, gg = g_new, gg_new
        gap = math.sqrt(gg) / g0
        log.debug("eps=%g it=%d gap=%.3e J=%.6e", epsilon, it, gap, history[-1])

    control = ControlField(theta, config)
    yT, pT = solve_forward(y0, p0, control, config, ops, record=False)
    ry, rp = terminal_residuals(yT, pT, config)
    if g0 > 0:
        g_true = gradient_J(control, epsilon, y0, p0, config, ops).values
        gap = math.sqrt(ip(g_true, g_true)) / g0
    return HumResult(
        control=control,
        epsilon=epsilon,
        terminal_residual_y=ry,
        terminal_residual_p=rp,
        control_energy=ip(theta, theta),
        iterations=it,
        optimality_gap=gap,
        converged=gap <= tol,
        tol=tol,
        J_history=history,
        young_residual=young_residuals(yT, pT, config),
    )


def optimality_certificate(result: HumResult, y0, p0, config: ProblemConfig) -> float:
    """||theta + u chi_omega||_q / ||theta||_q with u from one adjoint pass.

    ``u`` solves the discrete adjoint with terminal data y(T)/eps,
    p(T)/eps on the target ages.  Returns 0 for the trivial control.
    """
    ops = StepOperators(config)
    y0, p0 = _fields(y0, p0, config)
    yT, pT = solve_forward(y0, p0, result.control, config, ops, record=False)
    u = discrete_adjoint_apply(yT / result.epsilon, pT / result.epsilon, config, ops).values
    th = result.control.values
    wq = control_weights(config)
    num = math.sqrt(float(np.sum(wq * (th + u) ** 2)))
    den = math.sqrt(float(np.sum(wq * th**2)))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def baseline_residual(y0, p0, config: ProblemConfig) -> tuple[float, float]:
    """Terminal residuals of the uncontrolled run."""
    y0, p0 = _fields(y0, p0, config)
    yT, pT = solve_forward(y0, p0, None, config, record=False)
    return terminal_residuals(yT, pT, config)


@dataclass
class SweepReport:
    results: list[HumResult]
    data_norm_sq: float
    baseline: tuple[float, float]
    checks: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def rows(self) -> list[dict]:
        out = []
        for r in self.results:
            res = r.terminal_residual
            out.append({
                "epsilon": r.epsilon,
                "residual_y": r.terminal_residual_y,
                "residual_p": r.terminal_residual_p,
                "control_energy": r.control_energy,
                "residual_over_eps": res / r.epsilon,
                "C_fit_residual": res / (r.epsilon * self.data_norm_sq) if self.data_norm_sq else 0.0,
                "C_fit_energy": 0.75 * r.control_energy / self.data_norm_sq if self.data_norm_sq else 0.0,
                "iterations": r.iterations,
                "converged": r.converged,
                "optimality_gap": r.optimality_gap,
            })
        return out

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": self.checks, "data_norm_sq": self.data_norm_sq,
                "baseline": {"y": self.baseline[0], "p": self.baseline[1]}, "rows": self.rows()}


def epsilon_sweep(y0, p0, config: ProblemConfig, epsilons=DEFAULT_EPSILONS, tol: float = DEFAULT_TOL,
                  max_iter: int = 2000, workers: int | None = None) -> SweepReport:
    """minimize_J for every epsilon (given in decreasing order).

    Entries may run on a thread pool; the report order always follows
    ``epsilons``.
    """
    eps = [float(e) for e in epsilons]
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be positive and strictly decreasing")
    y0, p0 = _fields(y0, p0, config)

    def run(e):
        return minimize_J(e, y0, p0, config, tol=tol, max_iter=max_iter)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, eps))
    else:
        results = [run(e) for e in eps]

    g = config.grid
    wa, wx = quadrature_weights(g, "a"), quadrature_weights(g, "x")
    norm = float(wa @ (y0**2 + p0**2) @ wx)
    res = [r.terminal_residual for r in results]
    ratios = [r.terminal_residual / r.epsilon for r in results]
    energies = [r.control_energy for r in results]
    positive = [q for q in ratios if q > 0]
    nonzero_e = [e for e in energies if e > 0]
    checks = {
        "all_converged": all(r.converged for r in results),
        "residuals_nonincreasing": all(b <= a + 1e-10 for a, b in zip(res, res[1:])),
        "residual_over_eps_within_10x": (not positive) or max(positive) <= 10.0 * min(positive),
        "control_energy_within_2x": (not nonzero_e) or max(nonzero_e) <= 2.0 * min(nonzero_e),
    }
    return SweepReport(results, norm, baseline_residual(y0, p0, config), checks)
