"""Time stepping for the cascade system and its adjoint.

One forward step ``t_{n-1} -> t_n`` (``dt == da``):

1. shift every age row to its successor (exact transport),
2. backward Euler for ``y`` on rows ``1..n_a``:
   ``(I - dt D1 + dt mu1) y' = y_shift + dt chi_omega theta``,
3. backward Euler for ``p`` with the cascade source ``-dt mu3 y'``,
4. renewal fill of the ``a = 0`` row by trapezoid in age.

``D`` is the conservative flux stencil of ``(k u_x)_x`` on interior x nodes.
It is symmetric, so the backward step in :func:`discrete_adjoint_apply` reuses
the same factorizations and is the exact transpose of the forward map.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import lapack

from .model import Field2D, ProblemConfig, quadrature_weights

log = logging.getLogger(__name__)

RENEWAL = "renewal"


class SolverError(RuntimeError):
    """Breakdown of a time step (bad row or non-finite values)."""


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class ControlField:
    """Control values for every step, shape ``(n_t, n_a + 1, n_x + 1)``.

    Index ``n - 1`` holds the control used by step ``n`` (time ``t_n``).
    Entries outside omega and on the ``a = 0`` row are zero.
    """

    values: np.ndarray
    config: ProblemConfig

    def __post_init__(self):
        g = self.config.grid
        v = np.array(self.values, dtype=float)
        want = (g.n_t, g.n_a + 1, g.n_x + 1)
        if v.shape != want:
            raise ValueError(f"control shape {v.shape} != {want}")
        if not np.all(np.isfinite(v)):
            raise ValueError("control has non-finite entries")
        v *= support_mask(self.config)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, config: ProblemConfig) -> ControlField:
        g = config.grid
        return cls(np.zeros((g.n_t, g.n_a + 1, g.n_x + 1)), config)


def support_mask(config: ProblemConfig) -> np.ndarray:
    """0/1 mask of the control support, broadcastable to a ControlField."""
    g = config.grid
    m = np.zeros((1, g.n_a + 1, g.n_x + 1))
    m[0, 1:, :] = config.omega_mask()[None, :]
    return m


@dataclass(frozen=True)
class Trajectory:
    """Paired fields at every time node; arrays of shape ``(n_t + 1, n_a + 1, n_x + 1)``."""

    first: np.ndarray
    second: np.ndarray
    direction: Literal["forward", "backward"]
    config: ProblemConfig

    @property
    def n_slices(self) -> int:
        return self.first.shape[0]

    def slice(self, n: int) -> tuple[Field2D, Field2D]:
        g = self.config.grid
        return Field2D(self.first[n], g), Field2D(self.second[n], g)

    def norms(self) -> np.ndarray:
        """||(first, second)(t_n)||^2 for every time node."""
        g = self.config.grid
        wa, wx = quadrature_weights(g, "a"), quadrature_weights(g, "x")
        return np.einsum("nij,i,j->n", self.first**2 + self.second**2, wa, wx)

    def slice_csv(self, n: int) -> str:
        g = self.config.grid
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "a", "x", "first", "second"])
        for i, a in enumerate(g.a):
            for j, x in enumerate(g.x):
                w.writerow([repr(float(g.t[n])), repr(float(a)), repr(float(x)),
                            repr(float(self.first[n, i, j])), repr(float(self.second[n, i, j]))])
        return buf.getvalue()

    def manifest(self) -> dict:
        g = self.config.grid
        return {"direction": self.direction, "grid": g.to_dict(), "T": g.T, "A": g.A,
                "times": [float(t) for t in g.t], "norms_sq": [float(v) for v in self.norms()]}


# ---------------------------------------------------------------------------
# step operators


def _face_coeffs(k_faces: np.ndarray, dx: float, dt: float):
    """Off-diagonal and diagonal parts of -dt D on interior nodes."""
    lower = k_faces[:-1]  # k_{j-1/2} for j = 1 .. n_x - 1
    upper = k_faces[1:]   # k_{j+1/2}
    diag = dt * (lower + upper) / dx**2
    off = -dt * k_faces[1:-1] / dx**2  # coupling j <-> j+1
    return diag, off


class _Factor:
    """Factorized stack of symmetric tridiagonal systems, one per age row."""

    def __init__(self, diag_stack: np.ndarray, off: np.ndarray, label: str, step: int):
        n_rows, m = diag_stack.shape
        self.shape = (n_rows, m)
        e = np.zeros((n_rows, m))
        e[:, :-1] = off[None, :]
        d = diag_stack.ravel()
        e = e.ravel()[:-1]
        self._d, self._e, info = lapack.dpttrf(d, e)
        if info != 0:
            row = (info - 1) // m + 1
            raise SolverError(f"{label} step {step}: factorization failed in age row {row}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x, info = lapack.dpttrs(self._d, self._e, rhs.reshape(-1))
        if info != 0:
            raise SolverError(f"tridiagonal solve failed (info={info})")
        return x.reshape(self.shape)


class StepOperators:
    """Per-step matrices, couplings and renewal weights for one config."""

    def __init__(self, config: ProblemConfig):
        self.config = config
        g = config.grid
        self.g = g
        dt, dx = g.dt, g.dx
        self.diag1, self.off1 = _face_coeffs(config.k1.at_faces(g), dx, dt)
        self.diag2, self.off2 = _face_coeffs(config.k2.at_faces(g), dx, dt)
        self.wa = quadrature_weights(g, "a")
        self._cache: dict = {}

    def _rate(self, name: str, n: int) -> np.ndarray:
        """Rate at time t_n on (age, interior x), shape (n_a + 1, n_x - 1)."""
        arr = self.config.rate(name)
        arr = arr[min(n, arr.shape[0] - 1)]
        return np.broadcast_to(arr, (self.g.n_a + 1, self.g.n_x + 1))[:, 1:-1]

    def _key(self, name: str, n: int):
        return (name, n if self.config.rate(name).shape[0] > 1 else 0)

    def factor(self, which: int, n: int) -> _Factor:
        mu = "mu1" if which == 1 else "mu2"
        key = ("M",) + self._key(mu, n)
        if key not in self._cache:
            rate = self._rate(mu, n)[1:]
            reaction = 1.0 + self.g.dt * rate
            bad = np.argwhere(reaction <= 0.0)
            if bad.size:
                i, j = bad[0]
                raise SolverError(
                    f"step {n}: equation {which} row a-index {i + 1}, x-index {j + 1} is not "
                    f"diagonally dominant (1 + dt*{mu} = {reaction[i, j]:.3g})"
                )
            diag = (self.diag1 if which == 1 else self.diag2)[None, :] + reaction
            off = self.off1 if which == 1 else self.off2
            self._cache[key] = _Factor(diag, off, f"equation {which}", n)
        return self._cache[key]

    def coupling(self, n: int) -> np.ndarray:
        """dt * mu3 on rows 1..n_a, interior x."""
        key = ("C",) + self._key("mu3", n)
        if key not in self._cache:
            self._cache[key] = self.g.dt * self._rate("mu3", n)[1:]
        return self._cache[key]

    def renewal(self, which: int, n: int) -> np.ndarray:
        """Trapezoid weight times fertility on rows 1..n_a, interior x."""
        beta = "beta1" if which == 1 else "beta2"
        key = ("R",) + self._key(beta, n)
        if key not in self._cache:
            self._cache[key] = self.wa[1:, None] * self._rate(beta, n)[1:]
        return self._cache[key]


def _check_finite(n: int, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise SolverError(f"non-finite values at step {n}")


# ---------------------------------------------------------------------------
# forward


def _as_array(f, shape) -> np.ndarray:
    v = f.values if isinstance(f, Field2D) else np.asarray(f, dtype=float)
    if v.shape != shape:
        raise ValueError(f"field shape {v.shape} != {shape}")
    return v


def solve_forward(y0, p0, control: ControlField | None, config: ProblemConfig,
                  ops: StepOperators | None = None, *, record: bool = True):
    """Discrete solution of the controlled cascade system.

    Returns a :class:`Trajectory`; with ``record=False`` only the terminal
    pair ``(y(T), p(T))`` is returned.
    """
    g = config.grid
    ops = ops or StepOperators(config)
    y = _as_array(y0, g.field_shape).copy()
    p = _as_array(p0, g.field_shape).copy()
    y[:, [0, -1]] = 0.0
    p[:, [0, -1]] = 0.0
    theta = None
    if control is not None:
        theta = control.values
    if record:
        Y = np.empty(g.space_time_shape)
        P = np.empty(g.space_time_shape)
        Y[0], P[0] = y, p
    dt = g.dt
    for n in range(1, g.n_t + 1):
        rhs_y = y[:-1, 1:-1].copy()  # shift: row i <- row i - 1
        if theta is not None:
            rhs_y += dt * theta[n - 1, 1:, 1:-1]
        ynew = ops.factor(1, n).solve(rhs_y)
        pnew = ops.factor(2, n).solve(p[:-1, 1:-1] - ops.coupling(n) * ynew)
        y = np.zeros(g.field_shape)
        p = np.zeros(g.field_shape)
        y[1:, 1:-1] = ynew
        p[1:, 1:-1] = pnew
        y[0, 1:-1] = np.sum(ops.renewal(1, n) * ynew, axis=0)
        p[0, 1:-1] = np.sum(ops.renewal(2, n) * pnew, axis=0)
        _check_finite(n, y, p)
        if record:
            Y[n], P[n] = y, p
    if record:
        return Trajectory(Y, P, "forward", config)
    return y, p


# ---------------------------------------------------------------------------
# backward


def _backward(uT, vT, h1, h2, config: ProblemConfig, ops: StepOperators, record: bool):
    """Shared backward kernel.

    ``h1``/``h2`` are source arrays of shape (n_t + 1, n_a + 1, n_x + 1),
    ``None`` for zero, or :data:`RENEWAL` for the trace rule -beta u(t, 0).
    Returns (U, V, G) where G[n - 1] = chi_omega * (solved u-row at step n).
    """
    g = config.grid
    dt = g.dt
    u = _as_array(uT, g.field_shape).copy()
    v = _as_array(vT, g.field_shape).copy()
    u[:, [0, -1]] = 0.0
    v[:, [0, -1]] = 0.0
    mask = config.omega_mask()[1:-1]
    G = np.zeros((g.n_t, g.n_a + 1, g.n_x + 1))
    if record:
        U = np.empty(g.space_time_shape)
        V = np.empty(g.space_time_shape)
        U[-1], V[-1] = u, v
    for n in range(g.n_t, 0, -1):
        up = u[1:, 1:-1].copy()
        vp = v[1:, 1:-1].copy()
        if isinstance(h1, str):
            up += ops.renewal(1, n) * u[0, 1:-1][None, :]
        elif h1 is not None:
            up -= dt * h1[n, 1:, 1:-1]
        if isinstance(h2, str):
            vp += ops.renewal(2, n) * v[0, 1:-1][None, :]
        elif h2 is not None:
            vp -= dt * h2[n, 1:, 1:-1]
        vt = ops.factor(2, n).solve(vp)
        ut = ops.factor(1, n).solve(up - ops.coupling(n) * vt)
        G[n - 1, 1:, 1:-1] = ut * mask
        u = np.zeros(g.field_shape)
        v = np.zeros(g.field_shape)
        u[:-1, 1:-1] = ut  # shift: row i - 1 <- row i, row n_a stays 0
        v[:-1, 1:-1] = vt
        _check_finite(n, u, v)
        if record:
            U[n - 1], V[n - 1] = u, v
    if record:
        return U, V, G
    return u, v, G


def _source_array(h, config):
    if h is None or isinstance(h, str):
        if isinstance(h, str) and h != RENEWAL:
            raise ValueError(f"unknown source rule {h!r}")
        return h
    arr = np.asarray(h, dtype=float)
    if arr.shape != config.grid.space_time_shape:
        raise ValueError(f"source shape {arr.shape} != {config.grid.space_time_shape}")
    return arr


def solve_adjoint(uT, vT, h1, h2, config: ProblemConfig, ops: StepOperators | None = None) -> Trajectory:
    """Backward march of the adjoint system from terminal data at t = T.

    Pass ``h1 = h2 = RENEWAL`` for the renewal-trace sources -beta_i u_i(t, 0),
    arrays for prescribed sources, or ``None`` for zero.  Within a step ``v``
    is solved before ``u``.
    """
    ops = ops or StepOperators(config)
    U, V, _ = _backward(uT, vT, _source_array(h1, config), _source_array(h2, config), config, ops, True)
    return Trajectory(U, V, "backward", config)


def target_weights(config: ProblemConfig) -> np.ndarray:
    """Quadrature weights of the terminal target on (delta, A) x (0, 1)."""
    g = config.grid
    wa = g.da * config.target_mask()
    return np.outer(wa, quadrature_weights(g, "x"))


def control_weights(config: ProblemConfig) -> np.ndarray:
    """Quadrature weights of the inner product on q, shaped like a ControlField."""
    g = config.grid
    return g.dt * g.da * g.dx * support_mask(config)


def q_inner(f: np.ndarray, h: np.ndarray, config: ProblemConfig) -> float:
    return float(np.sum(control_weights(config) * f * h))


def discrete_adjoint_apply(residual_y, residual_p, config: ProblemConfig,
                           ops: StepOperators | None = None) -> ControlField:
    """Exact transpose of theta -> (y(T), p(T)) restricted to the target.

    For every control ``theta`` with zero initial data,
    ``<(y(T), p(T)) chi_target, (r_y, r_p)> == <theta, result>_q``.
    """
    ops = ops or StepOperators(config)
    m = config.target_mask()[:, None]
    ry = _as_array(residual_y, config.grid.field_shape) * m
    rp = _as_array(residual_p, config.grid.field_shape) * m
    _, _, G = _backward(ry, rp, RENEWAL, RENEWAL, config, ops, False)
    return ControlField(G, config)


# ---------------------------------------------------------------------------
# derivatives and energy


def x_derivative(f: np.ndarray, dx: float, stencil: Literal["central", "one-sided"] = "central") -> np.ndarray:
    """d/dx along the last axis.

    ``central``: central differences inside, second-order one-sided at x = 0, 1.
    ``one-sided``: the same, but the nodes next to the boundary also use the
    second-order one-sided formula pointing inward.
    """
    out = np.empty_like(f)
    out[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2 * dx)
    out[..., 0] = (-3 * f[..., 0] + 4 * f[..., 1] - f[..., 2]) / (2 * dx)
    out[..., -1] = (3 * f[..., -1] - 4 * f[..., -2] + f[..., -3]) / (2 * dx)
    if stencil == "one-sided":
        out[..., 1] = (-3 * f[..., 1] + 4 * f[..., 2] - f[..., 3]) / (2 * dx)
        out[..., -2] = (3 * f[..., -2] - 4 * f[..., -3] + f[..., -4]) / (2 * dx)
    elif stencil != "central":
        raise ValueError(f"unknown stencil {stencil!r}")
    return out


@dataclass
class EnergyReport:
    lhs: float
    rhs: float
    sup_t: float
    sup_a: float
    dissipation: float

    @property
    def vacuous(self) -> bool:
        return self.rhs == 0.0 and self.lhs == 0.0

    @property
    def ratio(self) -> float | None:
        if self.vacuous:
            return None
        return self.lhs / self.rhs if self.rhs > 0 else float("inf")

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio,
                "status": "vacuous" if self.vacuous else "ok",
                "sup_t": self.sup_t, "sup_a": self.sup_a, "dissipation": self.dissipation}


def energy_check(traj: Trajectory, control: ControlField | None, y0, p0, config: ProblemConfig) -> EnergyReport:
    """Both sides of the energy estimate for a forward trajectory."""
    g = config.grid
    wt, wa, wx = (quadrature_weights(g, ax) for ax in ("t", "a", "x"))
    y, p = traj.first, traj.second
    dens = y**2 + p**2
    sup_t = float(np.max(np.einsum("nij,i,j->n", dens, wa, wx)))
    sup_a = float(np.max(np.einsum("nij,n,j->i", dens, wt, wx)))
    k1, k2 = config.k1(g.x), config.k2(g.x)
    flux = k1 * x_derivative(y, g.dx) ** 2 + k2 * x_derivative(p, g.dx) ** 2
    diss = float(np.einsum("nij,n,i,j->", flux, wt, wa, wx))
    lhs = sup_t + sup_a + diss
    init = _as_array(y0, g.field_shape) ** 2 + _as_array(p0, g.field_shape) ** 2
    rhs = float(wa @ init @ wx)
    if control is not None:
        rhs += q_inner(control.values, control.values, config)
    return EnergyReport(lhs=lhs, rhs=rhs, sup_t=sup_t, sup_a=sup_a, dissipation=diss)


def trajectory_exports(traj: Trajectory, slices) -> tuple[dict[str, str], str]:
    """CSV text per requested slice plus a JSON manifest."""
    files = {f"slice_{n:05d}.csv": traj.slice_csv(n) for n in slices}
    man = traj.manifest()
    man["slices"] = sorted(files)
    return files, json.dumps(man, indent=2, sort_keys=True)

