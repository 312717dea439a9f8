"""Characteristic-line representation of the renewal-mode adjoint.

Along each line ``t - a = const`` the adjoint reduces to a 1-D backward
parabolic problem driven by the renewal trace and the cascade coupling:

    v(t, a) = L(T - t) v_T(a + T - t) + int_t^T L(l - t) beta2(l, a + l - t) v(l, 0) dl
    u(t, a) = S(T - t) u_T(a + T - t)
              + int_t^T S(l - t) [beta1(l, a + l - t) u(l, 0) - mu3(l, a + l - t) v(l, a + l - t)] dl

with the first term replaced by 0 when the line leaves through a = A before
reaching t = T.  ``S`` and ``L`` are realized by implicit Euler steps of
``w_tau = (k w_x)_x - mu w`` with the rates read along the line, and the
Duhamel integrals by the trapezoid rule in ``l``.  Because newborns are
infertile the trace values on the left of each trapezoid step drop out, so
the traces are explicit.  All lines are advanced together one time level at
a time, traces first.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from .model import ProblemConfig
from .solver import _Factor, _as_array, _face_coeffs

Which = Literal["u-trace", "v-trace", "full-u", "full-v"]


class OracleError(ValueError):
    pass


def _rate_at(config: ProblemConfig, name: str, n: int) -> np.ndarray:
    g = config.grid
    arr = config.rate(name)
    arr = arr[min(n, arr.shape[0] - 1)]
    return np.broadcast_to(arr, g.field_shape)[:, 1:-1]


def _level_factor(config: ProblemConfig, which: int, n: int) -> _Factor:
    """Implicit step matrix with the rate at (t_n, a_i), rows i = 0 .. n_a - 1."""
    g = config.grid
    k = config.k1 if which == 1 else config.k2
    diag, off = _face_coeffs(k.at_faces(g), g.dx, g.dt)
    mu = _rate_at(config, "mu1" if which == 1 else "mu2", n)[:-1]
    return _Factor(diag[None, :] + 1.0 + g.dt * mu, off, f"oracle equation {which}", n)


def characteristic_fields(uT, vT, config: ProblemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Full (u, v) on the (t, a, x) grid from the characteristic representation."""
    g = config.grid
    for name in ("beta1", "beta2"):
        if np.any(config.rate(name)[:, 0, :] != 0.0):
            raise OracleError("traces require infertile newborns")
    h = 0.5 * g.dt
    U = np.zeros(g.space_time_shape)
    V = np.zeros(g.space_time_shape)
    U[-1] = _as_array(uT, g.field_shape)
    V[-1] = _as_array(vT, g.field_shape)
    U[-1][:, [0, -1]] = 0.0
    V[-1][:, [0, -1]] = 0.0
    for n in range(g.n_t, 0, -1):
        b1n, b2n = _rate_at(config, "beta1", n), _rate_at(config, "beta2", n)
        b1m, b2m = _rate_at(config, "beta1", n - 1), _rate_at(config, "beta2", n - 1)
        m3n, m3m = _rate_at(config, "mu3", n), _rate_at(config, "mu3", n - 1)
        un, vn = U[n, :, 1:-1], V[n, :, 1:-1]

        # v: source beta2(l, a_l) v(l, 0)
        gv = b2n[1:] * vn[0][None, :]
        w = _level_factor(config, 2, n - 1).solve(vn[1:] + h * gv)
        trace_v = w[0]
        vm = w + h * b2m[:-1] * trace_v[None, :]
        V[n - 1, :-1, 1:-1] = vm

        # u: source beta1(l, a_l) u(l, 0) - mu3(l, a_l) v(l, a_l)
        gu = b1n[1:] * un[0][None, :] - m3n[1:] * vn[1:]
        w = _level_factor(config, 1, n - 1).solve(un[1:] + h * gu)
        trace_u = w[0] - h * m3m[0] * vm[0]
        um = w + h * (b1m[:-1] * trace_u[None, :] - m3m[:-1] * vm)
        U[n - 1, :-1, 1:-1] = um
    return U, V


def characteristic_trace(uT, vT, config: ProblemConfig, which: Which = "v-trace") -> np.ndarray:
    """Traces (shape (n_t + 1, n_x + 1)) or full fields (shape (n_t + 1, n_a + 1, n_x + 1))."""
    if which not in ("u-trace", "v-trace", "full-u", "full-v"):
        raise ValueError(f"unknown selection {which!r}")
    U, V = characteristic_fields(uT, vT, config)
    return {"u-trace": U[:, 0], "v-trace": V[:, 0], "full-u": U, "full-v": V}[which]
