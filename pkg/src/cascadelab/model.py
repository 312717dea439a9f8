"""Problem data for the degenerate age-structured cascade system.

Everything a run needs lives in :class:`ProblemConfig`: the horizon ``T``,
maximal age ``A``, age cutoff ``delta``, the control region ``omega`` and the
coupling region ``omega1``, the two dispersion coefficients, the five vital
rates and the grid.  Rates given in closed form are sampled onto the grid once,
when the config is built.

Grid conventions
----------------
Fields live on nodes.  With ``n_x`` cells in space and ``n_a`` cells in age a
field has shape ``(n_a + 1, n_x + 1)``; node ``(i, j)`` sits at
``(a_i, x_j) = (i * da, j * dx)``.  Time nodes are ``t_n = n * dt`` for
``n = 0 .. n_t`` and ``dt == da`` so that one time step moves every age node to
its successor.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Literal

import numpy as np

SCHEMA_VERSION = 1

Axis = Literal["x", "a", "t"]

RATE_NAMES = ("mu1", "mu2", "mu3", "beta1", "beta2")


class StructuralError(ValueError):
    """Raised when a config is malformed (not a hypothesis violation)."""


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridSpec:
    n_x: int
    n_a: int
    n_t: int
    T: float
    A: float

    def __post_init__(self):
        for name in ("n_x", "n_a", "n_t"):
            n = getattr(self, name)
            if not isinstance(n, (int, np.integer)) or n < 8:
                raise StructuralError(f"{name} must be an integer >= 8, got {n!r}")
        if not (self.T > 0 and self.A > 0):
            raise StructuralError("T and A must be positive")
        da = self.A / self.n_a
        if abs(self.T / self.n_t - da) / da >= 1e-12:
            raise StructuralError(
                f"characteristic alignment needs T/n_t == A/n_a, got "
                f"{self.T / self.n_t!r} vs {da!r}"
            )

    @classmethod
    def aligned(cls, n_x: int, n_a: int, T: float, A: float) -> GridSpec:
        """Grid whose time step is forced to equal the age step."""
        n_t = round(n_a * T / A)
        return cls(n_x=n_x, n_a=n_a, n_t=n_t, T=T, A=A)

    def refined(self) -> GridSpec:
        return GridSpec(2 * self.n_x, 2 * self.n_a, 2 * self.n_t, self.T, self.A)

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    @property
    def da(self) -> float:
        return self.A / self.n_a

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_x + 1)

    @property
    def a(self) -> np.ndarray:
        return np.linspace(0.0, self.A, self.n_a + 1)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

    @property
    def field_shape(self) -> tuple[int, int]:
        return (self.n_a + 1, self.n_x + 1)

    @property
    def space_time_shape(self) -> tuple[int, int, int]:
        return (self.n_t + 1, self.n_a + 1, self.n_x + 1)

    def to_dict(self) -> dict:
        return {"n_x": self.n_x, "n_a": self.n_a, "n_t": self.n_t}


def quadrature_weights(grid: GridSpec, axis: Axis) -> np.ndarray:
    """Composite trapezoid weights on the nodes of one axis.

    The weights sum to the axis length, so constants and affine functions are
    integrated exactly.
    """
    n, length = {
        "x": (grid.n_x, 1.0),
        "a": (grid.n_a, grid.A),
        "t": (grid.n_t, grid.T),
    }[axis]
    return trapezoid_weights(n, length)


def trapezoid_weights(n_cells: int, length: float) -> np.ndarray:
    h = length / n_cells
    w = np.full(n_cells + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def interval_weights(nodes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Trapezoid weights restricted to the cells whose centers lie in (lo, hi).

    When ``lo`` and ``hi`` fall on nodes this is the ordinary trapezoid rule on
    the sub-interval.
    """
    w = np.zeros_like(nodes, dtype=float)
    h = np.diff(nodes)
    centers = 0.5 * (nodes[:-1] + nodes[1:])
    inside = (centers > lo) & (centers < hi)
    w[:-1] += np.where(inside, 0.5 * h, 0.0)
    w[1:] += np.where(inside, 0.5 * h, 0.0)
    return w


def open_mask(nodes: np.ndarray, interval: tuple[float, float], tol: float = 1e-12) -> np.ndarray:
    """Nodes strictly inside an open interval."""
    lo, hi = interval
    return (nodes > lo + tol) & (nodes < hi - tol)


# ---------------------------------------------------------------------------
# dispersion coefficients


@dataclass(frozen=True)
class DispersionSpec:
    """Space-dependent dispersion coefficient k(x) on [0, 1].

    kind ``power``:      k(x) = coeff * x**alpha
    kind ``constant``:   k(x) = coeff (nondegenerate)
    kind ``tabulated``:  values on a uniform table over [0, 1], linearly
                         interpolated wherever k is needed
    """

    kind: Literal["power", "constant", "tabulated"]
    gamma: float
    alpha: float = 0.0
    coeff: float = 1.0
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("power", "constant", "tabulated"):
            raise StructuralError(f"unknown dispersion kind {self.kind!r}")
        if self.kind == "tabulated" and len(self.values) < 2:
            raise StructuralError("tabulated dispersion needs at least two values")
        if self.kind != "tabulated" and self.coeff <= 0:
            raise StructuralError("dispersion coefficient must be positive")

    @property
    def degenerate(self) -> bool:
        return self.kind != "constant"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "power":
            return self.coeff * np.power(x, self.alpha)
        if self.kind == "constant":
            return np.full_like(x, self.coeff)
        table = np.asarray(self.values)
        return np.interp(x, np.linspace(0.0, 1.0, table.size), table)

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "power":
            with np.errstate(divide="ignore", invalid="ignore"):
                d = self.coeff * self.alpha * np.power(x, self.alpha - 1.0)
            return np.where(x > 0, d, 0.0) if self.alpha != 1.0 else d
        if self.kind == "constant":
            return np.zeros_like(x)
        table = np.asarray(self.values)
        nodes = np.linspace(0.0, 1.0, table.size)
        slopes = np.diff(table) / np.diff(nodes)
        # right-continuous slope of the piecewise-linear interpolant
        idx = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, slopes.size - 1)
        return slopes[idx]

    def at_faces(self, grid: GridSpec) -> np.ndarray:
        """k at the cell midpoints x_{j+1/2}, j = 0 .. n_x - 1."""
        x = grid.x
        return self(0.5 * (x[:-1] + x[1:]))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind, "gamma": self.gamma}
        if self.kind == "power":
            d.update(alpha=self.alpha, coeff=self.coeff)
        elif self.kind == "constant":
            d.update(coeff=self.coeff)
        else:
            d.update(values=list(self.values))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DispersionSpec:
        d = dict(d)
        if "values" in d:
            d["values"] = tuple(float(v) for v in d["values"])
        return cls(**d)


# ---------------------------------------------------------------------------
# vital rates


def _sample_rate(spec: dict, grid: GridSpec) -> np.ndarray:
    """Sample one rate spec onto a broadcastable (t, a, x) array."""
    kind = spec.get("kind")
    if kind == "constant":
        return np.full((1, 1, 1), float(spec["value"]))
    if kind == "age_parabola":
        # scale * 4 a (A - a) / A**2, vanishes at a = 0 and a = A
        a = grid.a
        prof = float(spec.get("scale", 1.0)) * 4.0 * a * (grid.A - a) / grid.A**2
        return prof[None, :, None]
    if kind == "x_indicator":
        x = grid.x
        inside = (x >= spec["lo"]) & (x <= spec["hi"])
        prof = np.where(inside, float(spec["inside"]), float(spec.get("outside", 0.0)))
        return prof[None, None, :]
    if kind == "tabulated":
        arr = np.asarray(spec["values"], dtype=float)
        while arr.ndim < 3:
            arr = arr[None]
        target = grid.space_time_shape
        for got, want in zip(arr.shape, target):
            if got not in (1, want):
                raise StructuralError(
                    f"tabulated rate of shape {arr.shape} does not broadcast to {target}"
                )
        return arr
    raise StructuralError(f"unknown rate kind {kind!r}")


@dataclass(frozen=True)
class RatesSpec:
    """Mortality, interaction and fertility rates as JSON-able specs.

    Each entry is a dict with a ``kind`` key: ``constant`` (``value``),
    ``age_parabola`` (``scale``), ``x_indicator`` (``lo``, ``hi``, ``inside``,
    ``outside``) or ``tabulated`` (``values``, broadcastable to (t, a, x)).
    """

    mu1: dict
    mu2: dict
    mu3: dict
    beta1: dict
    beta2: dict

    def sample(self, grid: GridSpec) -> dict[str, np.ndarray]:
        return {name: _sample_rate(getattr(self, name), grid) for name in RATE_NAMES}

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in RATE_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> RatesSpec:
        missing = [n for n in RATE_NAMES if n not in d]
        if missing:
            raise StructuralError(f"rates missing: {missing}")
        return cls(**{n: dict(d[n]) for n in RATE_NAMES})


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class ProblemConfig:
    grid: GridSpec
    delta: float
    omega: tuple[float, float]
    omega1: tuple[float, float]
    k1: DispersionSpec
    k2: DispersionSpec
    rates: RatesSpec
    nu: float
    schema_version: int = SCHEMA_VERSION
    sampled: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        x1, x2 = self.omega
        if not (0.0 < x1 < x2 < 1.0):
            raise StructuralError(f"omega must satisfy 0 < x1 < x2 < 1, got {self.omega}")
        w1, w2 = self.omega1
        if not w1 < w2:
            raise StructuralError(f"omega1 must be a nonempty interval, got {self.omega1}")
        if self.schema_version != SCHEMA_VERSION:
            raise StructuralError(f"unsupported schema_version {self.schema_version}")
        object.__setattr__(self, "omega", (float(x1), float(x2)))
        object.__setattr__(self, "omega1", (float(w1), float(w2)))
        object.__setattr__(self, "sampled", self.rates.sample(self.grid))

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def A(self) -> float:
        return self.grid.A

    def rate(self, name: str) -> np.ndarray:
        return self.sampled[name]

    def rate_full(self, name: str) -> np.ndarray:
        return np.broadcast_to(self.sampled[name], self.grid.space_time_shape)

    def omega_mask(self) -> np.ndarray:
        return open_mask(self.grid.x, self.omega)

    def target_mask(self) -> np.ndarray:
        """Age nodes carrying a target cell: cell (a_{i-1}, a_i) with center > delta."""
        a = self.grid.a
        m = np.zeros(a.size, dtype=bool)
        m[1:] = (a[1:] - 0.5 * self.grid.da) > self.delta
        return m

    def with_grid(self, grid: GridSpec) -> ProblemConfig:
        return ProblemConfig(
            grid=grid, delta=self.delta, omega=self.omega, omega1=self.omega1,
            k1=self.k1, k2=self.k2, rates=self.rates, nu=self.nu,
        )

    def refined(self) -> ProblemConfig:
        return self.with_grid(self.grid.refined())

    def replace(self, **changes) -> ProblemConfig:
        d = self.to_dict()
        for key, value in changes.items():
            d[key] = value
        return ProblemConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "T": self.T,
            "A": self.A,
            "delta": self.delta,
            "omega": list(self.omega),
            "omega1": list(self.omega1),
            "nu": self.nu,
            "grid": self.grid.to_dict(),
            "k1": self.k1.to_dict(),
            "k2": self.k2.to_dict(),
            "rates": self.rates.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> ProblemConfig:
        try:
            g = d["grid"]
            grid = GridSpec(int(g["n_x"]), int(g["n_a"]), int(g["n_t"]), float(d["T"]), float(d["A"]))
            return cls(
                grid=grid,
                delta=float(d["delta"]),
                omega=tuple(d["omega"]),
                omega1=tuple(d["omega1"]),
                k1=DispersionSpec.from_dict(d["k1"]),
                k2=DispersionSpec.from_dict(d["k2"]),
                rates=RatesSpec.from_dict(d["rates"]),
                nu=float(d["nu"]),
                schema_version=int(d.get("schema_version", SCHEMA_VERSION)),
            )
        except (KeyError, TypeError) as exc:
            raise StructuralError(f"incomplete config: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> ProblemConfig:
        return cls.from_dict(json.loads(text))


def load_config(path) -> ProblemConfig:
    with open(path) as fh:
        return ProblemConfig.from_json(fh.read())


def preset_names() -> list[str]:
    files = resources.files("cascadelab").joinpath("presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def preset_text(name: str) -> str:
    return resources.files("cascadelab").joinpath("presets", f"{name}.json").read_text()


def load_preset(name: str) -> ProblemConfig:
    return ProblemConfig.from_json(preset_text(name))


def default_config(n_x: int = 100, n_a: int = 100) -> ProblemConfig:
    """The desk-scale configuration used by the acceptance suite."""
    return load_preset("default").with_grid(GridSpec.aligned(n_x, n_a, 0.4, 1.0))


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True)
class Field2D:
    """One (age, space) slice of a population or adjoint density."""

    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.field_shape:
            raise ValueError(f"field shape {v.shape} != grid shape {self.grid.field_shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field has non-finite entries")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: GridSpec) -> Field2D:
        return cls(np.zeros(grid.field_shape), grid)

    def l2_sq(self) -> float:
        wa = quadrature_weights(self.grid, "a")
        wx = quadrature_weights(self.grid, "x")
        return float(wa @ self.values**2 @ wx)

    def __mul__(self, c: float) -> Field2D:
        return Field2D(self.values * c, self.grid)

    __rmul__ = __mul__


def gaussian_bumps(grid: GridSpec, bumps, *, a_mask=None) -> np.ndarray:
    """Sum of separable Gaussian bumps on the (a, x) nodes.

    ``bumps`` is an iterable of ``(amp, a_center, a_width, x_center, x_width)``.
    The sum is multiplied by 4x(1 - x) so the Dirichlet rows vanish.
    """
    a, x = grid.a, grid.x
    out = np.zeros(grid.field_shape)
    for amp, ac, aw, xc, xw in bumps:
        out += amp * np.outer(np.exp(-0.5 * ((a - ac) / aw) ** 2), np.exp(-0.5 * ((x - xc) / xw) ** 2))
    out *= 4.0 * x * (1.0 - x)
    if a_mask is not None:
        out *= a_mask[:, None]
    return out


INITIAL_DATA_PRESETS = ("zero", "gaussian-bump")


def initial_data(name: str, grid: GridSpec) -> tuple[Field2D, Field2D]:
    """Named initial data (y0, p0)."""
    if name == "zero":
        return Field2D.zeros(grid), Field2D.zeros(grid)
    if name == "gaussian-bump":
        A = grid.A
        y0 = gaussian_bumps(grid, [(1.0, 0.35 * A, 0.12 * A, 0.3, 0.1)])
        p0 = gaussian_bumps(grid, [(0.8, 0.3 * A, 0.12 * A, 0.6, 0.12)])
        return Field2D(y0, grid), Field2D(p0, grid)
    raise KeyError(f"unknown initial-data preset {name!r}; known: {INITIAL_DATA_PRESETS}")


# ---------------------------------------------------------------------------
# validation


@dataclass
class Check:
    clause: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"clause": self.clause, "passed": self.passed, "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list[Check] = field(default_factory=list)
    structural_errors: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.structural_errors and all(c.passed for c in self.checks)

    def failed_clauses(self) -> list[str]:
        return [c.clause for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "failed_clauses": self.failed_clauses(),
            "structural_errors": list(self.structural_errors),
            "checks": [c.to_dict() for c in self.checks],
            "notes": list(self.notes),
        }


def _check_dispersion(name: str, k: DispersionSpec, grid: GridSpec) -> list[Check]:
    x = grid.x
    checks = [
        Check(f"{name}: gamma in [0, 1)", 0.0 <= k.gamma < 1.0, f"gamma = {k.gamma}"),
    ]
    if not k.degenerate:
        checks.append(Check(f"{name}: k > 0 on [0, 1] (nondegenerate)", bool(np.all(k(x) > 0)), "constant kind"))
        return checks
    kx = k(x)
    checks.append(Check(f"{name}: k(0) = 0", abs(float(kx[0])) == 0.0, f"k(0) = {kx[0]:.3g}"))
    checks.append(Check(f"{name}: k > 0 on (0, 1]", bool(np.all(kx[1:] > 0)), f"min k on (0,1] = {kx[1:].min():.3g}"))
    if k.kind == "power":
        # x k' = alpha k exactly, so the clause reduces to alpha <= gamma
        ok = k.alpha <= k.gamma
        checks.append(Check(f"{name}: x k'(x) <= gamma k(x)", ok, f"alpha = {k.alpha}, gamma = {k.gamma}"))
    else:
        gap = x * k.derivative(x) - k.gamma * kx
        worst = int(np.argmax(gap))
        ok = bool(np.all(gap <= 1e-12 * np.maximum(1.0, np.abs(kx))))
        checks.append(Check(f"{name}: x k'(x) <= gamma k(x)", ok, f"worst node x = {x[worst]:.4g}, excess {gap[worst]:.3g}"))
    return checks


def validate(config: ProblemConfig) -> ValidationReport:
    """Check every standing hypothesis on a structurally sound config.

    Pure: the config is not modified and repeated calls give equal reports.
    """
    rep = ValidationReport()
    g = config.grid
    rep.checks.append(Check("T in (0, delta)", 0.0 < config.T < config.delta, f"T = {config.T}, delta = {config.delta}"))
    rep.checks.append(Check("delta in (0, A)", 0.0 < config.delta < config.A, f"delta = {config.delta}, A = {config.A}"))
    (x1, x2), (w1, w2) = config.omega, config.omega1
    rep.checks.append(Check("closure(omega1) in omega", x1 < w1 and w2 < x2, f"omega = {config.omega}, omega1 = {config.omega1}"))
    rep.checks.append(Check("nu > 0", config.nu > 0, f"nu = {config.nu}"))
    rep.checks.extend(_check_dispersion("k1", config.k1, g))
    rep.checks.extend(_check_dispersion("k2", config.k2, g))

    for name in RATE_NAMES:
        arr = config.rate(name)
        ok = bool(np.all(np.isfinite(arr))) and float(arr.min()) >= 0.0
        rep.checks.append(Check(f"{name} >= 0 and bounded", ok, f"min = {float(arr.min()):.3g}, max = {float(arr.max()):.3g}"))
    for name in ("beta1", "beta2"):
        newborn = config.rate(name)[:, 0, :]
        rep.checks.append(Check(f"{name}(., 0, .) = 0", bool(np.all(newborn == 0.0)), f"max |{name}(., 0, .)| = {float(np.abs(newborn).max()):.3g}"))
    in_w1 = (g.x >= w1) & (g.x <= w2)
    mu3 = config.rate_full("mu3")[:, :, in_w1]
    low = float(mu3.min()) if mu3.size else math.inf
    rep.checks.append(Check("mu3 >= nu on [0,T] x [0,A] x omega1", low >= config.nu, f"min mu3 on omega1 = {low:.3g}, nu = {config.nu}"))

    for name in RATE_NAMES:
        spec = getattr(config.rates, name)
        if spec["kind"] in ("x_indicator", "tabulated"):
            arr = config.rate(name)
            jumps = [np.abs(np.diff(arr, axis=ax)).max() for ax in range(3) if arr.shape[ax] > 1]
            if jumps and max(jumps) > 0:
                rep.notes.append(f"{name} is piecewise/tabulated (max adjacent jump {max(jumps):.3g}); no regularity beyond L-infinity assumed")
    return rep


def validate_document(doc: dict) -> tuple[ProblemConfig | None, ValidationReport]:
    """Build and validate a config dict, reporting structural errors separately."""
    try:
        config = ProblemConfig.from_dict(doc)
    except StructuralError as exc:
        return None, ValidationReport(structural_errors=[str(exc)])
    return config, validate(config)
