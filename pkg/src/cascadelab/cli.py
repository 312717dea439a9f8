"""Batch command-line front end.

Subcommands ``validate``, ``simulate``, ``control`` and ``certify``.  Each
prints one JSON document to stdout, writes its files (plus ``manifest.json``)
into ``--out`` and logs to stderr.

Exit codes: 0 success, 1 domain failure (hypothesis, convergence or a failed
verdict), 2 usage or parse failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .certify import CertConfigError
from .model import INITIAL_DATA_PRESETS, ProblemConfig, StructuralError, initial_data, preset_text, validate
from .solver import ControlField, SolverError, energy_check, solve_forward, trajectory_exports

log = logging.getLogger("cascadelab")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
CARLEMAN_CHECKS = ("intermediate_2_16", "single_2_18", "nondeg_2_21", "renewal_2_38", "omega_2_49", "lemma_2_50")
EXTRA_CHECKS = ("observability", "hardy", "caccioppoli")
HARDY_TOL = 0.05


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest and output


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    outputs: list[str] = field(default_factory=list)
    argv: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"command": self.command, "config_sha256": self.config_hash, "seed": self.seed,
                "version": self.version, "started": self.started, "finished": self.finished,
                "outputs": sorted(self.outputs), "argv": self.argv}


class OutputDir:
    """Collects output files and writes them from the calling thread only."""

    def __init__(self, root: Path, manifest: RunManifest):
        self.root = root
        self.manifest = manifest

    def write(self, name: str, text: str) -> None:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.manifest.outputs.append(name)

    def write_json(self, name: str, obj) -> None:
        self.write(name, dumps(obj) + "\n")

    def close(self) -> None:
        self.manifest.finished = _now()
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.json").write_text(dumps(self.manifest.to_dict()) + "\n")


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)


# ---------------------------------------------------------------------------
# inputs


def read_config(path: str | None) -> tuple[ProblemConfig, str, dict]:
    """Config, sha256 of its bytes and the raw document."""
    if path is None:
        raw = preset_text("default").encode()
    else:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {path}: {exc}") from exc
    try:
        config = ProblemConfig.from_dict(doc)
    except StructuralError as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return config, hashlib.sha256(raw).hexdigest(), doc


def parse_s_grid(text: str) -> tuple[float, float, int]:
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise UsageError(f"--s-grid expects LO:HI:N, got {text!r}") from exc
    if n < 8:
        raise UsageError(f"s-grid too small: {n} points (need >= 8)")
    if not 0 < lo < hi:
        raise UsageError("--s-grid needs 0 < LO < HI")
    return lo, hi, n


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def control_csv(control: ControlField) -> str:
    """Control values on its support, one row per (step, a, x) node."""
    g = control.config.grid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "t", "a", "x", "theta"])
    cols = np.flatnonzero(control.config.omega_mask())
    for n in range(g.n_t):
        for i in range(1, g.n_a + 1):
            for j in cols:
                w.writerow([n + 1, repr(float(g.t[n + 1])), repr(float(g.a[i])), repr(float(g.x[j])),
                            repr(float(control.values[n, i, j]))])
    return buf.getvalue()


def read_control_csv(path: str, config: ProblemConfig) -> ControlField:
    g = config.grid
    vals = np.zeros((g.n_t, g.n_a + 1, g.n_x + 1))
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                n = int(row["step"])
                i = int(round(float(row["a"]) / g.da))
                j = int(round(float(row["x"]) / g.dx))
                vals[n - 1, i, j] = float(row["theta"])
    except (OSError, KeyError, ValueError, IndexError) as exc:
        raise UsageError(f"cannot read control file {path}: {exc}") from exc
    return ControlField(vals, config)


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args, out: OutputDir, config: ProblemConfig) -> tuple[dict, int]:
    rep = validate(config)
    body = rep.to_dict()
    out.write_json("validation.json", body)
    for clause in rep.failed_clauses():
        log.warning("hypothesis failed: %s", clause)
    return body, EXIT_OK if rep.passed else EXIT_DOMAIN


def _slices(text: str | None, n_t: int) -> list[int]:
    if text is None:
        return sorted({0, n_t // 2, n_t})
    if text == "all":
        return list(range(n_t + 1))
    try:
        idx = sorted({int(v) for v in text.split(",")})
    except ValueError as exc:
        raise UsageError(f"--slices expects indices or 'all', got {text!r}") from exc
    if idx and (idx[0] < 0 or idx[-1] > n_t):
        raise UsageError(f"slice indices must lie in [0, {n_t}]")
    return idx


def cmd_simulate(args, out: OutputDir, config: ProblemConfig) -> tuple[dict, int]:
    from .control import terminal_residuals

    g = config.grid
    y0, p0 = initial_data(args.preset, g)
    control = read_control_csv(args.control, config) if args.control else None
    slices = _slices(args.slices, g.n_t)
    traj = solve_forward(y0, p0, control, config)
    files, manifest = trajectory_exports(traj, slices)
    for name, text in files.items():
        out.write(f"slices/{name}", text)
    out.write("trajectory.json", manifest + "\n")
    energy = energy_check(traj, control, y0, p0, config).to_dict()
    ry, rp = terminal_residuals(traj.first[-1], traj.second[-1], config)
    body = {"initial_data": args.preset, "controlled": control is not None, "energy": energy,
            "terminal_mass_target": {"y": ry, "p": rp, "total": ry + rp}}
    out.write_json("simulate.json", body)
    return body, EXIT_OK


def cmd_control(args, out: OutputDir, config: ProblemConfig) -> tuple[dict, int]:
    from .control import baseline_residual, epsilon_sweep, minimize_J, optimality_certificate

    y0, p0 = initial_data(args.preset, config.grid)
    base = baseline_residual(y0, p0, config)
    if args.sweep:
        eps = parse_floats(args.sweep)
        try:
            rep = epsilon_sweep(y0, p0, config, eps, tol=args.tol, max_iter=args.max_iter, workers=args.workers)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        body = rep.to_dict()
        buf = io.StringIO()
        rows = rep.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        out.write("sweep.csv", buf.getvalue())
        out.write_json("sweep.json", body)
        converged = body["checks"]["all_converged"]
        if not rep.passed:
            log.warning("sweep checks failed: %s", [k for k, v in rep.checks.items() if not v])
    else:
        if args.epsilon <= 0:
            raise UsageError("--epsilon must be positive")
        res = minimize_J(args.epsilon, y0, p0, config, tol=args.tol, max_iter=args.max_iter)
        body = res.to_dict()
        body["baseline"] = {"y": base[0], "p": base[1], "total": sum(base)}
        body["residual_over_baseline"] = res.terminal_residual / sum(base) if sum(base) > 0 else 0.0
        body["optimality_certificate"] = optimality_certificate(res, y0, p0, config)
        out.write("control.csv", control_csv(res.control))
        out.write_json("control.json", body)
        converged = res.converged
    if not converged:
        log.error("conjugate gradients did not reach tol %g", args.tol)
    return body, EXIT_OK if converged else EXIT_DOMAIN


def _variants(text: str | None, config: ProblemConfig) -> list[str]:
    if text is None:
        names = [v for v in CARLEMAN_CHECKS if not (v == "nondeg_2_21" and config.k2.degenerate)]
        return names + list(EXTRA_CHECKS)
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in CARLEMAN_CHECKS + EXTRA_CHECKS]
    if bad:
        raise UsageError(f"unknown variants {bad}; known: {list(CARLEMAN_CHECKS + EXTRA_CHECKS)}")
    return names


def _hardy_study(config: ProblemConfig) -> dict:
    from .certify import hardy_poincare_constant

    n = config.grid.n_x
    out = {}
    for name in ("k1", "k2"):
        k = getattr(config, name)
        c, _ = hardy_poincare_constant(k, n)
        f, _ = hardy_poincare_constant(k, 2 * n)
        rel = abs(f / c - 1.0)
        out[name] = {"n_x": n, "constant": c, "constant_fine": f, "relative_change": rel,
                     "stable": rel <= HARDY_TOL}
    out["verdict"] = "pass" if all(out[k]["stable"] for k in ("k1", "k2")) else "fail"
    return out


def _observability(config: ProblemConfig, seed: int, n_draws: int, workers) -> dict:
    from .certify import observability_study, refinement_factor, sample_draws

    draws = sample_draws(seed, n_draws)
    hum = sample_draws(seed + 1, max(1, n_draws // 5), hum_cone=True, delta_over_A=config.delta / config.A)
    coarse = observability_study(config, draws, hum, workers)
    fine = observability_study(config.refined(), draws, hum, workers)
    c, f = coarse.C_delta, fine.C_delta
    factor = refinement_factor(math.log(c), math.log(f)) if c and f else math.inf
    body = coarse.to_dict()
    body["C_delta_fine"] = f
    body["refinement_factor"] = factor
    ok = c is not None and math.isfinite(c) and factor <= 0.25 and coarse.hum_cone_finite
    body["verdict"] = "pass" if ok else "fail"
    return body


def _caccioppoli(config: ProblemConfig, seed: int, n_draws: int) -> dict:
    from .certify import caccioppoli_study, refinement_factor, resolved_s, sample_draws
    from .weights import default_params

    draws = sample_draws(seed, n_draws)
    res = []
    for c in (config, config.refined()):
        p = default_params(c)
        res.append(caccioppoli_study(c, p.with_s(resolved_s(c, p)), draws))
    body = dict(res[0])
    body["fine"] = res[1]
    factors = {k: refinement_factor(res[0]["log_ratio"][k], res[1]["log_ratio"][k]) for k in ("phi1", "phi2")}
    body["refinement_factor"] = factors
    ok = all(math.isfinite(res[0]["log_ratio"][k]) and factors[k] <= 0.25 for k in factors)
    body["verdict"] = "pass" if ok else "fail"
    return body


def cmd_certify(args, out: OutputDir, config: ProblemConfig) -> tuple[dict, int]:
    from .certify import log_s_grid, sample_draws, scan_with_refinement

    lo, hi, n = parse_s_grid(args.s_grid)
    s_grid = log_s_grid(lo, hi, n)
    names = _variants(args.variants, config)
    draws = sample_draws(args.seed, args.draws)
    body: dict = {"seed": args.seed, "draws": args.draws, "s_grid": {"lo": lo, "hi": hi, "n": n}, "reports": {}}
    ok = True
    for name in names:
        log.info("certify %s", name)
        if name == "hardy":
            rep = _hardy_study(config)
        elif name == "observability":
            rep = _observability(config, args.seed, args.obs_draws, args.workers)
        elif name == "caccioppoli":
            rep = _caccioppoli(config, args.seed, args.draws)
        else:
            cr = scan_with_refinement(name, draws, config, s_grid, workers=args.workers)
            out.write(f"scan_{name}.csv", cr.csv())
            rep = cr.to_dict()
        body["reports"][name] = rep
        ok = ok and rep["verdict"] == "pass"
        log.info("%s: %s", name, rep["verdict"])
    body["verdict"] = "pass" if ok else "fail"
    out.write_json("certify.json", body)
    return body, EXIT_OK if ok else EXIT_DOMAIN


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="problem config JSON (default: shipped default preset)")
    common.add_argument("--out", default="cascadelab-out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cascadelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cascadelab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", parents=[common], help="check the model hypotheses")

    s = sub.add_parser("simulate", parents=[common], help="forward solve with CSV slices")
    s.add_argument("--preset", default="gaussian-bump", choices=INITIAL_DATA_PRESETS, help="initial data")
    s.add_argument("--control", help="control CSV written by the control command")
    s.add_argument("--slices", help="comma-separated time indices or 'all' (default: first, middle, last)")

    c = sub.add_parser("control", parents=[common], help="penalized null-control synthesis")
    c.add_argument("--preset", default="gaussian-bump", choices=INITIAL_DATA_PRESETS, help="initial data")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--epsilon", type=float, default=1e-4)
    g.add_argument("--sweep", help="decreasing epsilons, e.g. 1e-1,1e-2,1e-3,1e-4")
    c.add_argument("--tol", type=float, default=1e-8)
    c.add_argument("--max-iter", type=int, default=2000)
    c.add_argument("--workers", type=int, default=None)

    r = sub.add_parser("certify", parents=[common], help="weighted-inequality certification")
    r.add_argument("--variants", help=f"comma list from {', '.join(CARLEMAN_CHECKS + EXTRA_CHECKS)}")
    r.add_argument("--s-grid", default="1e-2:1e3:16", help="LO:HI:N, log-spaced")
    r.add_argument("--draws", type=int, default=10)
    r.add_argument("--obs-draws", type=int, default=50)
    r.add_argument("--workers", type=int, default=None)
    return p


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "control": cmd_control, "certify": cmd_certify}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config, digest, _ = read_config(args.config)
        manifest = RunManifest(args.command, digest, args.seed, argv=argv)
        out = OutputDir(Path(args.out), manifest)
        body, code = COMMANDS[args.command](args, out, config)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except SolverError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_DOMAIN
    except CertConfigError as exc:
        log.error("certification not applicable: %s", exc)
        return EXIT_DOMAIN
    out.close()
    print(dumps(body))
    return code
