"""Command-line driver: assemble, partition, set up and solve from a TOML config.

Config layout (every key optional)::

    method = "mg"            # mg | pcg | pgmres | block_jacobi_gmres
    seed = 0

    [problem]
    kind = "poisson_ip"      # or poisson_ldg, convection, convection_diffusion
    d = 3
    M = 3
    p = 1
    mu = 1.0
    peclet = 100.0           # convection_diffusion: sets mu = |v| L / Pe
    velocity = [1.0, 2.0, 3.0]
    boundary = { "x-" = "dirichlet" }
    penalty = 8.0
    ldg_tau = 1.0
    matrix = "A.mtx"         # external operator instead of a mesh
    graph = "graph.txt"
    rhs = "rhs.txt"

    [setup]                  # SetupConfig fields
    [cycle]                  # CycleConfig fields

    [output]
    dir = "out"

``solve`` writes ``report.json`` (deterministic), ``timing.json`` and
``hierarchy.csv``; ``sweep`` writes ``sweep.csv``; ``export`` writes
``A.mtx``, ``rhs.txt``, ``graph.txt`` and ``blocks.json``; ``partition``
writes ``partition.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import hierarchy as _hierarchy
from .dg import DIRICHLET, KINDS, ProblemSpec, assemble, face_names
from .hierarchy import SetupConfig
from .linalg import BlockPartition, mmread, mmwrite
from .meshgraph import CartesianMeshSpec, load_graph, write_graph
from .partition import build_hierarchy
from .smoother import build_smoother
from .solver import CycleConfig, SolveReport, mg_preconditioner, pcg, pgmres, solve_mg

__all__ = [
    "METHODS",
    "SWEEP_AXES",
    "ConfigError",
    "ExperimentConfig",
    "Problem",
    "load_config",
    "parse_config",
    "build_problem",
    "run_experiment",
    "run_sweep",
    "cmd_solve",
    "cmd_sweep",
    "cmd_export",
    "cmd_partition",
    "main",
]

METHODS = ("mg", "pcg", "pgmres", "block_jacobi_gmres")
SWEEP_AXES = ("M", "p", "n_cut", "Pe", "method")

_PROBLEM_KEYS = {
    "kind": "poisson_ip",
    "d": 3,
    "M": 3,
    "p": 1,
    "mu": 1.0,
    "peclet": None,
    "velocity": None,
    "boundary": None,
    "penalty": None,
    "ldg_tau": 1.0,
    "matrix": None,
    "graph": None,
    "rhs": None,
}
_TOP_KEYS = {"method", "seed", "problem", "setup", "cycle", "output"}


class ConfigError(ValueError):
    pass


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section, given, allowed):
    extra = set(given) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment.

    Attributes
    ----------
    problem : dict
        Problem keys with defaults filled in.
    setup : SetupConfig
    cycle : CycleConfig
    method : str
    seed : int
    out_dir : str
    """

    problem: dict
    setup: SetupConfig
    cycle: CycleConfig
    method: str = "mg"
    seed: int = 0
    out_dir: str = "out"

    def resolved(self):
        """Plain-data echo of the configuration with defaults materialised."""
        setup = dataclasses.asdict(self.setup)
        setup["n_cut"] = self.setup.cut(int(self.problem["d"]))
        prob = dict(self.problem)
        if prob.get("boundary") is not None:
            prob["boundary"] = dict(prob["boundary"])
        if prob.get("velocity") is not None:
            prob["velocity"] = list(prob["velocity"])
        if prob.get("peclet") is not None and math.isinf(prob["peclet"]):
            prob["peclet"] = "inf"
        return {
            "method": self.method,
            "seed": self.seed,
            "problem": prob,
            "setup": setup,
            "cycle": dataclasses.asdict(self.cycle),
            "output": {"dir": self.out_dir},
        }

    def with_axis(self, name, value):
        """Copy with one sweep axis set."""
        if name == "method":
            return dataclasses.replace(self, method=_check_method(value))
        if name == "n_cut":
            return dataclasses.replace(self, setup=dataclasses.replace(self.setup, n_cut=int(value)))
        prob = dict(self.problem)
        if name == "Pe":
            prob["peclet"] = float(value)
        elif name in ("M", "p"):
            prob[name] = int(value)
        else:
            raise ConfigError(f"cannot sweep over {name!r}; choose from {SWEEP_AXES}")
        return dataclasses.replace(self, problem=_resolve_problem(prob))


def _check_method(m):
    if m not in METHODS:
        raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    return m


def _default_velocity(d):
    v = np.arange(1, d + 1, dtype=float)
    return tuple((v / np.linalg.norm(v)).tolist())


def _resolve_problem(given):
    prob = dict(_PROBLEM_KEYS)
    prob.update(given)
    if prob["kind"] not in KINDS:
        raise ConfigError(f"unknown problem kind {prob['kind']!r}; expected one of {KINDS}")
    for key in ("d", "M", "p"):
        prob[key] = int(prob[key])
    if prob["peclet"] is not None:
        pe = prob["peclet"]
        prob["peclet"] = math.inf if isinstance(pe, str) and pe.lower() in ("inf", "infinity") else float(pe)
        if prob["peclet"] < 0:
            raise ConfigError("peclet must be >= 0")
        if prob["kind"] != "convection_diffusion":
            raise ConfigError("peclet applies to convection_diffusion problems only")
    if prob["kind"].startswith("convection") and prob["velocity"] is None:
        prob["velocity"] = _default_velocity(prob["d"])
    if prob["velocity"] is not None:
        prob["velocity"] = tuple(float(v) for v in prob["velocity"])
    if prob["boundary"] is not None:
        prob["boundary"] = tuple(sorted(dict(prob["boundary"]).items()))
    if prob["matrix"] is not None and prob["graph"] is None:
        raise ConfigError("an external matrix needs a graph file")
    return prob


def parse_config(data, seed=None, out_dir=None):
    """Validate a config mapping and fill in defaults."""
    _reject_unknown("top level", data, _TOP_KEYS)
    for section in ("problem", "setup", "cycle", "output"):
        if not isinstance(data.get(section, {}), dict):
            raise ConfigError(f"[{section}] must be a table")
    problem = data.get("problem", {})
    _reject_unknown("problem", problem, _PROBLEM_KEYS)
    setup = dict(data.get("setup", {}))
    _reject_unknown("setup", setup, _field_names(SetupConfig) - {"seed"})
    cycle = data.get("cycle", {})
    _reject_unknown("cycle", cycle, _field_names(CycleConfig))
    output = data.get("output", {})
    _reject_unknown("output", output, {"dir"})
    seed = int(data.get("seed", 0) if seed is None else seed)
    try:
        setup_cfg = SetupConfig(seed=seed, **setup)
        cycle_cfg = CycleConfig(**cycle)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        problem=_resolve_problem(problem),
        setup=setup_cfg,
        cycle=cycle_cfg,
        method=_check_method(data.get("method", "mg")),
        seed=seed,
        out_dir=str(out_dir if out_dir is not None else output.get("dir", "out")),
    )


def load_config(path, seed=None, out_dir=None):
    """Read a TOML file; ``path=None`` gives the default experiment."""
    if path is None:
        return parse_config({}, seed, out_dir)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, seed, out_dir)


# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Problem:
    """Operator, right-hand side, element graph and diagonal blocks."""

    A: object
    f: np.ndarray
    graph: object
    blocks: BlockPartition
    d: int


def _problem_spec(prob):
    mesh = CartesianMeshSpec(prob["d"], prob["M"], prob["p"])
    kind, mu, boundary = prob["kind"], float(prob["mu"]), prob["boundary"]
    velocity = prob["velocity"]
    if kind == "convection_diffusion" and prob["peclet"] is not None:
        pe = prob["peclet"]
        if pe == 0:
            # no convection: pure diffusion with the same all-Dirichlet data
            kind, velocity = "poisson_ldg", None
            boundary = boundary or tuple((nm, DIRICHLET) for nm in face_names(prob["d"]))
            mu = 1.0
        else:
            width = mesh.upper[0] - mesh.lower[0]
            mu = 0.0 if math.isinf(pe) else float(np.linalg.norm(velocity)) * width / pe
    return ProblemSpec(kind, mesh, mu=mu, velocity=velocity, boundary=boundary,
                       penalty=prob["penalty"], ldg_tau=float(prob["ldg_tau"]))


def build_problem(cfg):
    """Assemble the configured problem, or load it from files."""
    prob = cfg.problem
    if prob["matrix"] is not None:
        A = mmread(prob["matrix"])
        graph = load_graph(prob["graph"])
        if graph.n_dofs != A.nrows:
            raise ConfigError("graph dof counts do not match the matrix size")
        f = np.loadtxt(prob["rhs"], ndmin=1) if prob["rhs"] is not None else np.ones(A.nrows)
        if f.shape != (A.nrows,):
            raise ConfigError("right-hand side length does not match the matrix")
        return Problem(A, f, graph, graph.dofmap().blocks(), prob["d"])
    system = assemble(_problem_spec(prob))
    return Problem(system.A, system.f, system.graph, system.blocks, prob["d"])


def run_experiment(cfg, problem=None):
    """Set up and solve one configuration.

    Returns
    -------
    report : SolveReport
    hierarchy : MgHierarchy or None
        None for ``block_jacobi_gmres``.
    timing : dict
        Wall-clock seconds per phase.
    """
    t0 = time.perf_counter()
    problem = problem or build_problem(cfg)
    t1 = time.perf_counter()
    h = None
    if cfg.method == "block_jacobi_gmres":
        S = build_smoother(problem.A, "block_jacobi", problem.blocks, seed=cfg.seed, q=cfg.setup.q)
        t2 = t3 = time.perf_counter()
        _, report = pgmres(problem.A, S.inverse, problem.f, cfg.cycle)
        report.levels = [{"k": 0, "dof": problem.A.nrows, "nnz": problem.A.nnz}]
    else:
        aggregates = build_hierarchy(problem.graph, problem.d, seed=cfg.seed)
        t2 = time.perf_counter()
        h = _hierarchy.build(problem.A, problem.graph, aggregates, cfg.setup)
        t3 = time.perf_counter()
        if cfg.method == "mg":
            _, report = solve_mg(h, problem.f, cfg.cycle)
        elif cfg.method == "pcg":
            _, report = pcg(problem.A, mg_preconditioner(h, cfg.cycle), problem.f, cfg.cycle, levels=h)
        else:
            _, report = pgmres(problem.A, mg_preconditioner(h, cfg.cycle), problem.f, cfg.cycle, levels=h)
    t4 = time.perf_counter()
    timing = {"assemble": t1 - t0, "partition": t2 - t1, "setup": t3 - t2, "solve": t4 - t3, "total": t4 - t0}
    return report, h, timing


def _report_json(cfg, report, h):
    out = {"config": cfg.resolved(), "report": report.to_dict(include_time=False)}
    if h is not None:
        out["hierarchy"] = h.summary()
    return json.dumps(out, indent=2, sort_keys=True) + "\n"


def _levels_csv(levels):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "dof", "nnz"])
    for row in levels:
        w.writerow([row["k"], row["dof"], row["nnz"]])
    return buf.getvalue()


def cmd_solve(cfg):
    """Run one experiment and write its report files; returns the exit code."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, h, timing = run_experiment(cfg)
    (out / "report.json").write_text(_report_json(cfg, report, h))
    (out / "hierarchy.csv").write_text(_levels_csv(report.levels))
    timing["wall_time_solver"] = report.wall_time
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    status = "converged" if report.converged else f"not converged ({report.reason})"
    print(f"{cfg.method}: {report.iterations} iterations, residual {report.final_residual:.3e}, {status}")
    return 0 if report.converged else 2


# ---------------------------------------------------------------------------


def parse_axis(text):
    """``"n_cut=4,6,8"`` -> ``("n_cut", ["4", "6", "8"])``."""
    name, sep, values = text.partition("=")
    name = name.strip()
    if not sep or not values.strip():
        raise ConfigError(f"sweep axis must look like name=v1,v2,...; got {text!r}")
    if name not in SWEEP_AXES:
        raise ConfigError(f"cannot sweep over {name!r}; choose from {SWEEP_AXES}")
    return name, [v.strip() for v in values.split(",") if v.strip()]


def _sweep_cell(cfg, assignment):
    row = dict(assignment)
    try:
        cell = cfg
        for name, value in assignment:
            cell = cell.with_axis(name, value)
        report, _, _ = run_experiment(cell)
        row.update(
            iterations=report.iterations if report.converged else cell.cycle.max_iters,
            converged=report.converged,
            dof=report.levels[0]["dof"] if report.levels else "",
            final_residual=repr(float(report.final_residual)),
            error="" if report.converged else report.reason,
        )
    except Exception as exc:  # recorded in-row, the sweep continues
        row.update(iterations=cfg.cycle.max_iters, converged=False, dof="", final_residual="",
                   error=f"{type(exc).__name__}: {exc}")
    return row


def _workers():
    raw = os.environ.get("AGGMG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"AGGMG_THREADS must be an integer, got {raw!r}") from None


def run_sweep(cfg, axes):
    """Solve every combination of the sweep axes; returns the table rows.

    With no axes the table has the single row of the base configuration.
    """
    if len(axes) > 2:
        raise ConfigError("a sweep has at most two axes")
    names = [name for name, _ in axes]
    if len(set(names)) != len(names):
        raise ConfigError("sweep axes must be distinct")
    grid = [tuple(zip(names, combo)) for combo in itertools.product(*[vals for _, vals in axes])]
    workers = min(_workers(), len(grid))
    if workers == 1:
        return [_sweep_cell(cfg, a) for a in grid]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda a: _sweep_cell(cfg, a), grid))


def cmd_sweep(cfg, axes):
    """Write ``sweep.csv``; exit 0 if every cell converged, else 2."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(cfg, axes)
    cols = [name for name, _ in axes] + ["iterations", "converged", "dof", "final_residual", "error"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: row[c] for c in cols})
    for row in rows:
        label = " ".join(f"{n}={row[n]}" for n, _ in axes) or "base"
        print(f"{label}: iterations={row['iterations']} converged={row['converged']}")
    return 0 if all(r["converged"] for r in rows) else 2


# ---------------------------------------------------------------------------


def cmd_export(cfg):
    """Write the operator, right-hand side, element graph and blocks."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    mmwrite(out / "A.mtx", problem.A)
    np.savetxt(out / "rhs.txt", problem.f, fmt="%.17g")
    write_graph(problem.graph, out / "graph.txt")
    blocks = {"offsets": problem.blocks.offsets.tolist(), "sizes": problem.blocks.sizes.tolist()}
    (out / "blocks.json").write_text(json.dumps(blocks) + "\n")
    print(f"exported dim {problem.A.nrows}, nnz {problem.A.nnz} to {out}")
    return 0


def cmd_partition(cfg):
    """Write the nested element aggregates as ``partition.json``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    aggregates = build_hierarchy(problem.graph, problem.d, seed=cfg.seed)
    (out / "partition.json").write_text(aggregates.to_json() + "\n")
    print(f"aggregate counts per level: {aggregates.counts}")
    return 0


# ---------------------------------------------------------------------------


def _parser():
    ap = argparse.ArgumentParser(prog="aggmg", description="Adaptive aggregation multigrid for DG discretisations.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("solve", "set up and solve one configuration"),
        ("sweep", "solve a grid of configurations into a CSV table"),
        ("export", "write matrix, right-hand side, graph and blocks"),
        ("partition", "write the nested element aggregates as JSON"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None, help="TOML experiment file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        if name == "sweep":
            p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                           help=f"sweep axis, one of {', '.join(SWEEP_AXES)}; at most two")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, [parse_axis(a) for a in args.axis])
        if args.command == "export":
            return cmd_export(cfg)
        return cmd_partition(cfg)
    except (ConfigError, OSError, ValueError, ArithmeticError) as exc:
        print(f"aggmg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
