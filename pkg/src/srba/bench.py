"""Experiment harness: TOML configs, problem construction, sweeps, manifests.

A config has four tables::

    [problem]   kind = "quadratic" | "hyperparam" | "datacleaning" | "worstcase"
    [solver]    kind = "srba" | "fullbatch_gd" | "soba", T, batch_size, R, ...
    [grid]      rho = [...], gamma = [...], q = [...] or q_scale = [...]
    [run]       seeds = [...], out = "runs"

``q_scale = a`` expands to ``q = round(a (n + m) / batch_size)``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import fullbatch_gd_run, soba_run
from .errors import ConfigurationError, DivergenceError, SrbaError
from .io import write_trace_csv
from .lower_bound import WorstCaseProblem, make_worstcase, make_worstcase_for_chain
from .oracle import BilevelProblem
from .problems import (
    QuadraticBilevel,
    load_dataset,
    make_blobs,
    make_datacleaning,
    make_hyperparam_problem,
    make_quadratic,
    make_two_class,
)
from .solver import SrbaConfig, srba_run
from .verify import fd_hypergradient, implicit_hypergradient, solve_inner

SOLVERS = {"srba": srba_run, "fullbatch_gd": fullbatch_gd_run, "soba": soba_run}
PROBLEM_KINDS = ("quadratic", "hyperparam", "datacleaning", "worstcase")
DATA_MONITOR_EVERY = 50  # outer iterations between hypergradient estimates


@dataclass
class ExperimentConfig:
    problem: dict
    solver: dict
    grid: dict
    seeds: list
    out: str = "runs"
    source: Optional[str] = None
    raw: bytes = b""

    def config_hash(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigurationError(f"{where}: missing field '{key}'")
    return table[key]


def _as_list(val, where):
    vals = val if isinstance(val, list) else [val]
    if not vals:
        raise ConfigurationError(f"{where}: grid must not be empty")
    return vals


def parse_config(text: str, source: Optional[str] = None) -> ExperimentConfig:
    where = source or "<config>"
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc
    problem = dict(_require(data, "problem", where))
    solver = dict(_require(data, "solver", where))
    grid = dict(data.get("grid", {}))
    run = dict(data.get("run", {}))
    kind = _require(problem, "kind", f"{where} [problem]")
    if kind not in PROBLEM_KINDS:
        raise ConfigurationError(f"{where} [problem].kind: unknown kind {kind!r}")
    skind = _require(solver, "kind", f"{where} [solver]")
    if skind not in SOLVERS:
        raise ConfigurationError(f"{where} [solver].kind: unknown solver {skind!r}")
    for key in ("rho", "gamma"):
        src = grid if key in grid else solver
        grid[key] = _as_list(_require(src, key, f"{where} [grid]"), f"{where} [grid].{key}")
    if "q" in grid and "q_scale" in grid:
        raise ConfigurationError(f"{where} [grid]: give either q or q_scale, not both")
    if "q_scale" in grid:
        grid["q_scale"] = _as_list(grid["q_scale"], f"{where} [grid].q_scale")
    else:
        grid["q"] = _as_list(grid.get("q", solver.get("q", 1)), f"{where} [grid].q")
    seeds = run.get("seeds", [solver.get("seed", 0)])
    seeds = _as_list(seeds, f"{where} [run].seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError(f"{where} [run].seeds: seeds must be distinct")
    env_seed = os.environ.get("SRBA_BENCH_SEED")
    if env_seed:
        try:
            seeds = [int(env_seed)]
        except ValueError as exc:
            raise ConfigurationError(f"SRBA_BENCH_SEED must be an integer, got {env_seed!r}") from exc
    return ExperimentConfig(problem, solver, grid, seeds, str(run.get("out", "runs")), source,
                            text.encode("utf-8"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# problems and monitors


def _dataset_pair(spec: dict, synth):
    if "train" in spec:
        train = load_dataset(spec["train"])
        val = load_dataset(_require(spec, "val", "[problem]"))
        return train, val
    return synth()


def build_problem(spec: dict) -> BilevelProblem:
    kind = spec["kind"]
    try:
        if kind == "quadratic":
            return make_quadratic(
                int(spec.get("seed", 0)), int(spec.get("p", 10)), int(spec.get("d", 10)),
                int(spec.get("n", 8)), int(spec.get("m", 8)),
                mu_min=float(spec.get("mu_min", 1.0)), L_max=float(spec.get("L_max", 4.0)),
                coupling=float(spec.get("coupling", 1.0)),
                outer_curvature=float(spec.get("outer_curvature", 0.1)),
                heterogeneity=float(spec.get("heterogeneity", 1.0)),
            )
        if kind == "hyperparam":
            def synth():
                seed = int(spec.get("data_seed", 0))
                kw = dict(n_features=int(spec.get("n_features", 20)),
                          n_informative=int(spec.get("n_informative", 5)),
                          separation=float(spec.get("separation", 1.0)),
                          flip=float(spec.get("flip", 0.1)))
                train, w = make_two_class(seed, int(spec.get("n_train", 512)), **kw)
                val, _ = make_two_class(seed + 1, int(spec.get("n_val", 512)), w_true=w, **kw)
                return train, val
            train, val = _dataset_pair(spec, synth)
            return make_hyperparam_problem(train, val, float(spec.get("lambda_floor", -4.0)))
        if kind == "datacleaning":
            def synth():
                seed = int(spec.get("data_seed", 0))
                kw = dict(n_features=int(spec.get("n_features", 10)),
                          n_classes=int(spec.get("n_classes", 3)))
                train, centers = make_blobs(seed, int(spec.get("n_train", 600)), **kw)
                val, _ = make_blobs(seed + 1, int(spec.get("n_val", 300)), centers=centers, **kw)
                return train, val
            train, val = _dataset_pair(spec, synth)
            prob, _ = make_datacleaning(train, val, float(spec.get("p_c", 0.5)),
                                        float(spec.get("C_r", 0.2)), int(spec.get("corrupt_seed", 0)))
            return prob
        if kind == "worstcase":
            m, n, eps = int(spec.get("m", 4)), int(spec.get("n", 1)), float(spec["epsilon"])
            if "Delta" in spec:
                inst = make_worstcase(m, n, eps, float(spec["Delta"]), seed=int(spec.get("seed", 0)))
            else:
                inst = make_worstcase_for_chain(m, n, int(spec.get("chain", 8)), eps,
                                                seed=int(spec.get("seed", 0)))
            return inst.problem
    except KeyError as exc:
        raise ConfigurationError(f"[problem]: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SrbaError):
            raise
        raise ConfigurationError(f"[problem]: {exc}") from exc
    raise ConfigurationError(f"unknown problem kind {kind!r}")


def known_h_star(problem: BilevelProblem) -> Optional[float]:
    if isinstance(problem, QuadraticBilevel):
        return problem.h_min()
    if isinstance(problem, WorstCaseProblem):
        return 0.0
    return None


def make_monitor(problem: BilevelProblem, grad_method: str = "implicit"):
    """Metric callback: closed forms where available, accurate solves otherwise."""
    if isinstance(problem, QuadraticBilevel):
        H, g = problem.h_quadratic_form()

        def mon(u):
            gr = H @ u.x + g
            return {"h": problem.h(u.x), "grad_h_sq": float(gr @ gr)}
        return mon
    if isinstance(problem, WorstCaseProblem):
        def mon(u):
            gr = problem.grad_h(u.x)
            return {"h": problem.h(u.x), "grad_h_sq": float(gr @ gr)}
        return mon

    def mon(u):
        z = solve_inner(problem, u.x, 1e-10, z0=u.z)
        if grad_method == "fd":
            gr = fd_hypergradient(problem, u.x, inner_tol=1e-10)
        else:
            gr = implicit_hypergradient(problem, u.x, 1e-10, z0=z)
        return {"h": problem.value_F(z, u.x), "grad_h_sq": float(gr @ gr)}
    return mon


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class RunSpec:
    solver: str
    rho: float
    gamma: float
    q: int
    seed: int

    @property
    def run_id(self) -> str:
        return f"{self.solver}_rho{self.rho:g}_gamma{self.gamma:g}_q{self.q}_seed{self.seed}"


@dataclass
class RunOutcome:
    spec: RunSpec
    status: str
    trace: list = field(default_factory=list)
    message: str = ""


def expand_grid(cfg: ExperimentConfig, problem: BilevelProblem) -> list:
    skind = cfg.solver["kind"]
    batch = int(cfg.solver.get("batch_size", 1))
    if "q_scale" in cfg.grid:
        qs = [max(1, round(a * (problem.n + problem.m) / batch)) for a in cfg.grid["q_scale"]]
    else:
        qs = [int(q) for q in cfg.grid["q"]]
    if skind != "srba":
        qs = [1]
    specs = []
    for rho, gamma, q, seed in itertools.product(cfg.grid["rho"], cfg.grid["gamma"],
                                                 list(dict.fromkeys(qs)), cfg.seeds):
        specs.append(RunSpec(skind, float(rho), float(gamma), int(q), int(seed)))
    return specs


def _solver_config(cfg: ExperimentConfig, spec: RunSpec, problem: BilevelProblem) -> SrbaConfig:
    s = cfg.solver
    R = s.get("R")
    if isinstance(R, str):
        if R.lower() not in ("inf", "none"):
            raise ConfigurationError(f"[solver].R: expected a number or 'inf', got {R!r}")
        R = math.inf
    T = int(_require(s, "T", "[solver]"))
    data_problem = known_h_star(problem) is None
    period = int(s.get("monitor_period", DATA_MONITOR_EVERY * spec.q if data_problem else 1))
    sc = SrbaConfig(rho=spec.rho, gamma=spec.gamma, q=spec.q, T=T, R=R, seed=spec.seed,
                    batch_size=int(s.get("batch_size", 1)),
                    step_decay=tuple(s.get("step_decay", (0.0, 0.0))),
                    monitor_period=period, timing=bool(s.get("timing", False)))
    sc.validate()
    return sc


def execute(cfg: ExperimentConfig, spec: RunSpec) -> RunOutcome:
    problem = build_problem(cfg.problem)
    sc = _solver_config(cfg, spec, problem)
    monitor = make_monitor(problem, cfg.solver.get("grad_monitor", "implicit"))
    try:
        res = SOLVERS[spec.solver](problem, sc, monitor=monitor)
    except DivergenceError as exc:
        trace = exc.result.trace if exc.result is not None else []
        return RunOutcome(spec, "diverged", trace, str(exc))
    return RunOutcome(spec, "ok", res.trace)


def _execute_star(args):
    return execute(*args)


def version_string() -> str:
    from . import __version__
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def apply_subopt(outcomes: list, h_star: Optional[float]) -> Optional[float]:
    """Fill ``subopt``; without a known ``h*`` use the sweep-wide minimum."""
    if h_star is None:
        vals = [r.h for o in outcomes for r in o.trace
                if r.h is not None and math.isfinite(r.h)]
        h_star = min(vals) if vals else None
    if h_star is None:
        return None
    for o in outcomes:
        for r in o.trace:
            if r.h is not None:
                r.subopt = max(0.0, r.h - h_star) if math.isfinite(r.h) else None
    return h_star


def run_sweep(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> dict:
    """Run every grid point and seed, write CSVs and ``manifest.json``.

    Returns the manifest dict (with an extra ``exit_code`` entry: 0 when at
    least one run finished, 4 when every run diverged).
    """
    problem = build_problem(cfg.problem)
    specs = expand_grid(cfg, problem)
    for spec in specs:
        _solver_config(cfg, spec, problem)  # fail fast on bad solver fields
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_execute_star, [(cfg, s) for s in specs]))
    else:
        outcomes = [execute(cfg, s) for s in specs]
    h_star = apply_subopt(outcomes, known_h_star(problem))
    entries = []
    for o in outcomes:
        fname = f"{o.spec.run_id}.csv"
        write_trace_csv(o.trace, out / fname)
        last = o.trace[-1] if o.trace else None
        entries.append({
            "file": fname, "solver": o.spec.solver, "rho": o.spec.rho, "gamma": o.spec.gamma,
            "q": o.spec.q, "seed": o.spec.seed, "status": o.status, "rows": len(o.trace),
            "final_h": None if last is None else last.h,
            "final_grad_h_sq": None if last is None else last.grad_h_sq,
            "message": o.message,
        })
    manifest = {
        "config": cfg.source,
        "config_hash": cfg.config_hash(),
        "version": version_string(),
        "problem": cfg.problem,
        "h_star": h_star,
        "h_star_source": "known" if known_h_star(problem) is not None else "sweep minimum",
        "runs": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    ok = any(e["status"] == "ok" for e in entries)
    manifest["exit_code"] = 0 if ok else 4
    return manifest
