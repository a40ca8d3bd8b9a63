"""Command line driver.

Subcommands
-----------
dre-solve     solve the DRE for a benchmark and write gains, ranks and runtime
convergence   error and observed order against the dense reference over ``n_t``
simulate      closed-loop simulation of a benchmark
compare       numerical diff of two result directories

Configuration is JSON (``--config``); command line flags override file fields.
A ``"sweep"`` object maps field names to value lists; the cross product runs
in a process pool whose size is read from ``RICCATI_FEEDBACK_WORKERS``.

Exit codes: 0 success, 1 ``compare`` found differences, 2 configuration
error, 3 numerical failure, 4 guard violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .adapt import AdaptiveConfig
from .are import AreDivergenceError, FactorizationError
from .bench import BenchmarkSpec, eoc
from .closedloop import NewtonFailure, UndefinedIndexError, performance_index, simulate
from .dre_bdf import GainTrajectory, StepFailure, solve_dre_bdf
from .dre_ref import MAX_DIM, StiffnessError, e_dre, e_gain, reference_gain, solve_reference
from .dre_split import SingularStepError, UnsupportedProblemError, solve_dre_splitting
from .lowrank import GuardError, from_dense

logger = logging.getLogger("riccati_feedback")

EXIT_OK, EXIT_DIFF, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GUARD = 0, 1, 2, 3, 4
WORKERS_ENV = "RICCATI_FEEDBACK_WORKERS"
NUMERIC_ERRORS = (StepFailure, AreDivergenceError, FactorizationError, StiffnessError,
                  SingularStepError, NewtonFailure, np.linalg.LinAlgError, FloatingPointError)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Schema of a run configuration (all fields optional in the JSON file).

    ``n_t`` and ``coupling`` default to the benchmark's table entry.
    ``adaptive`` holds :class:`AdaptiveConfig` fields and switches the FT
    scheme to adaptive steps. ``methods`` lists ``bdf1``..``bdf4``, ``lie``,
    ``strang`` or ``reference`` for ``convergence``.
    """

    benchmark: str = "small_laplacian"
    benchmark_params: dict = field(default_factory=dict)
    solver: str = "bdf"
    p: int = 1
    variant: str = "strang"
    n_t: Optional[int] = None
    n_ord: int = 10
    lam: Optional[float] = None
    are_backend: str = "auto"
    tol: float = 1e-13
    ref_rel_tol: float = 1e-10
    ref_abs_tol: float = 1e-20
    keep_factors: str = "none"
    methods: list = field(default_factory=lambda: ["bdf1", "bdf2"])
    n_t_list: list = field(default_factory=lambda: [64, 128, 256, 512])
    metric: str = "dre"
    scheme: str = "IE"
    coupling: Optional[str] = None
    adaptive: Optional[dict] = None
    gains_dir: Optional[str] = None
    gain_p: int = 1
    output: str = "results"
    sweep: dict = field(default_factory=dict)
    max_sweep: int = 256

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def check(self):
        try:
            spec = self.spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.solver not in ("bdf", "splitting", "reference"):
            raise ConfigError(f"unknown solver {self.solver!r}; expected bdf, splitting or reference")
        if self.p not in (1, 2, 3, 4):
            raise ConfigError(f"invalid BDF order p={self.p}; valid orders are 1, 2, 3, 4")
        if self.variant not in ("lie", "strang"):
            raise ConfigError(f"unknown splitting variant {self.variant!r}; expected lie or strang")
        if self.scheme not in ("IE", "TR", "FT"):
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected IE, TR or FT")
        if self.metric not in ("dre", "gain"):
            raise ConfigError("metric must be dre or gain")
        if self.n_t is not None and int(self.n_t) < 1:
            raise ConfigError("n_t must be positive")
        for m in self.methods:
            if m not in ("bdf1", "bdf2", "bdf3", "bdf4", "lie", "strang", "reference"):
                raise ConfigError(f"unknown convergence method {m!r}")
        if self.coupling not in (None, "implicit", "lagged"):
            raise ConfigError("coupling must be implicit or lagged")
        if self.adaptive is not None:
            try:
                AdaptiveConfig(**self.adaptive)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid adaptive config: {exc}") from exc
        names = {f.name for f in dataclasses.fields(self)} - {"sweep", "max_sweep"}
        for key, values in self.sweep.items():
            base = key.split(".", 1)[0]
            if base not in names:
                raise ConfigError(f"cannot sweep unknown field {key!r}")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep values for {key!r} must be a non-empty list")
        return spec

    def spec(self) -> BenchmarkSpec:
        params = dict(self.benchmark_params)
        if self.lam is not None:
            params["lam"] = self.lam
        return BenchmarkSpec(self.benchmark, params)

    @property
    def steps(self) -> int:
        return int(self.n_t if self.n_t is not None else self.spec().resolved["n_t"])

    def expand(self) -> list:
        """Cross product of the sweep lists (``[self]`` without a sweep)."""
        if not self.sweep:
            return [self]
        keys = sorted(self.sweep)
        size = int(np.prod([len(self.sweep[k]) for k in keys]))
        if size > self.max_sweep:
            raise ConfigError(f"sweep has {size} entries, above the cap of {self.max_sweep}")
        out = []
        for combo in itertools.product(*(self.sweep[k] for k in keys)):
            d = self.to_dict()
            d["sweep"] = {}
            for k, v in zip(keys, combo):
                if "." in k:
                    base, sub = k.split(".", 1)
                    d[base] = {**(d[base] or {}), sub: v}
                else:
                    d[k] = v
            out.append(RunConfig.from_dict(d))
        return out


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def provenance(cfg: RunConfig, command: str) -> dict:
    return {"artifact": "riccati_feedback", "version": __version__, "command": command,
            "config_hash": config_hash(cfg), "config": cfg.to_dict()}


def write_csv(path: Path, header: list, rows, prov: dict, fmt="%.17g"):
    """CSV with header row plus a ``<name>.provenance.json`` sidecar."""
    path = Path(path)
    arr = np.asarray(rows, dtype=float).reshape(-1, len(header))
    np.savetxt(path, arr, delimiter=",", header=",".join(header), comments="", fmt=fmt)
    _sidecar(path, prov)


def _sidecar(path: Path, prov: dict):
    side = path.with_name(path.name + ".provenance.json")
    side.write_text(json.dumps({**prov, "file": path.name}, indent=1, sort_keys=True))


def _write_json(path: Path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=str))


# -- dre-solve -------------------------------------------------------------------------

def solve_gains(cfg: RunConfig, system, keep_factors=None) -> GainTrajectory:
    grid = np.linspace(system.t0, system.t_end, cfg.steps + 1)
    keep = keep_factors or cfg.keep_factors
    if cfg.solver == "bdf":
        return solve_dre_bdf(system, grid, p=cfg.p, n_ord=cfg.n_ord,
                             are_backend=cfg.are_backend, tol=cfg.tol, keep_factors=keep)
    if cfg.solver == "splitting":
        return solve_dre_splitting(system, grid, variant=cfg.variant, keep_factors=keep)
    if system.dim > MAX_DIM:
        raise GuardError(f"reference solver limited to n <= {MAX_DIM} (got {system.dim})")
    ref = solve_reference(system, grid, rel_tol=cfg.ref_rel_tol, abs_tol=cfg.ref_abs_tol)
    gains = [reference_gain(system, t, X) for t, X in zip(ref.times, ref.X)]
    ranks = [(float(t), from_dense(X).s) for t, X in zip(ref.times, ref.X)]
    return GainTrajectory(grid, gains, {}, {"solver": "reference", "ranks": ranks})


def _build(cfg: RunConfig):
    built = cfg.spec().build()
    return built if isinstance(built, tuple) else (built, None)


def run_dre_solve(cfg: RunConfig, out: Path) -> dict:
    system, _ = _build(cfg)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, "dre-solve")
    started = time.perf_counter()
    traj = solve_gains(cfg, system)
    runtime = time.perf_counter() - started
    traj.save(out, provenance=prov)
    ranks = sorted(traj.metadata.get("ranks", []))
    write_csv(out / "ranks.csv", ["t", "rank"], ranks, prov)
    _write_json(out / "runtime.json", {"runtime_s": runtime, "n_t": cfg.steps,
                                        "solver": cfg.solver})
    return {"status": "ok", "n_gains": len(traj), "runtime": runtime}


# -- convergence -----------------------------------------------------------------------

def _method_cfg(cfg: RunConfig, method: str, n_t: int) -> RunConfig:
    d = cfg.to_dict()
    d.update(n_t=n_t, sweep={})
    if method.startswith("bdf"):
        d.update(solver="bdf", p=int(method[3:]))
    elif method in ("lie", "strang"):
        d.update(solver="splitting", variant=method)
    else:
        d.update(solver="reference")
    return RunConfig.from_dict(d)


def run_convergence(cfg: RunConfig, out: Path) -> dict:
    system, _ = _build(cfg)
    if system.dim > MAX_DIM:
        raise GuardError(f"no reference available for n={system.dim} > {MAX_DIM}; "
                         "convergence studies need the dense reference")
    out.mkdir(parents=True, exist_ok=True)
    t0 = system.t0
    ref = solve_reference(system, [t0], rel_tol=cfg.ref_rel_tol, abs_tol=cfg.ref_abs_tol)
    X_ref = ref.X[0]
    K_ref = reference_gain(system, t0, X_ref)
    rows, table = [], {}
    for mi, method in enumerate(cfg.methods):
        errs = []
        for n_t in cfg.n_t_list:
            mc = _method_cfg(cfg, method, n_t)
            if method == "reference":
                X = solve_reference(system, [t0], rel_tol=cfg.ref_rel_tol,
                                    abs_tol=cfg.ref_abs_tol).X[0]
                K = reference_gain(system, t0, X)
            else:
                traj = solve_gains(mc, system, keep_factors="final")
                X, K = traj.factor_at(0), traj.gains[0]
            err = e_dre(X, X_ref) if cfg.metric == "dre" else e_gain(K, K_ref)
            errs.append(err)
        orders = [np.nan] + (eoc(errs) if all(e > 0 for e in errs) else
                             [np.nan] * (len(errs) - 1))
        table[method] = {"n_t": list(cfg.n_t_list), "error": errs, "eoc": orders[1:]}
        rows += [[mi, n, e, o] for n, e, o in zip(cfg.n_t_list, errs, orders)]
    prov = provenance(cfg, "convergence")
    prov["methods"] = {str(i): m for i, m in enumerate(cfg.methods)}
    write_csv(out / "convergence.csv", ["method", "n_t", "error", "eoc"], rows, prov)
    _write_json(out / "convergence.json", table)
    return {"status": "ok", "table": table}


# -- simulate --------------------------------------------------------------------------

def run_simulate(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.spec()
    if spec.id != "surrogate_nl":
        raise ConfigError("simulate needs a benchmark with a closed-loop model (surrogate_nl)")
    system, cls = _build(cfg)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, "simulate")
    grid = np.linspace(system.t0, system.t_end, cfg.steps + 1)
    started = time.perf_counter()
    if cfg.gains_dir:
        gains = GainTrajectory.load(cfg.gains_dir)
    else:
        gcfg = RunConfig.from_dict({**cfg.to_dict(), "solver": "bdf", "p": cfg.gain_p,
                                    "sweep": {}})
        gains = solve_gains(gcfg, system)
    gain_time = time.perf_counter() - started
    coupling = cfg.coupling or spec.resolved.get("coupling", "implicit")
    adaptivity = AdaptiveConfig(**cfg.adaptive) if cfg.adaptive is not None else None
    scheme = "FT" if adaptivity is not None else cfg.scheme
    if adaptivity is not None and cfg.scheme != "FT":
        raise ConfigError("adaptive step sizes require scheme FT")
    res = simulate(cls, gains, scheme, grid, adaptivity=adaptivity, coupling=coupling)
    res.to_csv(out / "trajectory.csv")
    _sidecar(out / "trajectory.csv", prov)
    summary = res.summary()
    summary.update(n_t=cfg.steps, gain_runtime=gain_time, realized_steps=res.n_steps)
    try:
        summary["performance_index"] = performance_index(res, cls)
    except UndefinedIndexError:
        summary["performance_index"] = None
    _write_json(out / "summary.json", summary)
    return {"status": "ok", **summary}


# -- compare ---------------------------------------------------------------------------

def compare_dirs(a, b, rtol=1e-12, atol=0.0) -> list:
    """Return human-readable differences between the CSV files of two directories."""
    a, b = Path(a), Path(b)
    fa = {p.relative_to(a) for p in a.rglob("*.csv")}
    fb = {p.relative_to(b) for p in b.rglob("*.csv")}
    diffs = [f"only in {a}: {p}" for p in sorted(fa - fb)]
    diffs += [f"only in {b}: {p}" for p in sorted(fb - fa)]
    for rel in sorted(fa & fb):
        xa = np.genfromtxt(a / rel, delimiter=",", skip_header=_header_rows(a / rel))
        xb = np.genfromtxt(b / rel, delimiter=",", skip_header=_header_rows(b / rel))
        if xa.shape != xb.shape:
            diffs.append(f"{rel}: shape {xa.shape} vs {xb.shape}")
        elif not np.allclose(xa, xb, rtol=rtol, atol=atol, equal_nan=True):
            gap = np.nanmax(np.abs(xa - xb))
            diffs.append(f"{rel}: max abs difference {gap:.3e}")
    return diffs


def _header_rows(path) -> int:
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.split(",")]
        return 0
    except ValueError:
        return 1


# -- driver ----------------------------------------------------------------------------

RUNNERS = {"dre-solve": run_dre_solve, "convergence": run_convergence,
           "simulate": run_simulate}


def _run_one(args):
    command, cfg_dict, out = args
    cfg = RunConfig.from_dict(cfg_dict)
    return RUNNERS[command](cfg, Path(out))


def execute(command: str, cfg: RunConfig) -> list:
    """Run a (possibly swept) configuration; returns one summary per entry."""
    entries = cfg.expand()
    base = Path(cfg.output)
    if len(entries) == 1:
        return [RUNNERS[command](entries[0], base)]
    jobs = [(command, e.to_dict(), str(base / f"run_{i:03d}")) for i, e in enumerate(entries)]
    workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    base.mkdir(parents=True, exist_ok=True)
    index = [{"directory": Path(j[2]).name,
              "overrides": {k: v for k, v in zip(sorted(cfg.sweep),
                                                 _combo(e, sorted(cfg.sweep)))}}
             for j, e in zip(jobs, entries)]
    _write_json(base / "index.json", {"command": command, "entries": index,
                                      "provenance": provenance(cfg, command)})
    return results


def _combo(cfg: RunConfig, keys):
    d = cfg.to_dict()
    vals = []
    for k in keys:
        if "." in k:
            base, sub = k.split(".", 1)
            vals.append((d[base] or {}).get(sub))
        else:
            vals.append(d[k])
    return vals


def _add_common(sp):
    sp.add_argument("--config", help="JSON run configuration")
    sp.add_argument("--benchmark", choices=["small_laplacian", "conduction_tv", "surrogate_nl"])
    sp.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                    help="benchmark parameter override (JSON value)")
    sp.add_argument("--lam", type=float)
    sp.add_argument("--n-t", dest="n_t", type=int, help="number of time steps")
    sp.add_argument("--output", "-o")
    sp.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2",
                    help="sweep a config field over comma-separated JSON values")
    sp.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riccati-feedback", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("dre-solve", help="solve the DRE and write gains")
    _add_common(sp)
    sp.add_argument("--solver", choices=["bdf", "splitting", "reference"])
    sp.add_argument("--p", type=int)
    sp.add_argument("--variant", choices=["lie", "strang"])
    sp.add_argument("--n-ord", dest="n_ord", type=int)
    sp.add_argument("--are-backend", dest="are_backend", choices=["auto", "dense", "lowrank"])
    sp.add_argument("--keep-factors", dest="keep_factors", choices=["none", "final", "all"])

    sp = sub.add_parser("convergence", help="errors and observed orders against the reference")
    _add_common(sp)
    sp.add_argument("--methods", nargs="+")
    sp.add_argument("--n-t-list", dest="n_t_list", nargs="+", type=int)
    sp.add_argument("--n-ord", dest="n_ord", type=int)
    sp.add_argument("--metric", choices=["dre", "gain"])

    sp = sub.add_parser("simulate", help="closed-loop simulation")
    _add_common(sp)
    sp.add_argument("--scheme", choices=["IE", "TR", "FT"])
    sp.add_argument("--coupling", choices=["implicit", "lagged"])
    sp.add_argument("--adaptive", action="store_true", help="adaptive FT steps")
    sp.add_argument("--indicator", choices=["error", "control_abs", "control_scaled"])
    sp.add_argument("--TOL", type=float)
    sp.add_argument("--gains-dir", dest="gains_dir")

    sp = sub.add_parser("compare", help="compare the CSV files of two result directories")
    sp.add_argument("left")
    sp.add_argument("right")
    sp.add_argument("--rtol", type=float, default=1e-12)
    sp.add_argument("--atol", type=float, default=0.0)
    return parser


_FLAG_FIELDS = ("benchmark", "lam", "n_t", "output", "solver", "p", "variant", "n_ord",
                "are_backend", "keep_factors", "methods", "n_t_list", "metric", "scheme",
                "coupling", "gains_dir")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def config_from_args(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for name in _FLAG_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            d[name] = val
    params = dict(d.get("benchmark_params", {}))
    for item in args.param:
        if "=" not in item:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = _parse_value(v)
    if params:
        d["benchmark_params"] = params
    if getattr(args, "adaptive", False) or getattr(args, "indicator", None) or \
            getattr(args, "TOL", None) is not None:
        ad = dict(d.get("adaptive") or {})
        if args.indicator:
            ad["indicator"] = args.indicator
        if args.TOL is not None:
            ad["TOL"] = args.TOL
        d["adaptive"] = ad
        d.setdefault("scheme", "FT")
        if getattr(args, "scheme", None) is None:
            d["scheme"] = "FT"
    sweep = dict(d.get("sweep", {}))
    for item in args.sweep:
        if "=" not in item:
            raise ConfigError(f"--sweep expects KEY=V1,V2, got {item!r}")
        k, v = item.split("=", 1)
        sweep[k] = [_parse_value(x) for x in v.split(",")]
    if sweep:
        d["sweep"] = sweep
    try:
        return RunConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare":
        diffs = compare_dirs(args.left, args.right, args.rtol, args.atol)
        for line in diffs:
            print(line)
        if not diffs:
            print("no differences")
        return EXIT_DIFF if diffs else EXIT_OK
    try:
        cfg = config_from_args(args)
        results = execute(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GuardError, UnsupportedProblemError) as exc:
        print(f"guard violation: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for r in results:
        brief = {k: v for k, v in r.items() if k in ("status", "outcome", "n_gains",
                                                     "realized_steps", "runtime")}
        print(json.dumps(brief, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
