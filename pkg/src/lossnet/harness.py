"""Experiment orchestration: dispatch a validated config and emit a result bundle.

Every run writes its data files (CSV for tables, JSON for structured
results) plus ``manifest.json``; the manifest is written even when the run
fails and lists each data file with its SHA-256.  Data files depend only on
the config and seed, so reruns are byte-identical; wall time and other
volatile facts live in the manifest alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, VERIFY_SUITES
from .ctmc import (
    BallRegion,
    SublevelRegion,
    default_ball_region,
    path_vs_ode,
    run_exit_times,
    simulate,
    slow_mode_region,
    write_event_log,
)
from .exceptions import ConvergenceError, PreconditionError, StepSizeError
from .largedev import quasipotential, reversibility_residual, verify_hjb
from .meanfield import (
    dirichlet_form,
    find_equilibria,
    integrate,
    lyapunov_derivative,
    lyapunov_g,
    lyapunov_g_entropy_form,
    lyapunov_value,
)
from .models import Closed, Mobile, MobileSplit, Open, model_from_dict
from .statespace import (
    EmpiricalVector,
    as_simplex,
    blocking_probability,
    erlang_measure,
    gibbs_entropy_identity,
    log_partition,
    log_weights,
    marginal_mean,
)

log = logging.getLogger(__name__)

__all__ = ["ResultBundle", "VerifyEntry", "run", "verify_suite", "resolve_point"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OUT_ENV = "LOSSNET_OUT"


@dataclass
class ResultBundle:
    out_dir: Path
    files: dict[str, str] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK


@dataclass
class VerifyEntry:
    check: str
    suite: str
    residual: float
    tolerance: float
    status: str  # pass, fail, expected-fail, skipped
    note: str = ""

    def row(self) -> dict:
        return {"suite": self.suite, "check": self.check, "residual": repr(float(self.residual)),
                "tolerance": repr(float(self.tolerance)), "status": self.status, "note": self.note}


# --------------------------------------------------------------------- writing
class _Writer:
    """Serialized writer that hashes what it writes."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def _put(self, name: str, data: bytes) -> None:
        (self.out_dir / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def csv(self, name: str, rows: list[dict], columns: list[str] | None = None) -> None:
        buf = io.StringIO()
        columns = columns or (list(rows[0]) if rows else [])
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        self._put(name, buf.getvalue().encode())

    def json(self, name: str, obj) -> None:
        self._put(name, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())

    def register(self, name: str) -> None:
        """Hash a file some other routine wrote into the output directory."""
        self.files[name] = hashlib.sha256((self.out_dir / name).read_bytes()).hexdigest()


def _num(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------- points
def resolve_point(model, spec, cache: dict | None = None) -> np.ndarray:
    """Turn a config point (vector or keyword) into a simplex vector."""
    S = model.statespace.size
    if isinstance(spec, (list, tuple)):
        if len(spec) != S:
            raise ValueError(f"point has {len(spec)} entries, state space has {S}")
        return as_simplex(spec)
    if spec == "uniform":
        return np.full(S, 1.0 / S)
    if spec.startswith("delta:"):
        k = int(spec.split(":", 1)[1])
        if not 0 <= k < S:
            raise ValueError(f"delta index {k} outside 0..{S - 1}")
        return np.eye(S)[k]
    if spec == "equilibrium" or spec.startswith("equilibrium:"):
        i = int(spec.split(":", 1)[1]) if ":" in spec else 0
        stable = _stable(model, cache)
        if i >= len(stable):
            raise PreconditionError(f"requested stable equilibrium {i}, found {len(stable)}")
        return stable[i].y
    raise ValueError(f"unknown point keyword {spec!r}")


def _stable(model, cache: dict | None):
    if cache is not None and "report" in cache:
        report = cache["report"]
    else:
        report = find_equilibria(model)
        if cache is not None:
            cache["report"] = report
    return report.stable


# ---------------------------------------------------------------- commands
def _integrate(cfg, model, w: _Writer, meta: dict) -> None:
    blk = cfg.block("integrate")
    y0 = resolve_point(model, blk.y0)
    traj = integrate(model, y0, blk.T, tol=blk.tol)
    t = np.linspace(0.0, blk.T, blk.samples)
    ys = traj.sample(t)
    S = model.statespace.size
    has_lyap = isinstance(model, (Mobile, Closed, Open))
    rows = []
    for ti, yi in zip(t, ys):
        row = {"t": _num(ti)}
        row.update({f"y{n}": _num(v) for n, v in enumerate(yi)})
        if has_lyap:
            row["lyapunov"] = _num(lyapunov_value(model, np.clip(yi, 0.0, None)))
        rows.append(row)
    w.csv("trajectory.csv", rows)
    meta["results"] = {"steps": traj.steps, "min_before_renormalization": traj.min_before_renormalization,
                       "states": S}


def _equilibria(cfg, model, w: _Writer, meta: dict, cache: dict) -> None:
    blk = cfg.block("equilibria")
    report = find_equilibria(model, points=blk.points, per_axis=blk.per_axis,
                             bounds=tuple(blk.bounds), merge_radius=blk.merge_radius)
    cache["report"] = report
    w.csv("equilibria.csv", report.rows())
    meta["results"] = {"equilibria": len(report), "stable": len(report.stable)}


def _simulate(cfg, model, w: _Writer, meta: dict, cache: dict) -> None:
    blk = cfg.block("simulate")
    y0 = EmpiricalVector.nearest(resolve_point(model, blk.y0, cache), blk.N)
    path = simulate(model, blk.N, y0, blk.T, cfg.seed)
    t = np.linspace(0.0, blk.T, blk.samples)
    k = np.searchsorted(path.times, t, side="right")
    counts = path.counts_matrix()[k]
    rows = []
    for ti, c in zip(t, counts):
        row = {"t": _num(ti)}
        row.update({f"n{i}": int(v) for i, v in enumerate(c)})
        rows.append(row)
    w.csv("path.csv", rows)
    summary = {"N": blk.N, "T": blk.T, "events": path.n_events, "status": path.status,
               "digest": path.digest(), "initial_counts": y0.counts.tolist(),
               "final_counts": path.final_counts.tolist()}
    if blk.compare_ode:
        traj = integrate(model, y0.y, blk.T)
        summary["sup_deviation_from_ode"] = path_vs_ode(path, traj)
    w.json("simulate.json", summary)
    if blk.event_log:
        write_event_log(path, w.out_dir / "events.bin")
        w.register("events.bin")
    meta["results"] = {"events": path.n_events, "status": path.status}


def _region(model, blk, y_star, others):
    spec = blk.region
    if spec.kind == "g_sublevel":
        if not isinstance(model, Mobile):
            raise PreconditionError("g_sublevel regions need a mobile model")
        if spec.delta is None or spec.cap is None:
            raise ValueError("g_sublevel region needs delta and cap")
        return SublevelRegion(model, y_star, spec.delta, spec.cap)
    if spec.radius is not None:
        radius = spec.radius
    elif spec.fraction is not None:
        if not others:
            raise PreconditionError("region fraction needs another equilibrium to measure against")
        if spec.kind == "slow_mode":
            probe = slow_mode_region(model, y_star, 1.0)
            radius = spec.fraction * min(float(np.abs(probe.W @ (o - y_star)).max()) for o in others)
        else:
            radius = spec.fraction * min(float(np.linalg.norm(o - y_star)) for o in others)
    elif spec.kind == "ball":
        return default_ball_region(model, y_star, others, samples=blk.attraction_samples)
    else:
        raise ValueError("slow_mode region needs radius or fraction")
    if spec.kind == "slow_mode":
        return slow_mode_region(model, y_star, radius)
    return BallRegion(y_star, radius)


def _exit_times(cfg, model, w: _Writer, meta: dict, cache: dict, threads: int) -> None:
    blk = cfg.block("exit-times")
    report = find_equilibria(model)
    cache["report"] = report
    stable = report.stable
    if blk.equilibrium >= len(stable):
        raise PreconditionError(f"requested stable equilibrium {blk.equilibrium}, found {len(stable)}")
    y_star = stable[blk.equilibrium].y
    others = [e.y for e in report.equilibria if e.y is not y_star]
    region = _region(model, blk, y_star, others)
    exp = run_exit_times(model, y_star, region, blk.Ns, blk.replicas, cfg.seed,
                         event_cap=blk.event_cap, threads=threads,
                         check_samples=blk.attraction_samples)
    w.csv("exit_summary.csv", exp.summary_rows())
    w.csv("exit_replicas.csv", exp.replica_rows())
    att = exp.attraction
    meta["results"] = {
        "fit": exp.fit,
        "region": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in exp.region.items()},
        "attraction": None if att is None else {"ok": att.ok, "samples": att.samples,
                                                 "max_level": att.max_level},
        "warnings": exp.warnings,
    }


def _quasipotential(cfg, model, w: _Writer, meta: dict, cache: dict) -> None:
    blk = cfg.block("quasipotential")
    y0 = resolve_point(model, blk.y0, cache)
    y1 = resolve_point(model, blk.y1)
    est = quasipotential(model, y0, y1, blk.M, nodes=blk.nodes)
    out = json.loads(est.to_json())
    if getattr(model, "has_lyapunov_g", False):
        out["g_difference"] = lyapunov_g(model, y1) - lyapunov_g(model, y0)
    w.json("quasipotential.json", out)
    meta["results"] = {"value": est.value, "advisory": est.advisory}


def _sweep(cfg, model, w: _Writer, meta: dict) -> None:
    blk = cfg.sweep
    vals = blk.values
    values = list(vals) if isinstance(vals, list) else np.linspace(vals.start, vals.stop, vals.num).tolist()
    base = model.to_dict()
    caps = blk.capacities or [base["capacity"]]
    rows, counts = [], {}
    for C in caps:
        for lam in values:
            params = dict(base, capacity=C, lam=lam)
            try:
                m = model_from_dict(params)
            except ValueError as exc:
                log.info("sweep point C=%s lam=%s skipped: %s", C, lam, exc)
                continue
            report = find_equilibria(m, points=blk.points, per_axis=blk.per_axis)
            rows.extend(report.rows())
            key = f"{len(report)} roots, {len(report.stable)} stable"
            counts[key] = counts.get(key, 0) + 1
    w.csv("sweep.csv", rows)
    meta["results"] = {"points": len(caps) * len(values), "outcomes": dict(sorted(counts.items()))}


def _verify(cfg, model, w: _Writer, meta: dict) -> int:
    entries = verify_suite(cfg, model)
    w.csv("verify.csv", [e.row() for e in entries])
    failed = [e for e in entries if e.status == "fail"]
    meta["results"] = {s: sum(e.status == s for e in entries)
                       for s in ("pass", "fail", "expected-fail", "skipped")}
    return EXIT_VERIFY if failed else EXIT_OK


# ------------------------------------------------------------------- verify
def _interior(rng, S: int, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(S), size=n)


def verify_suite(cfg: ExperimentConfig, model=None) -> list[VerifyEntry]:
    """Run the selected identity checks; failures are entries, not exceptions."""
    model = model if model is not None else cfg.build_model()
    blk = cfg.block("verify")
    if not blk.suites:
        raise ConfigError(["verify.suites: suite selection is empty"])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5E1F]))
    ss = model.statespace
    S, K = ss.size, ss.K
    n = blk.samples
    out: list[VerifyEntry] = []

    def add(suite, check, residual, tol, status=None, note=""):
        if status is None:
            status = "pass" if residual <= tol else "fail"
        out.append(VerifyEntry(check, suite, float(residual), tol, status, note))

    if "erlang" in blk.suites:
        worst_mean = worst_grad = 0.0
        for _ in range(n):
            rho = np.exp(rng.uniform(-2, 2, K))
            nu = erlang_measure(ss, rho)
            B = np.array([blocking_probability(ss, rho, k) for k in range(K)])
            worst_mean = max(worst_mean, float(np.abs(marginal_mean(ss, nu) - rho * (1 - B)).max()))
            theta = np.log(rho)
            grad = np.empty(K)
            for k in range(K):
                e = np.zeros(K)
                e[k] = 1e-5
                grad[k] = (log_partition(ss, theta + e) - log_partition(ss, theta - e)) / 2e-5
            # d log Z / d rho_k = (d log Z / d theta_k) / rho_k
            worst_grad = max(worst_grad, float(np.abs(grad / rho - (1 - B)).max()))
        add("erlang", "mean_occupancy_vs_blocking", worst_mean, 1e-10)
        add("erlang", "log_partition_gradient_fd", worst_grad, 1e-6)

    if "entropy" in blk.suites:
        worst = 0.0
        for _ in range(n):
            t1, t2 = rng.uniform(-2, 2, K) + np.log(ss.capacity), rng.uniform(-2, 2, K) + np.log(ss.capacity)
            # sum nu1 log(nu1 / nu2) with both measures kept in log space
            l1 = log_weights(ss, t1) - log_partition(ss, t1)
            l2 = log_weights(ss, t2) - log_partition(ss, t2)
            direct = float(np.exp(l1) @ (l1 - l2))
            worst = max(worst, abs(direct - gibbs_entropy_identity(ss, t1, t2)) / max(1.0, abs(direct)))
        add("entropy", "gibbs_relative_entropy", worst, 1e-10)
        if isinstance(model, Mobile):
            ys = _interior(rng, S, n)
            worst = max(abs(lyapunov_g(model, y) - lyapunov_g_entropy_form(model, y)) for y in ys)
            add("entropy", "g_closed_form_vs_entropy_form", worst, 1e-10)

    if "hjb" in blk.suites:
        if isinstance(model, Mobile):
            worst = max(verify_hjb(model, y) for y in _interior(rng, S, n))
            if isinstance(model, MobileSplit):
                add("hjb", "hamiltonian_at_grad_g", worst, 1e-10)
            else:
                add("hjb", "hamiltonian_at_grad_g", worst, 1e-10,
                    "pass" if worst <= 1e-10 else "expected-fail",
                    "unsplit jumps are not reversible for g")
        else:
            add("hjb", "hamiltonian_at_grad_g", float("nan"), 1e-10, "skipped", "model has no function g")

    if "reversibility" in blk.suites:
        if isinstance(model, Mobile):
            jumps = [z for z in model.jump_set() if -z in set(model.jump_set())]
            worst = 0.0
            for y in _interior(rng, S, n):
                for z in jumps:
                    worst = max(worst, abs(reversibility_residual(model, y, z)))
            if isinstance(model, MobileSplit):
                add("reversibility", "rate_balance_residual", worst, 1e-10)
            else:
                add("reversibility", "rate_balance_residual", worst, 1e-10,
                    "pass" if worst <= 1e-10 else "expected-fail",
                    "unsplit jumps are not reversible for g")
        else:
            add("reversibility", "rate_balance_residual", float("nan"), 1e-10, "skipped",
                "model has no function g")

    if "dirichlet" in blk.suites:
        # d/dt along the flow equals minus the Dirichlet energy of log(y / nu_rho(y))
        if isinstance(model, (Mobile, Closed, Open)):
            worst = 0.0
            for _ in range(n):
                y = _interior(rng, S, 1)[0] if isinstance(model, Mobile) else _on_level(model, rng)
                direct = lyapunov_derivative(model, y, check=False)
                u = np.log(y / erlang_measure(ss, model.rho_of_y(y)))
                energy = dirichlet_form(model, y, u)
                worst = max(worst, abs(direct + energy) / max(1.0, abs(direct)))
            add("dirichlet", "flow_derivative_vs_dirichlet_form", worst, 1e-10)
        else:
            add("dirichlet", "flow_derivative_vs_dirichlet_form", float("nan"), 1e-10, "skipped",
                "no Lyapunov function for this family")

    if "conservation" in blk.suites:
        worst_mass = worst_mean = 0.0
        for i in range(min(n, 20)):
            y0 = _on_level(model, rng) if isinstance(model, Closed) else _interior(rng, S, 1)[0]
            traj = integrate(model, y0, 5.0)
            worst_mass = max(worst_mass, float(np.abs(traj.points.sum(axis=1) - 1).max()))
            if isinstance(model, Closed):
                means = traj.points @ ss.states[:, 0]
                worst_mean = max(worst_mean, float(np.abs(means - means[0]).max()))
        add("conservation", "total_mass", worst_mass, 1e-12)
        if isinstance(model, Closed):
            add("conservation", "closed_mean_occupancy", worst_mean, 1e-9)
    return out


def _on_level(model, rng) -> np.ndarray:
    """Random interior point with mean occupancy equal to ``lam``."""
    ss = model.statespace
    n = ss.states[:, 0].astype(float)
    for _ in range(1000):
        y = rng.dirichlet(np.ones(ss.size))
        # move mass along the two extreme states to hit the mean exactly
        gap = model.lam - y @ n
        direction = np.zeros(ss.size)
        direction[-1], direction[0] = 1.0, -1.0
        step = gap / (n[-1] - n[0])
        z = y + step * direction
        if z.min() > 1e-6:
            return z
    raise RuntimeError("could not sample a point on the mean-occupancy level set")


# -------------------------------------------------------------------- run
def run(cfg: ExperimentConfig, *, out: str | os.PathLike | None = None,
        threads: int | None = None) -> ResultBundle:
    """Execute ``cfg.command`` and write its bundle; never raises for module errors."""
    out_dir = Path(out or os.environ.get(OUT_ENV) or cfg.out or "lossnet-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = threads or cfg.threads or os.cpu_count() or 1
    writer = _Writer(out_dir)
    meta: dict = {}
    bundle = ResultBundle(out_dir)
    started = time.perf_counter()
    status, error = "ok", None
    cache: dict = {}
    try:
        model = cfg.build_model()
        cmd = cfg.command
        if cmd == "integrate":
            _integrate(cfg, model, writer, meta)
        elif cmd == "equilibria":
            _equilibria(cfg, model, writer, meta, cache)
        elif cmd == "simulate":
            _simulate(cfg, model, writer, meta, cache)
        elif cmd == "exit-times":
            _exit_times(cfg, model, writer, meta, cache, threads)
        elif cmd == "quasipotential":
            _quasipotential(cfg, model, writer, meta, cache)
        elif cmd == "sweep":
            _sweep(cfg, model, writer, meta)
        elif cmd == "verify":
            bundle.exit_code = _verify(cfg, model, writer, meta)
            if bundle.exit_code:
                status = "verification-failed"
        else:
            raise ValueError(f"unknown command {cmd!r}")
    except ConfigError as exc:
        status, error, bundle.exit_code = "config-error", str(exc), EXIT_CONFIG
    except (PreconditionError, ConvergenceError, StepSizeError, ValueError, TypeError,
            RuntimeError, ArithmeticError) as exc:
        status, error, bundle.exit_code = "error", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME
        log.debug("run failed\n%s", traceback.format_exc())
    finally:
        manifest = {
            "command": cfg.command,
            "config": cfg.model_dump(mode="json", by_alias=True, exclude_none=True),
            "seed": cfg.seed,
            "threads": threads,
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "wall_time_seconds": time.perf_counter() - started,
            "status": status,
            "error": error,
            "files": dict(sorted(writer.files.items())),
            **meta,
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        bundle.files = dict(writer.files)
        bundle.manifest = manifest
    return bundle


__all__ += ["EXIT_OK", "EXIT_CONFIG", "EXIT_RUNTIME", "EXIT_VERIFY", "VERIFY_SUITES"]
