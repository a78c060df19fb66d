"""Experiment runner: strict JSON configs, seeded replicas, CSV/JSON outputs and a manifest."""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import shutil
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from . import bounds, mechanism, packing, palm, trees
from .mechanism import BranchingMechanism, GaugeFunction, mechanism_from_dict

SCHEMA_VERSION = 1
U64_MAX = 2**64 - 1

# experiment -> (stochastic?, parameter defaults)
EXPERIMENTS: dict[str, tuple[Callable[[dict], bool], dict[str, Any]]] = {
    "gauge-table": (lambda p: False, {"r_min": 1e-12, "r_max": 1e-2, "points": 41, "r_grid": None}),
    "exponents": (lambda p: False, {"grid": [1.0, 1e8], "method": None}),
    "packing-dims": (lambda p: True, {"n_target": 30000, "sides": None, "side_points": 12, "window_steps": [2.0, 0.25]}),
    "snake-sample": (lambda p: True, {"n_target": 1000, "sigma": None}),
    "palm-density": (lambda p: True, {"a": 3e-3, "grid_step": 1e-6, "eps_trunc": 1e-7, "n_tree": 100,
                                      "r_grid": [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2]}),
    "keller": (lambda p: False, {"r_grid": [0.02, 0.05, 0.1, 0.5]}),
    "bounds-series": (lambda p: False, {"series": "subordinator", "threshold": 5.0, "budget": 10000,
                                        "u_exponent": 3.0, "n_max": 400, "C2": None, "varrho": 0.25,
                                        "log_theta": None}),
    "exit-time": (lambda p: int(p.get("mc_paths", 0)) > 0, {"r": 1.0, "lam": 1.0, "mc_paths": 0, "dt": 1e-4}),
}
DIMENSION_EXPERIMENTS = {"packing-dims", "palm-density"}
TOP_FIELDS = {"experiment", "mechanism", "d", "seed", "replicas", "params", "output", "workers"}


class ConfigError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass
class ExperimentConfig:
    experiment: str
    mechanism: dict
    d: int = 3
    seed: int | None = None
    replicas: int = 1
    params: dict = field(default_factory=dict)
    output: str | None = None
    workers: int | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError([("", "config must be a JSON object")])
        extra = sorted(set(doc) - TOP_FIELDS)
        missing = [k for k in ("experiment", "mechanism") if k not in doc]
        errs = [(k, "unknown field") for k in extra] + [(k, "required field missing") for k in missing]
        if errs:
            raise ConfigError(errs)
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([("", f"invalid JSON: {exc}")]) from exc
        return cls.from_dict(doc)

    def resolved_params(self) -> dict:
        defaults = EXPERIMENTS[self.experiment][1]
        out = dict(defaults)
        out.update(self.params)
        return out

    @property
    def stochastic(self) -> bool:
        return EXPERIMENTS[self.experiment][0](self.resolved_params())


@dataclass
class Validation:
    errors: list[tuple[str, str]]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.errors


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(config: ExperimentConfig) -> Validation:
    errors: list[tuple[str, str]] = []
    warnings: list[str] = []
    if config.experiment not in EXPERIMENTS:
        errors.append(("experiment", f"unknown experiment {config.experiment!r}; choose from {sorted(EXPERIMENTS)}"))
        return Validation(errors, warnings)
    mech = None
    m = config.mechanism
    if not isinstance(m, dict):
        errors.append(("mechanism", "must be an object"))
    else:
        for key in ("alpha", "beta"):
            v = m.get(key, 0.0)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v < 0:
                errors.append((f"mechanism.{key}", "must be a finite number >= 0"))
        if not errors:
            try:
                mech = mechanism_from_dict(m)
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(("mechanism", str(exc)))
    if not _is_int(config.d) or config.d < 1:
        errors.append(("d", "must be a positive integer"))
    if not _is_int(config.replicas) or config.replicas < 1:
        errors.append(("replicas", "must be an integer >= 1"))
    if config.workers is not None and (not _is_int(config.workers) or config.workers < 1):
        errors.append(("workers", "must be a positive integer"))
    if config.seed is not None and (not _is_int(config.seed) or not 0 <= config.seed <= U64_MAX):
        errors.append(("seed", "must be an unsigned 64-bit integer"))
    if not isinstance(config.params, dict):
        errors.append(("params", "must be an object"))
        return Validation(errors, warnings)
    known = EXPERIMENTS[config.experiment][1]
    for k in sorted(set(config.params) - set(known)):
        errors.append((f"params.{k}", "unknown parameter for this experiment"))
    if config.stochastic and config.seed is None:
        errors.append(("seed", "required for a stochastic experiment"))
    p = config.resolved_params()
    if config.experiment in ("snake-sample", "packing-dims") and (not _is_int(p["n_target"]) or p["n_target"] < 100):
        errors.append(("params.n_target", "must be an integer >= 100"))
    if config.experiment == "palm-density" and (not _is_int(p["n_tree"]) or p["n_tree"] < 100):
        errors.append(("params.n_tree", "must be an integer >= 100"))
    if config.experiment == "exit-time":
        if not (p["r"] > 0 and p["lam"] >= 0 and p["dt"] > 0):
            errors.append(("params", "exit-time needs r > 0, lam >= 0, dt > 0"))
    if config.experiment == "palm-density":
        if not _is_int(config.d) or config.d < 4:
            errors.append(("d", "palm-density needs d >= 4"))
        if mech is not None and mech.family not in ("quadratic", "stable"):
            errors.append(("mechanism", "palm-density needs a quadratic or stable mechanism"))
        elif mech is not None:
            r0 = GaugeFunction(mech, "g").r0
            if not all(0 < float(x) < r0 for x in p["r_grid"]):
                errors.append(("params.r_grid", f"radii must lie in (0, {r0:.4g}) where the gauge is defined"))
    if config.experiment == "packing-dims" and mech is not None and mech.family == "tabulated":
        errors.append(("mechanism", "tree sampling supports quadratic and stable mechanisms"))
    if config.experiment == "keller" and mech is not None and mech.growth_index <= 1:
        errors.append(("mechanism", "Keller bracket needs psi growing faster than linearly"))
    if config.experiment in DIMENSION_EXPERIMENTS and mech is not None and _is_int(config.d):
        gam = mechanism.exponents(mech).gamma_lower if mech.family != "tabulated" else None
        if gam is not None and gam > 1:
            thr = 2 * gam / (gam - 1)
            if config.d <= thr:
                warnings.append(f"d ≤ 2γ/(γ−1) = {thr:g}")
    return Validation(errors, warnings)


def seed_stream(master: int, replica: int) -> np.random.Generator:
    """Counter-based stream for one replica: Philox keyed by (master, replica)."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# experiment bodies; each returns {relative filename: bytes}


def _csv(header: list[str], rows) -> bytes:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in row))
    return ("\n".join(lines) + "\n").encode()


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _gauge_table(cfg, mech, p, rngs):
    r = np.asarray(p["r_grid"], float) if p["r_grid"] is not None else np.geomspace(p["r_min"], p["r_max"], p["points"])
    g, k = GaugeFunction(mech, "g"), GaugeFunction(mech, "k")
    rows = []
    for x in r:
        gv = float(g(x)) if x < g.r0 else None
        kv = float(k(x)) if x < k.r0 else None
        dr = float(mechanism.doubling_ratio(g, x)) if 2 * x < g.r0 else None
        rows.append((x, gv, kv, dr))
    return {"gauge_table.csv": _csv(["r", "g", "k", "doubling"], rows)}


def _exponents(cfg, mech, p, rngs):
    rep = mechanism.exponents(mech, tuple(p["grid"]), p["method"])
    return {"exponents.json": _json(asdict(rep))}


def _packing_dims(cfg, mech, p, rngs):
    def one(i):
        rng = rngs[i]
        exc = trees.sample_height_excursion(mech, p["n_target"], rng)
        snake = trees.sample_snake(exc, np.zeros(cfg.d), cfg.d, rng)
        return packing.range_box_report(snake.path, p["sides"], p["side_points"], tuple(p["window_steps"])), snake.path.shape[0]

    results = _map(cfg, one)
    rows, reports = [], []
    for i, (rep, npts) in enumerate(results):
        rows += [(i, e, c) for e, c in zip(rep.eps, rep.counts)]
        reports.append(dict(rep.to_json(), replica=i, points=npts))
    slopes = [r["slope"] for r in reports]
    summary = {"replicas": reports, "median_slope": float(np.median(slopes)), "target": _dimension_target(mech)}
    return {"box_counts.csv": _csv(["replica", "side", "count"], rows), "packing.json": _json(summary)}


def _dimension_target(mech):
    gam = mechanism.exponents(mech).gamma_lower
    return 2 * gam / (gam - 1)


def _snake_sample(cfg, mech, p, rngs):
    def one(i):
        rng = rngs[i]
        exc = trees.sample_height_excursion(mech, p["n_target"], rng, sigma=p["sigma"])
        snake = trees.sample_snake(exc, np.zeros(cfg.d), cfg.d, rng)
        return exc, trees.occupation_and_range(snake).cloud

    files = {}
    for i, (exc, cloud) in enumerate(_map(cfg, one)):
        files[f"excursion_{i:04d}.csv"] = _csv(["t", "H"], zip(exc.times, exc.heights))
        hdr = [f"x{j + 1}" for j in range(cloud.dim)] + ["weight"]
        files[f"cloud_{i:04d}.csv"] = _csv(hdr, np.column_stack([cloud.points, cloud.weights]))
    return files


def _palm_density(cfg, mech, p, rngs):
    g = GaugeFunction(mech, "g")
    r = np.asarray(p["r_grid"], float)

    def one(i):
        rng = rngs[i]
        spine = palm.sample_spine(mech, p["a"], p["grid_step"], rng, d=cfg.d)
        forest = palm.graft(spine, mech, p["eps_trunc"], rng, n_tree=p["n_tree"])
        return palm.palm_mass_profile(forest, r, gauge=g), forest.summary()

    files, summaries = {}, []
    for i, (prof, summ) in enumerate(_map(cfg, one)):
        files[f"palm_{i:04d}.csv"] = _csv(["r", "mass", "ratio"], zip(prof.r, prof.mass, prof.ratio))
        summaries.append(summ)
    files["palm.json"] = _json({"forests": summaries})
    return files


def _keller(cfg, mech, p, rngs):
    out = []
    for r in p["r_grid"]:
        v = bounds.keller_check(mech, cfg.d, float(r))
        out.append({"r": v.r, "d": v.d, "v0": v.v0, "I": v.I_value, "lower": v.lower, "upper": v.upper,
                    "holds": v.holds, "residual": v.residual})
    return {"keller.json": _json({"rows": out, "all_hold": all(o["holds"] for o in out)})}


def _bounds_series(cfg, mech, p, rngs):
    kind = p["series"]
    if kind == "subordinator":
        rep = bounds.subordinator_series(mech, threshold=p["threshold"], budget=p["budget"])
        return {"subordinator.json": rep.to_json().encode() + b"\n"}
    if kind == "sn":
        s = bounds.sn_sequence(mech, p["u_exponent"], n_max=p["n_max"])
        return {"sn.csv": _csv(["n", "log_lambda", "log_s", "markov"], zip(s.n, s.lambda_log, s.s_log, s.markov)),
                "sn.json": _json({"u": s.u, "u_prime": s.u_prime, "a": s.a, "eps": s.eps, "fitted_c": s.fitted_c})}
    if kind == "radii":
        consts = bounds.lemma_constants(mech, cfg.d, p["varrho"])
        C2 = consts.C2 if p["C2"] is None else p["C2"]
        lt = p["log_theta"] if p["log_theta"] is not None else [float(n * n) for n in range(1, 7)]
        rs = bounds.radii_theta(mech, cfg.d, None, log_theta_list=lt, C2=C2)
        Js = [bounds.log_J(mech, cfg.d, float(x), C2)[1] for x in rs.r_log]
        lim = C2 / (rs.c - 2.0 / (cfg.d - 2))
        return {"radii.json": _json({
            "c": rs.c, "C2": C2, "log_theta": rs.theta_log, "log_lambda": rs.lambda_log, "log_r": rs.r_log,
            "log_J": Js, "J_bound": lim, "checks": rs.checks,
            "constants": [c.to_dict() for c in consts.records()]})}
    raise ValueError(f"unknown series {kind!r}")


def _exit_time(cfg, mech, p, rngs):
    res = bounds.exit_time_laplace(cfg.d, p["r"], p["lam"])
    rows = []
    if p["mc_paths"] > 0:
        per = max(1, p["mc_paths"] // cfg.replicas)

        def one(i):
            return bounds.exit_time_laplace(cfg.d, p["r"], p["lam"], per, p["dt"], rngs[i])

        parts = _map(cfg, one)
        means = np.array([x.mc_mean for x in parts])
        ses = np.array([x.mc_se for x in parts])
        mean = float(means.mean())
        se = float(math.sqrt(np.sum(ses**2)) / len(parts))
        rows = [(i, x.mc_mean, x.mc_se) for i, x in enumerate(parts)]
    else:
        mean = se = None
    doc = {"d": cfg.d, "r": p["r"], "lam": p["lam"], "exact_1d": res.exact_1d, "upper_dd": res.upper_dd,
           "mc_mean": mean, "mc_se": se, "dt": p["dt"]}
    files = {"exit_time.json": _json(doc)}
    if rows:
        files["exit_time_replicas.csv"] = _csv(["replica", "mean", "se"], rows)
    return files


RUNNERS = {
    "gauge-table": _gauge_table,
    "exponents": _exponents,
    "packing-dims": _packing_dims,
    "snake-sample": _snake_sample,
    "palm-density": _palm_density,
    "keller": _keller,
    "bounds-series": _bounds_series,
    "exit-time": _exit_time,
}


def _map(cfg: ExperimentConfig, fn):
    """Run fn over replica indices on a bounded pool; results come back in index order."""
    n = cfg.replicas
    workers = min(n, cfg.workers or os.cpu_count() or 1)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def run(config: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> dict:
    """Validate, execute and write outputs plus manifest.json atomically."""
    check = validate(config)
    if not check.ok:
        raise ConfigError(check.errors)
    out = Path(out_dir or config.output or f"runs/{config.experiment}")
    mech = mechanism_from_dict(config.mechanism)
    params = config.resolved_params()
    rngs = [seed_stream(config.seed, i) for i in range(config.replicas)] if config.seed is not None else [None] * config.replicas
    t0 = time.time()
    files = RUNNERS[config.experiment](config, mech, params, rngs)
    elapsed = time.time() - t0
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(config),
        "resolved_params": params,
        "warnings": check.warnings,
        "started_unix": t0,
        "wall_clock_seconds": elapsed,
        "versions": {"snakelab": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "replica_seeds": [{"replica": i, "master": config.seed, "spawn_key": [i]} for i in range(config.replicas)]
        if config.seed is not None else [],
        "outputs": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
    }
    files = dict(files)
    files["manifest.json"] = _json(manifest)
    _write_atomic(out, files)
    return manifest


def _write_atomic(out: Path, files: dict[str, bytes]) -> None:
    out = out.resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=out.parent))
    try:
        for name, data in files.items():
            (tmp / name).write_bytes(data)
        if out.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old-", dir=out.parent))
            os.replace(out, old / "prev")
            os.replace(tmp, out)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="snakelab", description="Run a snakelab experiment from a JSON config.")
    ap.add_argument("experiment", choices=sorted(EXPERIMENTS))
    ap.add_argument("--config", required=True, help="path to the JSON config")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--replicas", type=int, help="replica count (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    args = ap.parse_args(argv)
    try:
        doc = json.loads(Path(args.config).read_text())
        if isinstance(doc, dict):
            doc.setdefault("experiment", args.experiment)
            if doc["experiment"] != args.experiment:
                raise ConfigError([("experiment", f"config says {doc['experiment']!r} but {args.experiment!r} was requested")])
            if args.seed is not None:
                doc["seed"] = args.seed
            if args.replicas is not None:
                doc["replicas"] = args.replicas
        cfg = ExperimentConfig.from_dict(doc)
        check = validate(cfg)
        if not check.ok:
            raise ConfigError(check.errors)
    except (ConfigError, OSError, json.JSONDecodeError, TypeError) as exc:
        errs = exc.errors if isinstance(exc, ConfigError) else [("config", str(exc))]
        for path, msg in errs:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return 1
    for w in check.warnings:
        print(f"warning: {w}", file=sys.stderr)
    try:
        manifest = run(cfg, args.out)
    except Exception as exc:  # runtime failure after validation
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"outputs": manifest["outputs"], "seconds": round(manifest["wall_clock_seconds"], 3)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
