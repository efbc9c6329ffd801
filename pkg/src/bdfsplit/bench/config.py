"""Benchmark configuration.

Configs are TOML files with four kinds of tables::

    [run]          name, output_dir, workers, formats
    [problem]      kind = "scad" | "gl" plus problem parameters
    [stop]         default stop rule (kind, tol) and max_iter
    [[criteria]]   optional list of named stop rules (one table column each)
    [[algorithm]]  one per solver: name, algorithm and solver options

The only environment override is ``BDFSPLIT_OUTPUT_DIR``.
"""

from __future__ import annotations

import hashlib
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..gl import GlParams
from ..scad import ScadParams
from ..schedules import BetaSchedule, OmegaSchedule
from ..solvers import ALGORITHMS, LineSearchParams, SolverConfig, StopRule
from ..splitting import validate_step

__all__ = ["ConfigError", "Criterion", "ProblemSpec", "RunConfig", "load_config", "parse_config"]

OUTPUT_ENV = "BDFSPLIT_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid benchmark configuration; the message names the offending key."""


@dataclass(frozen=True)
class Criterion:
    name: str
    rule: StopRule
    max_iter: int


@dataclass(frozen=True)
class ProblemSpec:
    kind: str                         # scad | gl
    sizes: tuple = (1,)
    seed: int = 0
    reps: int = 1
    scad: ScadParams | None = None
    gl: GlParams | None = None
    image: str = "phantom"
    rows: int = 64
    cols: int = 64
    labels: str | None = None
    truth: str | None = None
    reference_tol: float | None = None
    reference_max_iter: int = 20000

    def instance_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.reps)]


@dataclass
class RunConfig:
    name: str
    problem: ProblemSpec
    algorithms: list            # (display name, SolverConfig)
    criteria: list              # Criterion
    output_dir: Path
    workers: int = 1
    formats: tuple = ("csv", "json")
    source: Path | None = None
    config_hash: str = ""
    raw: dict = field(default_factory=dict)


def _take(table: dict, key: str, where: str, kind=None, default=...):
    if key not in table:
        if default is ...:
            raise ConfigError(f"{where}: missing required key '{key}'")
        return default
    val = table[key]
    if kind is not None:
        ok = isinstance(val, kind) and not (kind in (int, float) and isinstance(val, bool))
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            ok = True
        if not ok:
            raise ConfigError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, "
                              f"got {type(val).__name__}")
    return val


def _check_keys(table: dict, allowed, where: str):
    extra = sorted(set(table) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def _build(cls, table: dict, where: str):
    names = {f.name for f in fields(cls)}
    _check_keys(table, names, where)
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_BETA_KEYS = {"kind", "value", "restart_every", "adaptive", "squared", "beta_cap"}
_OMEGA_KEYS = {"kind", "value", "omega0", "omega_inf", "rate", "burn_in"}


def _stop_rule(table: dict, where: str) -> StopRule:
    _check_keys(table, {"kind", "tol", "rules", "max_iter", "name"}, where)
    kind = _take(table, "kind", where, str, "rel-change")
    if kind == "composite":
        subs = _take(table, "rules", where, list)
        rules = tuple(_stop_rule(s, f"{where}.rules[{i}]") for i, s in enumerate(subs))
        try:
            return StopRule("composite", 1.0, rules)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    tol = float(_take(table, "tol", where, float))
    try:
        return StopRule(kind, tol)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _solver(table: dict, where: str, default_stop: StopRule, max_iter: int):
    allowed = {"name", "algorithm", "delta_t", "beta", "omega", "preconditioner", "k_steps",
               "alpha", "alpha_hat", "linesearch", "variant", "cg_tol", "cg_max_iter"}
    _check_keys(table, allowed, where)
    alg = _take(table, "algorithm", where, str)
    if alg not in ALGORITHMS:
        raise ConfigError(f"{where}.algorithm: unknown algorithm '{alg}'; "
                          f"expected one of {', '.join(ALGORITHMS)}")
    name = _take(table, "name", where, str, alg)
    kw = {}
    for key in ("delta_t", "alpha", "alpha_hat", "cg_tol"):
        if key in table:
            kw[key] = float(_take(table, key, where, float))
    for key in ("k_steps", "cg_max_iter"):
        if key in table:
            kw[key] = _take(table, key, where, int)
    for key in ("preconditioner", "variant"):
        if key in table:
            kw[key] = _take(table, key, where, str)
    if "beta" in table:
        b = _take(table, "beta", where, dict)
        _check_keys(b, _BETA_KEYS, f"{where}.beta")
        kw["beta"] = _build(BetaSchedule, b, f"{where}.beta")
    if "omega" in table:
        o = _take(table, "omega", where, dict)
        _check_keys(o, _OMEGA_KEYS, f"{where}.omega")
        kw["omega"] = _build(OmegaSchedule, o, f"{where}.omega")
    if "linesearch" in table:
        kw["linesearch"] = _build(LineSearchParams, _take(table, "linesearch", where, dict),
                                  f"{where}.linesearch")
    try:
        cfg = SolverConfig(algorithm=alg, stop=default_stop, max_iter=max_iter, label=name, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return name, cfg


def _problem(table: dict, seed_override: int | None) -> ProblemSpec:
    where = "problem"
    kind = _take(table, "kind", where, str)
    seed = _take(table, "seed", where, int, 0) if seed_override is None else seed_override
    reps = _take(table, "reps", where, int, 1)
    if reps < 1:
        raise ConfigError("problem.reps: must be >= 1")
    ref = table.get("reference_tol")
    ref_max = _take(table, "reference_max_iter", where, int, 20000)
    if kind == "scad":
        _check_keys(table, {"kind", "sizes", "seed", "reps", "lambda_reg", "theta",
                            "reference_tol", "reference_max_iter"}, where)
        sizes = _take(table, "sizes", where, list, [1])
        if not sizes or not all(isinstance(s, int) and s >= 1 for s in sizes):
            raise ConfigError("problem.sizes: need a nonempty list of integers >= 1")
        try:
            params = ScadParams(float(_take(table, "lambda_reg", where, float, 5e-4)),
                                float(_take(table, "theta", where, float, 10.0)))
        except ValueError as exc:
            raise ConfigError(f"problem: {exc}") from None
        return ProblemSpec("scad", tuple(sizes), seed, reps, scad=params,
                           reference_tol=None if ref is None else float(ref),
                           reference_max_iter=ref_max)
    if kind == "gl":
        gl_keys = {f.name for f in fields(GlParams)}
        _check_keys(table, gl_keys | {"kind", "seed", "reps", "image", "rows", "cols",
                                      "labels", "truth", "reference_tol",
                                      "reference_max_iter"}, where)
        params = _build(GlParams, {k: float(v) if k in ("epsilon", "eta", "sigma", "box_radius")
                                   else v for k, v in table.items() if k in gl_keys}, where)
        image = _take(table, "image", where, str, "phantom")
        if image != "phantom" and not table.get("labels"):
            raise ConfigError("problem.labels: an image file needs a label PGM")
        return ProblemSpec("gl", (1,), seed, reps, gl=params, image=image,
                           rows=_take(table, "rows", where, int, 64),
                           cols=_take(table, "cols", where, int, 64),
                           labels=table.get("labels"), truth=table.get("truth"),
                           reference_tol=None if ref is None else float(ref),
                           reference_max_iter=ref_max)
    raise ConfigError(f"problem.kind: unknown problem '{kind}' (expected scad or gl)")


def _lipschitz(problem: ProblemSpec) -> float:
    return problem.scad.lipschitz if problem.kind == "scad" else problem.gl.lipschitz_box


def parse_config(data: dict, source: Path | None = None, out: str | None = None,
                 workers: int | None = None, seed: int | None = None,
                 config_hash: str = "") -> RunConfig:
    _check_keys(data, {"run", "problem", "stop", "criteria", "algorithm"}, "config")
    run_t = data.get("run", {})
    _check_keys(run_t, {"name", "output_dir", "workers", "formats"}, "run")
    name = _take(run_t, "name", "run", str, source.stem if source else "benchmark")
    out_dir = out or os.environ.get(OUTPUT_ENV) or _take(run_t, "output_dir", "run", str,
                                                          f"results/{name}")
    n_workers = workers if workers is not None else _take(run_t, "workers", "run", int, 1)
    if n_workers < 1:
        raise ConfigError("run.workers: must be >= 1")
    formats = tuple(_take(run_t, "formats", "run", list, ["csv", "json"]))
    bad = set(formats) - {"csv", "json"}
    if bad:
        raise ConfigError(f"run.formats: unsupported format(s) {sorted(bad)}")
    problem = _problem(_take(data, "problem", "config", dict), seed)
    if source is not None and problem.kind == "gl":
        # image paths are relative to the config file
        base = Path(source).resolve().parent
        fix = {k: str(base / v) for k in ("image", "labels", "truth")
               if (v := getattr(problem, k)) and not (k == "image" and v == "phantom")
               and not Path(v).is_absolute()}
        problem = replace(problem, **fix)

    stop_t = dict(data.get("stop", {}))
    max_iter = _take(stop_t, "max_iter", "stop", int, 5000)
    stop_t.pop("max_iter", None)
    default_stop = _stop_rule(stop_t, "stop") if stop_t else StopRule()
    criteria = []
    for i, c in enumerate(data.get("criteria", [])):
        where = f"criteria[{i}]"
        cname = _take(c, "name", where, str)
        cmax = _take(c, "max_iter", where, int, max_iter)
        criteria.append(Criterion(cname, _stop_rule(c, where), cmax))
    if not criteria:
        criteria = [Criterion("default", default_stop, max_iter)]
    if len({c.name for c in criteria}) != len(criteria):
        raise ConfigError("criteria: names must be unique")

    algs = data.get("algorithm", [])
    if not isinstance(algs, list) or not algs:
        raise ConfigError("algorithm: the algorithm list is empty; add at least one [[algorithm]]")
    algorithms = [_solver(a, f"algorithm[{i}]", default_stop, max_iter) for i, a in enumerate(algs)]
    if len({n for n, _ in algorithms}) != len(algorithms):
        raise ConfigError("algorithm: display names must be unique")

    L = _lipschitz(problem)
    for i, (n, cfg) in enumerate(algorithms):
        if cfg.algorithm in ("pubc_e", "bapdca_e") and cfg.delta_t is not None:
            omega_hat = 1.0 if cfg.algorithm == "bapdca_e" else cfg.omega.sup_after_start()
            if validate_step(L, cfg.delta_t, omega_hat) == "invalid":
                raise ConfigError(f"algorithm[{i}].delta_t: {cfg.delta_t} is outside the "
                                  f"admissible range for L={L:g}, omega_hat={omega_hat:g} "
                                  f"(need max(1, omega_hat)*delta_t < {3.0 / (4.0 * L):g})")
        if problem.kind == "scad" and any(c.rule.kind in ("grad-norm", "dice-bound")
                                          for c in criteria):
            raise ConfigError("criteria: grad-norm and dice-bound rules apply to gl problems only")
    return RunConfig(name, problem, algorithms, criteria, Path(out_dir), n_workers, formats,
                     source, config_hash, data)


def load_config(path, out: str | None = None, workers: int | None = None,
                seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    digest = hashlib.sha256(raw).hexdigest()
    try:
        return parse_config(data, path, out, workers, seed, digest)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def is_finite_number(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)
