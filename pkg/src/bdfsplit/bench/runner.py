"""Execute an algorithm x instance x criterion matrix and write its outputs.

Layout of ``output_dir``::

    traces/<cell>.csv     one trace per cell, written atomically
    masks/<cell>.pgm      GL segmentations (u > 0)
    aggregate.csv         deterministic summary (no timings)
    timing.csv            wall-clock summary
    table.csv, table.md   formatted comparison tables (include timings)
    cells.json            per-cell results
    manifest.json         seeds, config hash, versions, commit
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..gl import GlParams, gl_split, load_pgm, make_instance, save_pgm, synthetic_phantom
from ..scad import generate_instance, scad_problem
from ..solvers import SolverConfig, StopRule, run
from .config import ConfigError, RunConfig, load_config

__all__ = ["run_benchmark", "run_matrix", "build_instance", "AGGREGATE_COLUMNS",
           "TIMING_COLUMNS", "write_aggregate", "generate_instances"]

log = logging.getLogger(__name__)

AGGREGATE_COLUMNS = ("problem", "size", "algorithm", "criterion", "n_ok", "n_failed", "n_max",
                     "mean_iter", "min_iter", "max_iter", "mean_residual", "max_residual",
                     "mean_energy", "mean_dice", "mean_T_applies", "mean_A_applies",
                     "mean_f_evals")
TIMING_COLUMNS = ("problem", "size", "algorithm", "criterion", "mean_time", "min_time",
                  "max_time", "mean_time_inclusive")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _atomic_write(path: Path, writer) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def build_instance(problem, size: int, seed: int):
    """Return ``(split problem, u0, truth mask or None, image dims or None)``."""
    if problem.kind == "scad":
        inst = generate_instance(size, seed, problem.scad)
        return scad_problem(inst), np.zeros(inst.A.shape[1]), None, None
    params: GlParams = problem.gl
    if problem.image == "phantom":
        img, truth, lm, lv = synthetic_phantom(problem.rows, problem.cols, seed)
    else:
        img = load_pgm(problem.image)
        lab = load_pgm(problem.labels)
        if lab.shape != img.shape:
            raise ValueError("label image and input image differ in size")
        lm = ((lab > 0.75) | (lab < 0.25)).astype(float).ravel()
        lv = np.where(lab.ravel() > 0.75, 1.0, np.where(lab.ravel() < 0.25, -1.0, 0.0))
        truth = load_pgm(problem.truth) > 0.5 if problem.truth else None
    inst = make_instance(img, lm, lv, params, truth)
    return gl_split(inst, params), inst.initial_guess(), \
        (None if truth is None else np.asarray(truth).ravel()), img.shape


def _cell_tag(problem_kind, size, rep, alg, crit) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "-" for ch in f"{alg}_{crit}")
    return f"{problem_kind}_i{size}_r{rep}_{safe}"


def _reference(problem_obj, algorithms, problem_spec, u0):
    """High-accuracy solution used for distance-to-solution traces."""
    cfg = next((c for _, c in algorithms if c.algorithm == "pubc_e"), algorithms[0][1])
    cfg = replace(cfg, stop=StopRule("rel-change", problem_spec.reference_tol),
                  max_iter=problem_spec.reference_max_iter, label="reference")
    first = run(problem_obj, cfg, u0=u0)
    # second pass records distances to the final iterate of the first
    return cfg, first.u, run(problem_obj, cfg, u0=u0, u_ref=first.u)


def _run_task(task: dict) -> list[dict]:
    problem = task["problem"]
    size, rep, seed = task["size"], task["rep"], task["seed"]
    out_dir = Path(task["out_dir"])
    t0 = time.perf_counter()
    results = []
    try:
        prob, u0, truth, dims = build_instance(problem, size, seed)
    except Exception as exc:  # every cell of this instance fails
        log.error("instance (size=%s, seed=%s) failed: %s", size, seed, exc)
        for alg_name, _ in task["algorithms"]:
            for crit in task["criteria"]:
                results.append(_failed(problem.kind, size, rep, seed, alg_name, crit.name,
                                       f"instance generation failed: {exc}"))
        return results
    gen_time = time.perf_counter() - t0
    u_ref = None
    if problem.reference_tol is not None:
        try:
            _, u_ref, ref_trace = _reference(prob, task["algorithms"], problem, u0)
            tag = _cell_tag(problem.kind, size, rep, "reference", "ref")
            _atomic_write(out_dir / "traces" / f"{tag}.csv", ref_trace.to_csv)
        except Exception as exc:
            log.error("reference run failed: %s", exc)
    for alg_name, cfg in task["algorithms"]:
        for crit in task["criteria"]:
            tag = _cell_tag(problem.kind, size, rep, alg_name, crit.name)
            cell_cfg = replace(cfg, stop=crit.rule, max_iter=crit.max_iter)
            try:
                tr = run(prob, cell_cfg, u0=u0, truth=truth, u_ref=u_ref)
            except Exception as exc:
                log.error("cell %s failed: %s", tag, exc)
                results.append(_failed(problem.kind, size, rep, seed, alg_name, crit.name,
                                       f"{type(exc).__name__}: {exc}"))
                continue
            trace_file = out_dir / "traces" / f"{tag}.csv"
            _atomic_write(trace_file, tr.to_csv)
            if dims is not None:
                mask = (tr.u > 0).reshape(dims).astype(float)
                _atomic_write(out_dir / "masks" / f"{tag}.pgm",
                              lambda p, m=mask: save_pgm(m, p, maxval=255))
            last = tr.records[-1]
            results.append({
                "problem": problem.kind, "size": size, "rep": rep, "seed": seed,
                "algorithm": alg_name, "criterion": crit.name, "status": "ok",
                "iterations": tr.iterations, "stop_reason": tr.stop_reason,
                "hit_max": tr.stop_reason == "Max",
                "final_residual": float(last.residual), "final_energy": float(last.energy),
                "final_dice": float(last.dice),
                "T_applies": int(tr.counts.get("T", 0)), "A_applies": int(tr.counts.get("A", 0)),
                "f_evals": int(tr.counts.get("f", 0)),
                "wall_exclusive": tr.wall_time, "wall_inclusive": tr.wall_time + gen_time,
                "trace_file": f"traces/{tag}.csv", "error": "",
            })
    return results


def _failed(kind, size, rep, seed, alg, crit, msg) -> dict:
    nan = float("nan")
    return {"problem": kind, "size": size, "rep": rep, "seed": seed, "algorithm": alg,
            "criterion": crit, "status": "failed", "iterations": 0, "stop_reason": "",
            "hit_max": False, "final_residual": nan, "final_energy": nan, "final_dice": nan,
            "T_applies": 0, "A_applies": 0, "f_evals": 0, "wall_exclusive": nan,
            "wall_inclusive": nan, "trace_file": "", "error": msg}


def _tasks(cfg: RunConfig) -> list[dict]:
    tasks = []
    for size in cfg.problem.sizes:
        for rep, seed in enumerate(cfg.problem.instance_seeds()):
            tasks.append({"problem": cfg.problem, "size": size, "rep": rep, "seed": seed,
                          "algorithms": cfg.algorithms, "criteria": cfg.criteria,
                          "out_dir": str(cfg.output_dir)})
    return tasks


def run_matrix(cfg: RunConfig) -> list[dict]:
    """Run every cell; results come back in config order regardless of workers."""
    tasks = _tasks(cfg)
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_task, tasks))
    else:
        chunks = [_run_task(t) for t in tasks]
    return [r for chunk in chunks for r in chunk]


def _mean(vals):
    vals = [v for v in vals if v == v]
    return float(np.mean(vals)) if vals else float("nan")


def _groups(cfg: RunConfig, cells: list[dict]):
    for size in cfg.problem.sizes:
        for alg_name, _ in cfg.algorithms:
            for crit in cfg.criteria:
                group = [c for c in cells if c["size"] == size and c["algorithm"] == alg_name
                         and c["criterion"] == crit.name]
                yield size, alg_name, crit.name, group


def aggregate_rows(cfg: RunConfig, cells: list[dict]) -> list[dict]:
    rows = []
    for size, alg, crit, group in _groups(cfg, cells):
        ok = [c for c in group if c["status"] == "ok"]
        its = [c["iterations"] for c in ok]
        rows.append({
            "problem": cfg.problem.kind, "size": size, "algorithm": alg, "criterion": crit,
            "n_ok": len(ok), "n_failed": len(group) - len(ok),
            "n_max": sum(1 for c in ok if c["hit_max"]),
            "mean_iter": _mean(its), "min_iter": min(its) if its else "",
            "max_iter": max(its) if its else "",
            "mean_residual": _mean([c["final_residual"] for c in ok]),
            "max_residual": max((c["final_residual"] for c in ok), default=float("nan")),
            "mean_energy": _mean([c["final_energy"] for c in ok]),
            "mean_dice": _mean([c["final_dice"] for c in ok]),
            "mean_T_applies": _mean([c["T_applies"] for c in ok]),
            "mean_A_applies": _mean([c["A_applies"] for c in ok]),
            "mean_f_evals": _mean([c["f_evals"] for c in ok]),
        })
    return rows


def timing_rows(cfg: RunConfig, cells: list[dict]) -> list[dict]:
    rows = []
    for size, alg, crit, group in _groups(cfg, cells):
        t = [c["wall_exclusive"] for c in group if c["status"] == "ok"]
        ti = [c["wall_inclusive"] for c in group if c["status"] == "ok"]
        rows.append({"problem": cfg.problem.kind, "size": size, "algorithm": alg,
                     "criterion": crit, "mean_time": _mean(t),
                     "min_time": min(t) if t else float("nan"),
                     "max_time": max(t) if t else float("nan"),
                     "mean_time_inclusive": _mean(ti)})
    return rows


def _write_csv(path: Path, columns, rows) -> None:
    def w(p):
        with open(p, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(columns)
            for r in rows:
                wr.writerow([_fmt(r[c]) for c in columns])
    _atomic_write(path, w)


def write_aggregate(path: Path, cfg: RunConfig, cells: list[dict]) -> None:
    _write_csv(path, AGGREGATE_COLUMNS, aggregate_rows(cfg, cells))


def _table(cfg: RunConfig, agg: list[dict], tim: list[dict]):
    """Wide table: SCAD rows are (criterion, size); GL rows are algorithms."""
    key = {(r["size"], r["algorithm"], r["criterion"]): r for r in agg}
    tkey = {(r["size"], r["algorithm"], r["criterion"]): r for r in tim}
    algs = [a for a, _ in cfg.algorithms]
    crits = [c.name for c in cfg.criteria]
    if cfg.problem.kind == "scad":
        header = ["criterion", "i"] + [f"iter {a}" for a in algs] + \
                 [f"CPU time (s) {a}" for a in algs] + [f"G_proj {a}" for a in algs]
        rows = []
        for crit in crits:
            for size in cfg.problem.sizes:
                row = [crit, size]
                row += [_iter_cell(key[(size, a, crit)]) for a in algs]
                row += [f"{tkey[(size, a, crit)]['mean_time']:.2f}" for a in algs]
                row += [f"{key[(size, a, crit)]['mean_residual']:.2e}" for a in algs]
                rows.append(row)
        return header, rows
    header = ["algorithm"]
    for crit in crits:
        header += [f"iter ({crit})", f"CPU time (s) ({crit})", f"T-applies ({crit})",
                   f"DICE ({crit})"]
    rows = []
    for a in algs:
        row = [a]
        for crit in crits:
            r = key[(1, a, crit)]
            row += [_iter_cell(r), f"{tkey[(1, a, crit)]['mean_time']:.2f}",
                    f"{r['mean_T_applies']:.0f}", f"{r['mean_dice']:.4f}"]
        rows.append(row)
    return header, rows


def _iter_cell(r) -> str:
    if r["n_ok"] == 0:
        return "failed"
    if r["n_max"] == r["n_ok"]:
        return "Max"
    return f"{r['mean_iter']:.0f}"


def _git_commit() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "-C", str(here), "rev-parse", "HEAD"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_outputs(cfg: RunConfig, cells: list[dict]) -> None:
    out = cfg.output_dir
    agg = aggregate_rows(cfg, cells)
    tim = timing_rows(cfg, cells)
    if "csv" in cfg.formats:
        _write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, agg)
        _write_csv(out / "timing.csv", TIMING_COLUMNS, tim)
        header, rows = _table(cfg, agg, tim)

        def wt(p):
            with open(p, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(header)
                wr.writerows(rows)
        _atomic_write(out / "table.csv", wt)
        md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        md += ["| " + " | ".join(str(x) for x in r) + " |" for r in rows]
        _atomic_write(out / "table.md", lambda p: Path(p).write_text("\n".join(md) + "\n"))
    if "json" in cfg.formats:
        _atomic_write(out / "cells.json",
                      lambda p: Path(p).write_text(json.dumps(_clean(cells), indent=2)))
    manifest = {
        "name": cfg.name,
        "config": str(cfg.source) if cfg.source else None,
        "config_hash": cfg.config_hash,
        "library_version": __version__,
        "numpy": np.__version__, "scipy": scipy.__version__,
        "python": platform.python_version(),
        "git_commit": _git_commit(),
        "workers": cfg.workers,
        "problem": cfg.problem.kind,
        "seeds": cfg.problem.instance_seeds(),
        "sizes": list(cfg.problem.sizes),
        "algorithms": [{"name": n, "algorithm": c.algorithm} for n, c in cfg.algorithms],
        "criteria": [{"name": c.name, "rule": c.rule.name, "max_iter": c.max_iter}
                     for c in cfg.criteria],
        "cells": [{k: c[k] for k in ("size", "rep", "seed", "algorithm", "criterion", "status",
                                     "trace_file", "error")} for c in cells],
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    _atomic_write(out / "manifest.json",
                  lambda p: Path(p).write_text(json.dumps(manifest, indent=2)))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and obj != obj:
        return None
    return obj


def run_benchmark(config_path, out: str | None = None, workers: int | None = None,
                  seed: int | None = None) -> int:
    """Run a benchmark config; returns 0 on success, 1 if any cell failed, 2 on bad config."""
    try:
        cfg = load_config(config_path, out, workers, seed)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    cells = run_matrix(cfg)
    write_outputs(cfg, cells)
    failed = sum(1 for c in cells if c["status"] != "ok")
    if failed:
        log.error("%d of %d cells failed; see cells.json", failed, len(cells))
        return 1
    return 0


def generate_instances(config_path, out: str | None = None, seed: int | None = None) -> int:
    """Write the instances of a config to disk (SCAD: npz+json; GL: PGMs)."""
    from ..scad import save_instance

    try:
        cfg = load_config(config_path, out, None, seed)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    inst_dir = cfg.output_dir / "instances"
    inst_dir.mkdir(parents=True, exist_ok=True)
    p = cfg.problem
    for size in p.sizes:
        for rep, s in enumerate(p.instance_seeds()):
            if p.kind == "scad":
                save_instance(generate_instance(size, s, p.scad), inst_dir / f"scad_i{size}_r{rep}")
            elif p.image == "phantom":
                img, truth, lm, lv = synthetic_phantom(p.rows, p.cols, s)
                stem = inst_dir / f"phantom_r{rep}"
                save_pgm(img, f"{stem}_image.pgm")
                save_pgm(truth.astype(float), f"{stem}_truth.pgm", maxval=255)
                lab = np.where(lm > 0, (lv + 1.0) / 2.0, 0.5).reshape(img.shape)
                save_pgm(lab, f"{stem}_labels.pgm", maxval=255)
            else:
                log.info("GL image instances are read from %s; nothing to generate", p.image)
    return 0
