"""Tidy plot data from trace CSVs."""

from __future__ import annotations

import csv
from pathlib import Path

__all__ = ["PLOT_KINDS", "CLIP_FLOOR", "ExportError", "export_plotdata", "read_trace"]

PLOT_KINDS = ("residual-vs-iter", "dist-to-ustar-vs-iter")
CLIP_FLOOR = 1e-16


class ExportError(ValueError):
    pass


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"n", "residual", "dist_ref"} <= set(rows[0]):
        raise ExportError(f"{path}: not a trace file (missing n/residual/dist_ref columns)")
    return rows


def _label(path: Path) -> str:
    return path.stem


def export_plotdata(trace_paths, kind: str, out_path=None, reference=None) -> list[tuple]:
    """Write ``algorithm,n,value,clipped`` rows sorted by ``(algorithm, n)``.

    Values below ``CLIP_FLOOR`` (including zero) are replaced by the floor and
    flagged so the column is safe for log axes.  The distance kind needs the
    reference run's trace (``reference``); it is exported too.
    """
    if kind not in PLOT_KINDS:
        raise ExportError(f"unknown plot kind '{kind}'; expected one of {', '.join(PLOT_KINDS)}")
    paths = [Path(p) for p in trace_paths]
    if kind == "dist-to-ustar-vs-iter":
        if reference is None:
            raise ExportError("distance export needs the reference run trace (--reference)")
        ref = Path(reference)
        if not ref.exists():
            raise ExportError(f"reference trace {ref} does not exist")
        if ref not in paths:
            paths.append(ref)
    if not paths:
        raise ExportError("no trace files given")
    column = "residual" if kind == "residual-vs-iter" else "dist_ref"
    rows = []
    for p in paths:
        if not p.exists():
            raise ExportError(f"trace {p} does not exist")
        for r in read_trace(p):
            v = float(r[column])
            if v != v:
                raise ExportError(f"{p}: column '{column}' is empty; was the run given a reference?")
            clipped = v < CLIP_FLOOR
            rows.append((_label(p), int(r["n"]), CLIP_FLOOR if clipped else v, int(clipped)))
    rows.sort(key=lambda t: (t[0], t[1]))
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["algorithm", "n", "value", "clipped"])
            for a, n, v, c in rows:
                w.writerow([a, n, repr(v), c])
    return rows
