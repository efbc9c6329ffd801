"""Check aggregate tables against an expectations file.

Expectations are TOML::

    [[cell]]
    size = 1                 # optional, default 1
    algorithm = "DCA"
    criterion = "default"    # optional
    metric = "mean_iter"
    min = 230                # any of min / max / target+tol
    max = 700

    [[ratio]]
    metric = "mean_iter"     # or a timing column with source = "timing"
    numerator = "DCA"
    denominator = "BapDCA_e"
    min = 1.8                # ratio must exceed min strictly

Only listed cells are checked.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["SchemaError", "CheckResult", "VerifyReport", "verify_tables"]


class SchemaError(ValueError):
    pass


@dataclass
class CheckResult:
    check: str
    measured: float
    passed: bool
    target: float | None = None
    tol: float | None = None
    lo: float | None = None
    hi: float | None = None

    def line(self) -> str:
        parts = [f"{'PASS' if self.passed else 'FAIL'} {self.check}: measured={self.measured:.6g}"]
        if self.target is not None:
            parts.append(f"target={self.target:g} tol={self.tol:g} "
                         f"diff={abs(self.measured - self.target):.3g}")
        if self.lo is not None:
            parts.append(f"min={self.lo:g}")
        if self.hi is not None:
            parts.append(f"max={self.hi:g}")
        return " ".join(parts)


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = [c.line() for c in self.checks]
        out.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                   f"({sum(c.passed for c in self.checks)}/{len(self.checks)})")
        return out


def _read(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _find(rows, size, alg, crit, where) -> dict:
    hits = [r for r in rows if r["algorithm"] == alg and int(r["size"]) == size
            and (crit is None or r["criterion"] == crit)]
    if not hits:
        raise SchemaError(f"{where}: no row for size={size} algorithm={alg!r}"
                          + (f" criterion={crit!r}" if crit else ""))
    if len(hits) > 1:
        raise SchemaError(f"{where}: several rows match; give a criterion")
    return hits[0]


def _value(row, metric, where) -> float:
    if metric not in row:
        raise SchemaError(f"{where}: unknown metric '{metric}'")
    try:
        return float(row[metric])
    except ValueError:
        return math.nan


def _bounds(spec: dict, where: str):
    lo, hi = spec.get("min"), spec.get("max")
    target, tol = spec.get("target"), spec.get("tol")
    if (target is None) != (tol is None):
        raise SchemaError(f"{where}: target and tol go together")
    if lo is None and hi is None and target is None:
        raise SchemaError(f"{where}: need min, max or target+tol")
    if tol is not None and tol < 0:
        raise SchemaError(f"{where}: tol must be nonnegative")
    return lo, hi, target, tol


def _judge(measured, lo, hi, target, tol, strict_lo=False) -> bool:
    if measured != measured:
        return False
    ok = True
    if lo is not None:
        ok &= measured > lo if strict_lo else measured >= lo
    if hi is not None:
        ok &= measured <= hi
    if target is not None:
        ok &= abs(measured - target) <= tol
    return bool(ok)


_CELL_KEYS = {"size", "algorithm", "criterion", "metric", "min", "max", "target", "tol"}
_RATIO_KEYS = {"size", "criterion", "metric", "numerator", "denominator", "min", "max",
               "target", "tol", "source"}


def verify_tables(aggregate, expectations, timing=None) -> VerifyReport:
    """Evaluate every listed expectation against the aggregate (and timing) CSV."""
    agg = _read(aggregate)
    tim = None
    if timing is None:
        cand = Path(aggregate).with_name("timing.csv")
        timing = cand if cand.exists() else None
    if timing is not None:
        tim = _read(timing)
    try:
        spec = tomllib.loads(Path(expectations).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{expectations}: {exc}") from None
    extra = set(spec) - {"cell", "ratio"}
    if extra:
        raise SchemaError(f"unknown top-level table(s): {', '.join(sorted(extra))}")
    report = VerifyReport()
    for i, c in enumerate(spec.get("cell", [])):
        where = f"cell[{i}]"
        bad = set(c) - _CELL_KEYS
        if bad:
            raise SchemaError(f"{where}: unknown key(s) {', '.join(sorted(bad))}")
        if "algorithm" not in c or "metric" not in c:
            raise SchemaError(f"{where}: needs algorithm and metric")
        lo, hi, target, tol = _bounds(c, where)
        size = int(c.get("size", 1))
        row = _find(agg, size, c["algorithm"], c.get("criterion"), where)
        m = _value(row, c["metric"], where)
        name = f"{c['metric']}[i={size}, {c['algorithm']}" + \
               (f", {c['criterion']}]" if c.get("criterion") else "]")
        report.checks.append(CheckResult(name, m, _judge(m, lo, hi, target, tol),
                                         target, tol, lo, hi))
    for i, r in enumerate(spec.get("ratio", [])):
        where = f"ratio[{i}]"
        bad = set(r) - _RATIO_KEYS
        if bad:
            raise SchemaError(f"{where}: unknown key(s) {', '.join(sorted(bad))}")
        for k in ("metric", "numerator", "denominator"):
            if k not in r:
                raise SchemaError(f"{where}: missing '{k}'")
        lo, hi, target, tol = _bounds(r, where)
        src = r.get("source", "aggregate")
        if src not in ("aggregate", "timing"):
            raise SchemaError(f"{where}: source must be aggregate or timing")
        rows = agg if src == "aggregate" else tim
        if rows is None:
            raise SchemaError(f"{where}: timing ratios need timing.csv")
        size = int(r.get("size", 1))
        crit = r.get("criterion")
        num = _value(_find(rows, size, r["numerator"], crit, where), r["metric"], where)
        den = _value(_find(rows, size, r["denominator"], crit, where), r["metric"], where)
        ratio = num / den if den else math.nan
        name = f"{r['metric']} ratio {r['numerator']}/{r['denominator']} [i={size}]"
        report.checks.append(CheckResult(name, ratio, _judge(ratio, lo, hi, target, tol, True),
                                         target, tol, lo, hi))
    if not report.checks:
        raise SchemaError(f"{expectations}: no [[cell]] or [[ratio]] entries")
    return report
