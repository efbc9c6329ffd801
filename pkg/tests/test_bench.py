import csv
import json
import math

import numpy as np
import pytest

from bdfsplit.bench import cli
from bdfsplit.bench.config import ConfigError, load_config
from bdfsplit.bench.export import CLIP_FLOOR, ExportError, export_plotdata
from bdfsplit.bench.runner import AGGREGATE_COLUMNS, run_benchmark
from bdfsplit.bench.verify import SchemaError, verify_tables

SCAD_CFG = """
[run]
name = "mini"

[problem]
kind = "scad"
sizes = [1]
lambda_reg = 5e-4
seed = 0
reps = 2
reference_tol = 1e-10

[stop]
kind = "rel-change"
tol = 1e-4
max_iter = 2000

[[algorithm]]
name = "DCA"
algorithm = "dca"

[[algorithm]]
name = "pUBC_e"
algorithm = "pubc_e"
delta_t = 5.999999999999999
beta = { kind = "fista", adaptive = true, restart_every = 200, squared = true }
omega = { kind = "beta" }
"""

GL_CFG = """
[run]
name = "mini_gl"

[problem]
kind = "gl"
rows = 24
cols = 24
seed = 1

[stop]
max_iter = 300

[[criteria]]
name = "dice"
kind = "dice-bound"
tol = 0.95

[[criteria]]
name = "grad"
kind = "grad-norm"
tol = 1e-3

[[algorithm]]
name = "pUBC_e"
algorithm = "pubc_e"
delta_t = 4.0
k_steps = 5

[[algorithm]]
name = "DCA"
algorithm = "dca"
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def scad_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("scad")
    cfg = write(d, SCAD_CFG)
    assert run_benchmark(cfg, out=str(d / "out")) == 0
    return d / "out"


@pytest.fixture(scope="module")
def gl_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("gl")
    cfg = write(d, GL_CFG)
    assert run_benchmark(cfg, out=str(d / "out")) == 0
    return d / "out"


# --- config ---------------------------------------------------------------------

def test_config_parses(tmp_path):
    cfg = load_config(write(tmp_path, SCAD_CFG))
    assert cfg.problem.instance_seeds() == [0, 1]
    assert [n for n, _ in cfg.algorithms] == ["DCA", "pUBC_e"]
    assert cfg.algorithms[1][1].beta.squared
    assert cfg.criteria[0].name == "default" and cfg.criteria[0].max_iter == 2000
    assert len(cfg.config_hash) == 64


def test_config_seed_and_output_override(tmp_path, monkeypatch):
    cfg = load_config(write(tmp_path, SCAD_CFG), seed=10)
    assert cfg.problem.instance_seeds() == [10, 11]
    monkeypatch.setenv("BDFSPLIT_OUTPUT_DIR", str(tmp_path / "env"))
    assert load_config(write(tmp_path, SCAD_CFG)).output_dir == tmp_path / "env"
    assert load_config(write(tmp_path, SCAD_CFG), out="x").output_dir.name == "x"


def test_config_unknown_key_named(tmp_path):
    bad = SCAD_CFG.replace('algorithm = "dca"', 'algorithm = "dca"\nstepsize = 3')
    with pytest.raises(ConfigError, match=r"algorithm\[0\].*stepsize"):
        load_config(write(tmp_path, bad))


def test_config_nested_unknown_key(tmp_path):
    bad = SCAD_CFG.replace("squared = true", "squared = true, momentum = 1")
    with pytest.raises(ConfigError, match=r"algorithm\[1\]\.beta.*momentum"):
        load_config(write(tmp_path, bad))


def test_config_empty_algorithm_list(tmp_path):
    text = SCAD_CFG.split("[[algorithm]]")[0]
    with pytest.raises(ConfigError, match="empty"):
        load_config(write(tmp_path, text))


def test_config_invalid_step(tmp_path):
    bad = SCAD_CFG.replace("delta_t = 5.999999999999999", "delta_t = 7.0")
    with pytest.raises(ConfigError, match=r"algorithm\[1\]\.delta_t"):
        load_config(write(tmp_path, bad))


def test_config_bad_values(tmp_path):
    for old, new, pat in [("reps = 2", "reps = 0", "reps"),
                          ('kind = "scad"', 'kind = "lasso"', "problem.kind"),
                          ('algorithm = "dca"', 'algorithm = "ista"', "unknown algorithm"),
                          ("tol = 1e-4", "tol = -1.0", "stop")]:
        with pytest.raises(ConfigError, match=pat):
            load_config(write(tmp_path, SCAD_CFG.replace(old, new)))


def test_config_toml_syntax_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[run\nname = 1"))


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.toml")


def test_config_rejects_grad_norm_on_scad(tmp_path):
    bad = SCAD_CFG + '\n[[criteria]]\nname = "g"\nkind = "grad-norm"\ntol = 1e-3\n'
    with pytest.raises(ConfigError, match="gl problems only"):
        load_config(write(tmp_path, bad))


def test_config_gl_paths_relative_to_file(tmp_path):
    text = GL_CFG.replace('kind = "gl"', 'kind = "gl"\nimage = "img.pgm"\nlabels = "lab.pgm"')
    sub = tmp_path / "sub"
    sub.mkdir()
    cfg = load_config(write(sub, text))
    assert cfg.problem.image == str(sub.resolve() / "img.pgm")
    with pytest.raises(ConfigError, match="labels"):
        load_config(write(sub, GL_CFG.replace('kind = "gl"', 'kind = "gl"\nimage = "i.pgm"')))


def test_run_bad_config_exit_code(tmp_path):
    assert run_benchmark(write(tmp_path, "[run]\n")) == 2


# --- runner outputs ---------------------------------------------------------------

def test_outputs_exist(scad_run):
    for name in ("aggregate.csv", "timing.csv", "table.csv", "table.md", "cells.json",
                 "manifest.json"):
        assert (scad_run / name).exists(), name
    traces = sorted(p.name for p in (scad_run / "traces").iterdir())
    assert "scad_i1_r0_DCA_default.csv" in traces
    assert "scad_i1_r1_reference_ref.csv" in traces
    assert not any(n.endswith(".tmp") for n in traces)


def test_aggregate_columns(scad_run):
    rows = read_csv(scad_run / "aggregate.csv")
    assert list(rows[0]) == list(AGGREGATE_COLUMNS)
    dca = next(r for r in rows if r["algorithm"] == "DCA")
    cells = json.loads((scad_run / "cells.json").read_text())
    its = [c["iterations"] for c in cells if c["algorithm"] == "DCA"]
    assert float(dca["mean_iter"]) == np.mean(its)
    assert int(dca["min_iter"]) == min(its) and int(dca["n_ok"]) == 2


def test_table_shape(scad_run):
    md = (scad_run / "table.md").read_text()
    assert "iter DCA" in md and "CPU time (s) pUBC_e" in md and "G_proj" in md


def test_manifest(scad_run):
    m = json.loads((scad_run / "manifest.json").read_text())
    assert m["seeds"] == [0, 1] and len(m["config_hash"]) == 64
    assert {"library_version", "numpy", "scipy", "git_commit"} <= set(m)
    assert len(m["cells"]) == 4
    assert all({"seed", "trace_file"} <= set(c) for c in m["cells"])


def test_trace_file_consistent_with_aggregate(scad_run):
    cells = json.loads((scad_run / "cells.json").read_text())
    c = next(c for c in cells if c["algorithm"] == "pUBC_e")
    rows = read_csv(scad_run / c["trace_file"])
    assert len(rows) == c["iterations"]
    assert float(rows[-1]["residual"]) == c["final_residual"]
    assert all(not math.isnan(float(r["dist_ref"])) for r in rows)


def test_gl_run(gl_run):
    rows = read_csv(gl_run / "aggregate.csv")
    assert {(r["algorithm"], r["criterion"]) for r in rows} == {
        ("pUBC_e", "dice"), ("pUBC_e", "grad"), ("DCA", "dice"), ("DCA", "grad")}
    for r in rows:
        if r["criterion"] == "dice":
            assert float(r["mean_dice"]) >= 0.95
    masks = sorted(p.name for p in (gl_run / "masks").iterdir())
    assert "gl_i1_r0_pUBC_e_dice.pgm" in masks
    md = (gl_run / "table.md").read_text()
    assert "(dice)" in md and "(grad)" in md


def test_failed_cell_is_isolated(tmp_path, monkeypatch):
    import bdfsplit.solvers as solvers

    def boom(*a, **k):
        raise FloatingPointError("injected")

    monkeypatch.setattr(solvers, "step_dca", boom)
    cfg = write(tmp_path, SCAD_CFG.replace("reps = 2", "reps = 1")
                .replace("reference_tol = 1e-10\n", ""))
    assert run_benchmark(cfg, out=str(tmp_path / "o")) == 1
    cells = json.loads((tmp_path / "o" / "cells.json").read_text())
    status = {c["algorithm"]: c["status"] for c in cells}
    assert status == {"DCA": "failed", "pUBC_e": "ok"}
    assert "injected" in next(c["error"] for c in cells if c["algorithm"] == "DCA")
    rows = read_csv(tmp_path / "o" / "aggregate.csv")
    assert next(r for r in rows if r["algorithm"] == "DCA")["n_failed"] == "1"
    assert (tmp_path / "o" / "traces" / "scad_i1_r0_pUBC_e_default.csv").exists()


def test_gen_writes_instances(tmp_path):
    cfg = write(tmp_path, GL_CFG)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    inst = tmp_path / "g" / "instances"
    assert (inst / "phantom_r0_image.pgm").exists()
    # the generated files drive a run from images
    text = GL_CFG.replace('kind = "gl"', 'kind = "gl"\nimage = "g/instances/phantom_r0_image.pgm"\n'
                          'labels = "g/instances/phantom_r0_labels.pgm"\n'
                          'truth = "g/instances/phantom_r0_truth.pgm"')
    cfg2 = write(tmp_path, text, "img.toml")
    assert run_benchmark(cfg2, out=str(tmp_path / "r")) == 0
    rows = read_csv(tmp_path / "r" / "aggregate.csv")
    assert float(next(r for r in rows if r["criterion"] == "dice")["mean_dice"]) >= 0.95


def test_gen_scad(tmp_path):
    cfg = write(tmp_path, SCAD_CFG.replace("reps = 2", "reps = 1"))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "instances" / "scad_i1_r0.npz").exists()


# --- verify -----------------------------------------------------------------------

EXPECT = """
[[cell]]
algorithm = "DCA"
metric = "mean_iter"
min = 1
max = 100000

[[ratio]]
metric = "mean_iter"
numerator = "DCA"
denominator = "pUBC_e"
min = 0.1
"""


def test_verify_pass(scad_run, tmp_path):
    rep = verify_tables(scad_run / "aggregate.csv", write(tmp_path, EXPECT, "e.toml"))
    assert rep.passed and len(rep.checks) == 2
    assert rep.lines()[-1] == "overall: PASS (2/2)"


def test_verify_zero_tolerance_fails_with_diff(scad_run, tmp_path):
    text = '[[cell]]\nalgorithm = "DCA"\nmetric = "mean_iter"\ntarget = 1.0\ntol = 0.0\n'
    rep = verify_tables(scad_run / "aggregate.csv", write(tmp_path, text, "e.toml"))
    assert not rep.passed
    assert "FAIL" in rep.lines()[0] and "diff=" in rep.lines()[0]


def test_verify_partial(scad_run, tmp_path):
    text = '[[cell]]\nalgorithm = "pUBC_e"\nmetric = "mean_residual"\nmax = 1.0\n'
    rep = verify_tables(scad_run / "aggregate.csv", write(tmp_path, text, "e.toml"))
    assert rep.passed and len(rep.checks) == 1


def test_verify_timing_ratio(scad_run, tmp_path):
    text = ('[[ratio]]\nmetric = "mean_time"\nsource = "timing"\nnumerator = "DCA"\n'
            'denominator = "pUBC_e"\nmin = 0.0\n')
    rep = verify_tables(scad_run / "aggregate.csv", write(tmp_path, text, "e.toml"))
    assert rep.checks[0].measured > 0


@pytest.mark.parametrize("text, pat", [
    ('[[cell]]\nalgorithm = "DCA"\nmetric = "nope"\nmax = 1\n', "unknown metric"),
    ('[[cell]]\nalgorithm = "XYZ"\nmetric = "mean_iter"\nmax = 1\n', "no row"),
    ('[[cell]]\nalgorithm = "DCA"\nmetric = "mean_iter"\n', "need min"),
    ('[[cell]]\nalgorithm = "DCA"\nmetric = "mean_iter"\ntarget = 1\n', "together"),
    ('[[cell]]\nalgorithm = "DCA"\nmetric = "mean_iter"\nmax = 1\nfoo = 2\n', "unknown key"),
    ('[[bogus]]\nx = 1\n', "top-level"),
    ('', "no \\[\\[cell\\]\\]"),
])
def test_verify_schema_errors(scad_run, tmp_path, text, pat):
    with pytest.raises(SchemaError, match=pat):
        verify_tables(scad_run / "aggregate.csv", write(tmp_path, text, "e.toml"))


# --- export -----------------------------------------------------------------------

def test_export_residual_grouped_and_sorted(scad_run, tmp_path):
    t = scad_run / "traces"
    files = [t / "scad_i1_r0_pUBC_e_default.csv", t / "scad_i1_r0_DCA_default.csv"]
    rows = export_plotdata(files, "residual-vs-iter", tmp_path / "p.csv")
    assert rows == sorted(rows, key=lambda r: (r[0], r[1]))
    assert rows[0][0] == "scad_i1_r0_DCA_default"
    assert all(v >= CLIP_FLOOR for _, _, v, _ in rows)
    out = read_csv(tmp_path / "p.csv")
    assert list(out[0]) == ["algorithm", "n", "value", "clipped"]
    # the last residual equals the one recorded for the cell
    cells = json.loads((scad_run / "cells.json").read_text())
    fin = next(c["final_residual"] for c in cells if c["trace_file"].endswith(files[0].name))
    last = [r for r in rows if r[0] == "scad_i1_r0_pUBC_e_default"][-1]
    assert last[2] == max(fin, CLIP_FLOOR)


def test_export_distance_needs_reference(scad_run, tmp_path):
    f = scad_run / "traces" / "scad_i1_r0_DCA_default.csv"
    with pytest.raises(ExportError, match="reference"):
        export_plotdata([f], "dist-to-ustar-vs-iter")


def test_export_reference_self_is_clipped(scad_run, tmp_path):
    ref = scad_run / "traces" / "scad_i1_r0_reference_ref.csv"
    rows = export_plotdata([], "dist-to-ustar-vs-iter", reference=ref)
    assert rows[-1][2] == CLIP_FLOOR and rows[-1][3] == 1


def test_export_errors(tmp_path):
    with pytest.raises(ExportError):
        export_plotdata([tmp_path / "missing.csv"], "residual-vs-iter")
    with pytest.raises(ExportError):
        export_plotdata([], "histogram")
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ExportError, match="not a trace"):
        export_plotdata([tmp_path / "x.csv"], "residual-vs-iter")


# --- CLI --------------------------------------------------------------------------

def test_cli_check_config(tmp_path, capsys):
    assert cli.main(["check-config", "--config", str(write(tmp_path, SCAD_CFG))]) == 0
    assert "scad, 2 algorithms" in capsys.readouterr().out
    assert cli.main(["check-config", "--config", str(write(tmp_path, "[run]\n"))]) == 2


def test_cli_verify_and_export(scad_run, tmp_path, capsys):
    e = write(tmp_path, EXPECT, "e.toml")
    assert cli.main(["verify", "--aggregate", str(scad_run / "aggregate.csv"),
                     "--expectations", str(e)]) == 0
    assert "overall: PASS" in capsys.readouterr().out
    f = scad_run / "traces" / "scad_i1_r0_DCA_default.csv"
    assert cli.main(["export", str(f), "--out", str(tmp_path / "p.csv")]) == 0
    assert cli.main(["export", str(f), "--kind", "dist-to-ustar-vs-iter",
                     "--out", str(tmp_path / "q.csv")]) == 2
    assert cli.main(["verify", "--aggregate", str(tmp_path / "none.csv"),
                     "--expectations", str(e)]) == 2


def test_cli_rejects_bad_workers(tmp_path):
    assert cli.main(["run", "--config", str(write(tmp_path, SCAD_CFG)), "--workers", "0"]) == 2


def test_cli_requires_verb():
    with pytest.raises(SystemExit):
        cli.main([])
