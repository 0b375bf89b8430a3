import json
import subprocess
import sys

import numpy as np
import pytest

import oracles
from npclust import cli, ingest


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Synthetic three-cluster counts with gene lengths, one zero cell."""
    rng = np.random.default_rng(0)
    n = 60
    z = rng.integers(0, 3, size=n)
    base = np.array([30, 300, 3000])[z]
    profile = np.array([1.0, 1.1, 2.5, 2.7])
    counts = rng.poisson(base[:, None] * profile[None, :])
    counts[0, 0] = 0
    with open(tmp_path / "counts.tsv", "w") as fh:
        fh.write("gene\ts1\ts2\ts3\ts4\n")
        for i in range(n):
            fh.write(f"g{i}\t" + "\t".join(str(c) for c in counts[i]) + "\n")
    with open(tmp_path / "lengths.tsv", "w") as fh:
        for i in range(n):
            fh.write(f"g{i}\t{500 + 25 * i}\n")
    (tmp_path / "run.ini").write_text(
        "[general]\nseed = 3\n\n[input]\nlayout = a:2,b:2\n\n"
        "[normalize]\nimpute = true\n\n[select]\nm_range = 1-4\nrestarts = 3\n"
    )
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def normalize(out="norm", *extra):
    return run("normalize", "--config", "run.ini", "--counts", "counts.tsv",
               "--lengths", "lengths.tsv", "--out", out, *extra)


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_derive_seed():
    assert cli.derive_seed(1, "cluster") == cli.derive_seed(1, "cluster")
    assert cli.derive_seed(1, "cluster") != cli.derive_seed(1, "select_k")
    assert cli.derive_seed(1, "cluster") != cli.derive_seed(2, "cluster")


def test_parse_range():
    assert list(cli.parse_range("2-4")) == [2, 3, 4]
    assert list(cli.parse_range("3")) == [3]
    with pytest.raises(Exception):
        cli.parse_range("4-2")


def test_normalize_fpkm_arithmetic(workdir):
    assert run("normalize", "--counts", "counts.tsv", "--lengths", "lengths.tsv",
               "--layout", "a:2,b:2", "--no-log", "--cpm-threshold", "none", "--out", "n") == 0
    m = ingest.read_expression(workdir / "n" / "expression.tsv")
    raw = ingest.read_counts(workdir / "counts.tsv", lengths_path=workdir / "lengths.tsv")
    lib = raw.counts.sum(axis=0)
    for i in (0, 7, 59):
        for j in range(4):
            expected = raw.counts[i, j] / (lib[j] * (500 + 25 * i)) * 1e9
            assert abs(m.values[i, j] - expected) <= 1e-12 * max(expected, 1e-300)
    assert [s.name for s in m.provenance] == ["fpkm"]


def test_normalize_deterministic(workdir):
    assert normalize("n1") == 0
    assert normalize("n2") == 0
    assert tree(workdir / "n1") == tree(workdir / "n2")
    m = ingest.read_expression(workdir / "n1" / "expression.tsv")
    assert [s.name for s in m.provenance] == ["cpm_filter", "fpkm", "zero_impute", "log_transform"]
    manifest = json.loads((workdir / "n1" / "manifest.json").read_text())
    assert manifest["seeds"]["zero_impute"] == cli.derive_seed(3, "zero_impute")


def test_normalize_ordering_error(workdir):
    code = normalize("bad", "--steps", "cpm_filter,fpkm,log_transform,zero_impute")
    assert code == 4


def test_normalize_log_needs_impute(workdir):
    assert normalize("bad", "--no-impute") == 2


def test_cli_overrides_config(workdir):
    assert normalize("n", "--seed", "11") == 0
    manifest = json.loads((workdir / "n" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 11


def test_config_errors(workdir):
    (workdir / "bad.ini").write_text("[nonsense]\nx = 1\n")
    assert run("normalize", "--config", "bad.ini", "--out", "x") == 4
    assert run("cluster", "--matrix", "m.tsv") == 4
    assert run("frobnicate") == 4


def test_select_k_outputs(workdir):
    normalize()
    assert run("select-k", "--config", "run.ini", "--matrix", "norm/expression.tsv", "--out", "sel") == 0
    rows = (workdir / "sel" / "selection.tsv").read_text().splitlines()
    assert len(rows) == 1 + 4
    assert (workdir / "sel" / "selection_summary.txt").read_text().startswith("chosen_m=")
    assert run("select-k", "--config", "run.ini", "--matrix", "norm/expression.tsv",
               "--m-range", "1-1", "--out", "one") == 0
    assert (workdir / "one" / "selection_summary.txt").read_text().startswith("chosen_m=1 ")


def test_cluster_outputs_and_determinism(workdir):
    normalize()
    for out in ("c1", "c2"):
        assert run("cluster", "--config", "run.ini", "--matrix", "norm/expression.tsv",
                   "--m", "3", "--G", "128", "--out", out) == 0
    assert tree(workdir / "c1") == tree(workdir / "c2")
    trace = (workdir / "c1" / "trace.tsv").read_text().splitlines()
    ll = np.array([float(t.split("\t")[1]) for t in trace[1:-1]])
    assert np.all(np.diff(ll) >= -1e-10)
    manifest = json.loads((workdir / "c1" / "manifest.json").read_text())
    assert {"config_hash", "seeds", "bandwidth", "version"} <= set(manifest)
    assert manifest["blocks"] == [1, 1, 2, 2]


def test_cluster_m1(workdir):
    normalize()
    assert run("cluster", "--matrix", "norm/expression.tsv", "--m", "1", "--G", "64", "--out", "c") == 0
    labels = (workdir / "c" / "labels.tsv").read_text().splitlines()[1:]
    assert {line.split("\t")[1] for line in labels} == {"1"}


def test_cluster_auto(workdir):
    normalize()
    assert run("cluster", "--config", "run.ini", "--matrix", "norm/expression.tsv",
               "--m", "auto", "--G", "64", "--out", "auto") == 0
    summary = (workdir / "auto" / "selection_summary.txt").read_text()
    m = int(summary.split()[0].split("=")[1])
    assert json.loads((workdir / "auto" / "manifest.json").read_text())["m"] == m


def test_ari_command(workdir, capsys):
    (workdir / "a.tsv").write_text("gene_id\tlabel\n" + "".join(f"x{i}\t{v}\n" for i, v in enumerate([1, 1, 1, 2, 2, 2])))
    (workdir / "b.tsv").write_text("gene_id\tlabel\n" + "".join(f"x{i}\t{v}\n" for i, v in enumerate([1, 1, 2, 2, 3, 3])))
    assert run("ari", "a.tsv", "a.tsv") == 0
    assert capsys.readouterr().out.strip() == "ari=1.0"
    assert run("ari", "a.tsv", "b.tsv", "--out", "ariout") == 0
    value = float(capsys.readouterr().out.strip().split("=")[1])
    assert value == float(oracles.ari_pair_oracle([1, 1, 1, 2, 2, 2], [1, 1, 2, 2, 3, 3]))
    assert json.loads((workdir / "ariout" / "ari.json").read_text())["ari"] == value
    (workdir / "c.tsv").write_text("gene_id\tlabel\nq1\t1\nq2\t2\n")
    assert run("ari", "a.tsv", "c.tsv") != 0


def test_viz_command(workdir):
    normalize()
    run("cluster", "--matrix", "norm/expression.tsv", "--m", "2", "--G", "64", "--out", "c")
    assert run("viz-data", "--matrix", "norm/prelog.tsv", "--result", "c", "--out", "v") == 0
    lines = (workdir / "v" / "viz.tsv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2
    assert json.loads((workdir / "v" / "viz.json").read_text())["scale"] == "fpkm"
    assert run("viz-data", "--matrix", "norm/expression.tsv", "--result", "c", "--out", "v2") == 2


def test_module_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "npclust.cli", "ari", "missing.tsv", "missing.tsv"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "error" in proc.stderr
