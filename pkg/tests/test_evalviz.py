import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

import oracles
from npclust import evalviz, ingest
from npclust.errors import AlignmentError, PreconditionError


def labeling(labels, prefix="g"):
    return evalviz.Labeling([f"{prefix}{i}" for i in range(len(labels))], labels)


def expected_ari(a, b):
    r = oracles.ari_pair_oracle(a, b)
    if r is None:
        return 1.0 if oracles.same_partition(a, b) else 0.0
    return float(r)


# -- ARI -------------------------------------------------------------------

def test_ari_identical():
    assert evalviz.ari([1, 1, 2, 3, 3], [1, 1, 2, 3, 3]) == 1.0


def test_ari_permutation():
    assert evalviz.ari(labeling([1, 1, 2, 2]), labeling([2, 2, 1, 1])) == 1.0


def test_ari_fixture_pair_oracle():
    a, b = [1, 1, 1, 2, 2, 2], [1, 1, 2, 2, 3, 3]
    # contingency [[2, 1, 0], [0, 1, 2]]: index 2, expected 6*3/15, max 9/2
    assert oracles.ari_pair_oracle(a, b) == Fraction(8, 33)
    assert evalviz.ari(a, b) == 8 / 33


def test_ari_aligns_by_id():
    a = evalviz.Labeling(["x", "y", "z", "w"], [1, 1, 2, 2])
    b = evalviz.Labeling(["w", "z", "y", "x"], [5, 5, 7, 7])
    assert evalviz.ari(a, b) == 1.0


def test_ari_alignment_error():
    a = evalviz.Labeling(["x", "y"], [1, 2])
    b = evalviz.Labeling(["x", "q"], [1, 2])
    with pytest.raises(AlignmentError) as err:
        evalviz.ari(a, b)
    assert err.value.missing_in_b == ["y"] and err.value.missing_in_a == ["q"]


def test_ari_degenerate():
    r = evalviz.ari_details([1, 1, 1], [4, 4, 4])
    assert r.ari == 1.0 and r.degenerate
    r = evalviz.ari_details([1, 2, 3], [1, 2, 3])
    assert r.ari == 1.0 and r.degenerate
    r = evalviz.ari_details([1, 1, 1], [1, 2, 3])
    assert r.ari == 0.0 and not r.degenerate
    assert evalviz.ari_details([1], [2]).degenerate


@pytest.mark.parametrize("n", range(1, 7))
def test_ari_exhaustive(n):
    parts = list(oracles.set_partitions(n))
    for a in parts:
        for b in parts:
            assert evalviz.ari(a, b) == expected_ari(a, b)


@given(st.integers(7, 8).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 4), min_size=n, max_size=n),
    st.lists(st.integers(0, 4), min_size=n, max_size=n))))
@settings(max_examples=300, deadline=None)
def test_ari_random_n7_8(pair):
    a, b = pair
    assert evalviz.ari(a, b) == expected_ari(a, b)


@given(st.lists(st.integers(1, 5), min_size=2, max_size=30), st.data())
@settings(max_examples=200, deadline=None)
def test_ari_symmetric_and_relabel_invariant(a, data):
    b = data.draw(st.lists(st.integers(1, 5), min_size=len(a), max_size=len(a)))
    assert evalviz.ari(a, b) == evalviz.ari(b, a)
    perm = data.draw(st.permutations([1, 2, 3, 4, 5]))
    relabeled = [perm[x - 1] * 10 for x in a]
    assert evalviz.ari(relabeled, b) == evalviz.ari(a, b)
    assert -1.0 <= evalviz.ari(a, b) <= 1.0


def test_read_labeling(tmp_path):
    p = tmp_path / "l.tsv"
    p.write_text("gene_id\tlabel\nb\t2\na\t1\n")
    lab = evalviz.read_labeling(p)
    assert lab.ids == ["b", "a"] and list(lab.labels) == [2, 1]
    p.write_text("a,1\nb,x\n")
    with pytest.raises(Exception):
        evalviz.read_labeling(p)


# -- viz table --------------------------------------------------------------

def expr(values, layout, provenance=()):
    values = np.asarray(values, dtype=float)
    return ingest.ExpressionMatrix([f"g{i}" for i in range(len(values))],
                                   [f"s{j}" for j in range(values.shape[1])],
                                   values, layout, provenance)


def test_viz_one_cluster_one_condition():
    t = evalviz.viz_table(expr([[1.0, 2.0], [3.0, 4.0]], (("a", 2),)), ([1, 1], [1.0]), (("a", 2),))
    assert t.records[0].lambdas[0] == 1.0 and t.records[0].gene_count == 2


def test_viz_equal_mass_split():
    t = evalviz.viz_table(expr([[2.0], [2.0]], (("a", 1),)), ([1, 2], [0.5, 0.5]), (("a", 1),))
    assert [r.lambdas[0] for r in t.records] == [0.5, 0.5]


def test_viz_fixture_arithmetic():
    y = [[1.0, 2.0, 10.0], [3.0, 4.0, 20.0], [5.0, 6.0, 30.0]]
    layout = (("a", 2), ("b", 1))
    labels = [1, 2, 1]
    t = evalviz.viz_table(expr(y, layout), (labels, [0.6, 0.4]), layout)
    # condition a: cluster 1 = 1+2+5+6 = 14, cluster 2 = 3+4 = 7
    # condition b: cluster 1 = 10+30 = 40, cluster 2 = 20
    assert_allclose(t.records[0].lambdas, [14 / 21, 40 / 60], rtol=1e-15)
    assert_allclose(t.records[1].lambdas, [7 / 21, 20 / 60], rtol=1e-15)
    assert [r.pi_hat for r in t.records] == [0.6, 0.4]
    assert [r.gene_count for r in t.records] == [2, 1]
    assert t.conditions == ["a", "b"]


def test_viz_rejects_log_scale():
    layout = (("a", 1),)
    with pytest.raises(PreconditionError, match="pre-log"):
        evalviz.viz_table(expr([[-1.0], [2.0]], layout), ([1, 1], [1.0]), layout)
    logged = expr([[1.0], [2.0]], layout, (ingest.Step("log_transform"),))
    with pytest.raises(PreconditionError, match="pre-log"):
        evalviz.viz_table(logged, ([1, 1], [1.0]), layout)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_viz_mass_and_scale(seed, c):
    rng = np.random.default_rng(seed)
    layout = (("a", 2), ("b", 1), ("c", 3))
    y = rng.gamma(1.0, 5.0, size=(20, 6))
    labels = rng.integers(1, 4, size=20)
    pi = rng.dirichlet(np.ones(3))
    t = evalviz.viz_table(expr(y, layout), (labels, pi), layout)
    lam = np.array([r.lambdas for r in t.records])
    assert np.all(lam >= 0)
    assert_allclose(lam.sum(axis=0), 1.0, rtol=1e-12)
    # numerators: condition totals times lambda recover the grand total
    cond_totals = [y[:, c_].sum() for c_ in ingest.layout_columns(layout)]
    assert_allclose((lam * np.array(cond_totals)).sum(), y.sum(), rtol=1e-9)
    scaled = evalviz.viz_table(expr(c * y, layout), (labels, pi), layout)
    assert_allclose(np.array([r.lambdas for r in scaled.records]), lam, rtol=1e-12, atol=1e-15)
    assert abs(sum(r.pi_hat for r in t.records) - 1) <= 1e-10


def test_write_viz(tmp_path):
    layout = (("a", 1), ("b", 1))
    t = evalviz.viz_table(expr([[1.0, 3.0], [2.0, 1.0]], layout, (ingest.Step("fpkm"),)),
                          ([1, 2], [0.5, 0.5]), layout)
    evalviz.write_viz(tmp_path / "v.tsv", t, tmp_path / "v.json")
    lines = (tmp_path / "v.tsv").read_text().splitlines()
    assert lines[0] == "cluster\tcondition\tlambda\tpi_hat\tgene_count"
    assert len(lines) == 5
    meta = json.loads((tmp_path / "v.json").read_text())
    assert meta["scale"] == "fpkm" and len(meta["clusters"]) == 2
