import json
import math

import numpy as np
import pytest

from cpgtune.cpg import build_cpg
from cpgtune.tokens import fnv1a64, split_tokens
from cpgtune.vectorize import (
    EmptyCorpus,
    UnknownLabel,
    external_model,
    fit,
    load_external_table,
    vectorize_graph,
    vectorize_label,
)


def test_split_tokens():
    assert split_tokens("x = a ( )") == ["x", "=", "a", "(", ")"]
    assert split_tokens("Foo(bar1, baz)") == ["foo", "(", "bar1", ",", "baz", ")"]
    assert split_tokens("") == []


def test_fnv1a64_known_values():
    # Reference values for the 64-bit FNV-1a parameters.
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_idf_formula():
    model = fit(["x = 1", "x = 2"], mode="tfidf", d_init=64)
    # token "x" appears in both of the two labels
    assert model.idf["x"] == pytest.approx(math.log(3 / 3) + 1.0)
    # "1" appears once
    assert model.idf["1"] == pytest.approx(math.log(3 / 2) + 1.0)


def test_tfidf_requires_corpus():
    with pytest.raises(EmptyCorpus):
        fit([], mode="tfidf")


def test_binary_fit_is_stateless():
    model = fit([], mode="binary", d_init=32)
    assert model.idf == {}
    assert model.d_init == 32


def test_binary_label_sets_token_buckets():
    model = fit([], mode="binary", d_init=4096)
    vec = vectorize_label(model, "x = a ( )")
    buckets = {fnv1a64(t) % 4096 for t in ["x", "=", "a", "(", ")"]}
    assert len(buckets) == 5  # distinct at this width
    assert vec.sum() == 5.0
    assert set(np.nonzero(vec)[0]) == buckets
    assert set(np.unique(vec)) <= {0.0, 1.0}


def test_vectorize_deterministic():
    model = fit([], mode="binary", d_init=64)
    a = vectorize_label(model, "y = f(x)")
    b = vectorize_label(model, "y = f(x)")
    assert np.array_equal(a, b)


def test_tfidf_unit_norm():
    labels = ["x = a()", "y = b(x)", "x > 10"]
    model = fit(labels, mode="tfidf", d_init=128)
    for label in labels + ["z = unseen(x)"]:
        vec = vectorize_label(model, label)
        assert abs(np.linalg.norm(vec) - 1.0) <= 1e-9


def test_empty_label_rejected():
    model = fit([], mode="binary")
    with pytest.raises(ValueError):
        vectorize_label(model, "")


def test_external_lookup_and_missing():
    model = external_model({"ENTRY": [1.0, 0.0], "EXIT": [0.0, 1.0]}, dim=2)
    assert vectorize_label(model, "ENTRY").tolist() == [1.0, 0.0]
    with pytest.raises(UnknownLabel):
        vectorize_label(model, "missing")


def test_external_table_file_format():
    text = json.dumps({"dim": 3, "vectors": {"a": [1, 2, 3]}})
    model = load_external_table(text)
    assert model.d_init == 3
    with pytest.raises(ValueError):
        load_external_table(json.dumps({"dim": 2, "vectors": {"a": [1, 2, 3]}}))


def test_vectorize_graph_listing1(listing1):
    model = fit([], mode="binary", d_init=256)
    gt = vectorize_graph(model, build_cpg(listing1))
    assert gt.node_count == 6
    assert gt.h_init.shape == (6, 256)
    # self-loops everywhere, symmetric neighbor structure
    for i, ns in enumerate(gt.adjacency):
        assert i in ns
        for j in ns:
            assert i in gt.adjacency[j]


def test_single_node_graph():
    from cpgtune.cpg import Cpg, CpgNode

    cpg = Cpg("f", [CpgNode(0, "ENTRY", "ENTRY")], [])
    model = fit([], mode="binary", d_init=16)
    gt = vectorize_graph(model, cpg)
    assert gt.adjacency == [[0]]
    assert gt.h_init.shape == (1, 16)


def test_duplicate_edges_deduplicated():
    from cpgtune.cpg import Cpg, CpgEdge, CpgNode

    nodes = [CpgNode(0, "ENTRY", "ENTRY"), CpgNode(1, "EXIT", "EXIT")]
    edges = [CpgEdge(0, 1, "CFG"), CpgEdge(0, 1, "AST"), CpgEdge(1, 0, "DDG", "x")]
    gt = vectorize_graph(fit([], mode="binary", d_init=8), Cpg("f", nodes, edges))
    assert gt.adjacency == [[0, 1], [0, 1]]


def test_graph_tensors_bit_identical_across_runs(listing1):
    model = fit([], mode="binary", d_init=128)
    a = vectorize_graph(model, build_cpg(listing1))
    b = vectorize_graph(model, build_cpg(listing1))
    assert a.h_init.values.tobytes() == b.h_init.values.tobytes()
    assert a.adjacency == b.adjacency
