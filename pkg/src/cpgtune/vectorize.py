"""Node-label vectorization: graph nodes to the initial feature matrix.

Labels are hashed into d_init buckets (FNV-1a mod d_init) and encoded as
binary presence vectors, L2-normalized tf-idf vectors, or rows looked up
from an external embedding table. The adjacency used downstream merges
every edge family into one undirected neighbor structure with self-loops.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .cpg import Cpg
from .numerics import Matrix
from .tokens import fnv1a64, split_tokens

MODES = ("binary", "tfidf", "external")

DEFAULT_D_INIT = 1024


class EmptyCorpus(Exception):
    pass


class UnknownLabel(KeyError):
    pass


@dataclass
class VectorizerModel:
    mode: str
    d_init: int = DEFAULT_D_INIT
    doc_count: int = 0
    idf: dict[str, float] = field(default_factory=dict)
    vocabulary: dict[str, int] = field(default_factory=dict)
    external_table: dict[str, list[float]] | None = None

    def bucket(self, token: str) -> int:
        b = self.vocabulary.get(token)
        if b is None:
            b = fnv1a64(token) % self.d_init
            self.vocabulary[token] = b
        return b

    def default_idf(self) -> float:
        return math.log((1 + self.doc_count) / 1.0) + 1.0

    def to_dict(self) -> dict:
        state = {"mode": self.mode, "d_init": self.d_init, "doc_count": self.doc_count}
        if self.mode == "tfidf":
            state["idf"] = dict(sorted(self.idf.items()))
        return state

    @classmethod
    def from_dict(cls, state: dict) -> "VectorizerModel":
        model = cls(mode=state["mode"], d_init=int(state["d_init"]),
                    doc_count=int(state.get("doc_count", 0)))
        model.idf = dict(state.get("idf", {}))
        return model


@dataclass
class GraphTensors:
    """Initial node features plus the merged undirected adjacency."""

    h_init: Matrix
    adjacency: list[list[int]]
    node_count: int


def fit(labels: Iterable[str], mode: str = "binary", d_init: int = DEFAULT_D_INIT) -> VectorizerModel:
    """Build a vectorizer from a corpus of node labels.

    Binary mode carries no state beyond d_init. Tf-idf mode computes
    idf(t) = ln((1 + D) / (1 + df(t))) + 1 over the label corpus.
    """
    if mode not in ("binary", "tfidf"):
        raise ValueError(f"fit supports binary/tfidf, got {mode!r}")
    model = VectorizerModel(mode=mode, d_init=d_init)
    if mode == "binary":
        return model
    labels = list(labels)
    if not labels:
        raise EmptyCorpus("tfidf fitting needs a non-empty label corpus")
    df: Counter[str] = Counter()
    for label in labels:
        df.update(set(split_tokens(label)))
    d = len(labels)
    model.doc_count = d
    model.idf = {tok: math.log((1 + d) / (1 + count)) + 1.0 for tok, count in df.items()}
    for tok in model.idf:
        model.bucket(tok)
    return model


def external_model(table: dict[str, list[float]], dim: int) -> VectorizerModel:
    for label, vec in table.items():
        if len(vec) != dim:
            raise ValueError(f"embedding for {label!r} has length {len(vec)}, expected {dim}")
    model = VectorizerModel(mode="external", d_init=dim)
    model.external_table = table
    return model


def load_external_table(text: str) -> VectorizerModel:
    """Parse the {"dim": int, "vectors": {label: [floats]}} table format."""
    doc = json.loads(text)
    if not isinstance(doc, dict) or "dim" not in doc or "vectors" not in doc:
        raise ValueError("embedding table must contain 'dim' and 'vectors'")
    return external_model(doc["vectors"], int(doc["dim"]))


def vectorize_label(model: VectorizerModel, label: str) -> np.ndarray:
    if not label:
        raise ValueError("label must be non-empty")
    if model.mode == "external":
        table = model.external_table or {}
        if label not in table:
            raise UnknownLabel(label)
        return np.asarray(table[label], dtype=np.float64).copy()
    tokens = split_tokens(label)
    if not tokens:
        raise ValueError(f"label {label!r} has no tokens")
    vec = np.zeros(model.d_init)
    if model.mode == "binary":
        for tok in set(tokens):
            vec[model.bucket(tok)] = 1.0
        return vec
    for tok, tf in Counter(tokens).items():
        weight = model.idf.get(tok, model.default_idf())
        vec[model.bucket(tok)] += tf * weight
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def vectorize_graph(model: VectorizerModel, cpg: Cpg) -> GraphTensors:
    """Row i of h_init encodes node i's label; adjacency is undirected
    over all edge kinds, de-duplicated, with a self-loop on every node."""
    n = len(cpg.nodes)
    h = np.zeros((n, model.d_init))
    for node in cpg.nodes:
        h[node.id] = vectorize_label(model, node.label)
    neighbors: list[set[int]] = [{i} for i in range(n)]
    for e in cpg.edges:
        neighbors[e.src].add(e.dst)
        neighbors[e.dst].add(e.src)
    adjacency = [sorted(ns) for ns in neighbors]
    return GraphTensors(h_init=Matrix._wrap(h, False), adjacency=adjacency, node_count=n)
