"""The trainable transducer: graph processing layer plus attention fusion.

The graph side normalizes the initial node features (RMS with a learnable
gain), projects them down to d_down, runs one single-head GATv2 pass over
the merged adjacency, projects up to d_up and mean-pools into one graph
feature vector G. The fusion side RMS-normalizes token embeddings and G,
forms Q/V from the tokens and K from G, scores tokens against the single
key, and adds the projected, attention-scaled values back onto the token
embeddings.

The final projection (and the up projection in sum fusion) start at zero,
so an untrained transducer is an exact no-op on the backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .cpg import DEFAULT_MAX_NODES, build_cpg
from .numerics import Matrix, ParamStore
from .vectorize import GraphTensors, VectorizerModel, vectorize_graph

FUSIONS = ("abfl", "sum")
SOFTMAX_AXES = ("tokens", "keys")


@dataclass
class TransducerConfig:
    d_backbone: int
    d_init: int = 1024
    d_down: int = 8
    d_up: int = 128
    d_abf: int = 8
    leaky_slope: float = 0.2
    fusion: str = "abfl"
    softmax_axis: str = "tokens"
    residual: bool = True

    def __post_init__(self):
        for name in ("d_backbone", "d_init", "d_down", "d_up", "d_abf"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.softmax_axis not in SOFTMAX_AXES:
            raise ValueError(f"softmax_axis must be one of {SOFTMAX_AXES}")
        if self.fusion == "sum" and self.d_up != self.d_backbone:
            raise ValueError("sum fusion requires d_up == d_backbone")


# (name, rows, cols) in registration order; gains are 1 x n row vectors.
def _param_shapes(cfg: TransducerConfig) -> list[tuple[str, int, int]]:
    return [
        ("g_gve", 1, cfg.d_init),
        ("W_down", cfg.d_init, cfg.d_down),
        ("gat.W_l", cfg.d_down, cfg.d_down),
        ("gat.W_r", cfg.d_down, cfg.d_down),
        ("gat.a", cfg.d_down, 1),
        ("gat.b", 1, cfg.d_down),
        ("gat.b_out", 1, cfg.d_down),
        ("W_up", cfg.d_down, cfg.d_up),
        ("g_C", 1, cfg.d_backbone),
        ("g_G", 1, cfg.d_up),
        ("W_Q", cfg.d_backbone, cfg.d_abf),
        ("W_K", cfg.d_up, cfg.d_abf),
        ("W_V", cfg.d_backbone, cfg.d_abf),
        ("W_final", cfg.d_abf, cfg.d_backbone),
    ]

GVE_PARAMS = ("g_gve", "W_down", "gat.W_l", "gat.W_r", "gat.a", "gat.b", "gat.b_out", "W_up")
ABFL_PARAMS = ("g_C", "g_G", "W_Q", "W_K", "W_V", "W_final")


def count_trainable(cfg: TransducerConfig) -> int:
    """Exact number of trainable scalars in the full transducer."""
    return sum(r * c for _, r, c in _param_shapes(cfg))


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_params(cfg: TransducerConfig, seed: int, variant: str = "full") -> ParamStore:
    """Seeded parameter initialization.

    Gains start at one and the final projection starts at zero, so the
    fused embeddings equal the raw ones until training moves them; the
    remaining weights are Xavier-uniform. Under sum fusion the up
    projection is also zero, which is what makes that variant a no-op at
    start; under attention fusion it is Xavier instead, because a zero up
    projection pins the graph feature at the RMS-normalization
    singularity (gradients of order 1/sqrt(eps)) and stalls the
    graph-attention coupling, while identity-at-init is already
    guaranteed by the zero final projection. `variant` selects the
    subset: "full" (graph side + fusion side), "gve" (graph side only,
    for sum fusion) or "abfl" (fusion side fed by a trainable free
    vector).
    """
    if variant not in ("full", "gve", "abfl"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    wanted: tuple[str, ...]
    if variant == "full":
        wanted = GVE_PARAMS + ABFL_PARAMS
    elif variant == "gve":
        wanted = GVE_PARAMS
    else:
        wanted = ("free_G",) + ABFL_PARAMS
    zero_init = {"W_final"}
    if cfg.fusion == "sum":
        zero_init.add("W_up")
    shapes = {name: (r, c) for name, r, c in _param_shapes(cfg)}
    shapes["free_G"] = (1, cfg.d_up)
    for name in wanted:
        rows, cols = shapes[name]
        if name.startswith("g_"):
            values = np.ones((rows, cols))
        elif name in zero_init:
            values = np.zeros((rows, cols))
        else:
            values = _xavier(rng, rows, cols)
        store.add(name, Matrix._wrap(values, requires_grad=True))
    return store


def gatv2_forward(h: Matrix, adjacency: list[list[int]], params: ParamStore,
                  slope: float = 0.2, attention_out: list | None = None) -> Matrix:
    """One GATv2 message-passing step over per-node neighbor lists.

    For node i with neighborhood N(i) (self-loop included):
        e_ij   = a . leaky_relu(W_l h_i + W_r h_j + b)
        alpha  = softmax_j(e_ij)
        h'_i   = sum_j alpha_ij (W_r h_j) + b_out

    When attention_out is a list, one (neighbors, weights) pair per node
    is appended to it.
    """
    if len(adjacency) != h.rows:
        raise nm.ShapeMismatch("one neighbor list per node required")
    hl = nm.matmul(h, params["gat.W_l"])
    hr = nm.matmul(h, params["gat.W_r"])
    rows = []
    for i, neighbors in enumerate(adjacency):
        if not neighbors:
            raise nm.ShapeMismatch(f"node {i} has no neighbors (missing self-loop)")
        hr_nb = nm.gather_rows(hr, neighbors)
        hl_i = nm.gather_rows(hl, [i])
        pre = nm.add_rowvec(nm.add_rowvec(hr_nb, hl_i), params["gat.b"])
        scores = nm.matmul(nm.leaky_relu(pre, slope), params["gat.a"])
        alpha = nm.softmax_rows(nm.transpose(scores))
        if attention_out is not None:
            attention_out.append((list(neighbors), alpha.values[0].copy()))
        pooled = nm.matmul(alpha, hr_nb)
        rows.append(nm.add_rowvec(pooled, params["gat.b_out"]))
    return nm.concat_rows(rows)


def gve_forward(gt: GraphTensors, params: ParamStore, cfg: TransducerConfig) -> Matrix:
    """Graph feature vector G (1 x d_up) from the initial node features."""
    h_norm = nm.rms_norm(gt.h_init, params["g_gve"])
    h_down = nm.matmul(h_norm, params["W_down"])
    h_feat = gatv2_forward(h_down, gt.adjacency, params, cfg.leaky_slope)
    h_up = nm.matmul(h_feat, params["W_up"])
    return nm.mean_pool_rows(h_up)


def abfl_forward(c_init: Matrix, g_vec: Matrix, params: ParamStore,
                 cfg: TransducerConfig) -> Matrix:
    """Fuse the graph feature vector into the token embeddings.

    Scores come from Q (per token) against the single pooled key K; with
    softmax over tokens the graph steers how much each token's value row
    contributes, and the scaled values are projected back to d_backbone.
    With softmax over the key axis the single key makes every weight one.
    """
    if g_vec.rows != 1 or g_vec.cols != cfg.d_up:
        raise nm.ShapeMismatch(f"graph feature must be 1x{cfg.d_up}, got {g_vec.shape}")
    c_norm = nm.rms_norm(c_init, params["g_C"])
    g_norm = nm.rms_norm(g_vec, params["g_G"])
    q = nm.matmul(c_norm, params["W_Q"])
    k = nm.matmul(g_norm, params["W_K"])
    v = nm.matmul(c_norm, params["W_V"])
    scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(cfg.d_abf))
    if cfg.softmax_axis == "tokens":
        alpha = nm.transpose(nm.softmax_rows(nm.transpose(scores)))
    else:
        alpha = nm.softmax_rows(scores)
    fused = nm.matmul(nm.mul_colvec(v, alpha), params["W_final"])
    if cfg.residual:
        fused = nm.add(fused, c_init)
    return fused


def sum_fusion(c_init: Matrix, g_vec: Matrix) -> Matrix:
    """Add the graph feature vector onto every token embedding."""
    if g_vec.cols != c_init.cols:
        raise nm.ShapeMismatch("sum fusion needs d_up == d_backbone")
    return nm.add(c_init, nm.gather_rows(g_vec, [0] * c_init.rows))


def transduce(code: str, c_init: Matrix, params: ParamStore, cfg: TransducerConfig,
              vectorizer: VectorizerModel, max_nodes: int = DEFAULT_MAX_NODES) -> Matrix:
    """Code text + token embeddings -> fused embeddings.

    Parse and graph-construction errors surface to the caller so that
    training and evaluation can skip such samples.
    """
    cpg = build_cpg(code, max_nodes=max_nodes)
    gt = vectorize_graph(vectorizer, cpg)
    g_vec = gve_forward(gt, params, cfg)
    if cfg.fusion == "sum":
        return sum_fusion(c_init, g_vec)
    return abfl_forward(c_init, g_vec, params, cfg)
