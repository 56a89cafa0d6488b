"""Dataset tooling: near-duplicate removal, statistics, synthetic corpora.

Duplicate detection runs in two stages: exact text matches go first, then
MinHash signatures grouped by a banded LSH index, with candidate pairs
verified against the signature-estimated Jaccard similarity before
removal. Earlier items always win ties, so the whole pipeline is
deterministic and order-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cpg import GraphTooLarge, build_cpg
from .dataio import Sample
from .minilang import AstNode, ParseError, parse_function
from .tokens import fnv1a64, split_tokens

MERSENNE_61 = (1 << 61) - 1

DEFAULT_K = 128
DEFAULT_BANDS = 16
DEFAULT_ROWS = 8
DEFAULT_THRESHOLD = 0.8
DEFAULT_HASH_SEED = 1


class EmptyTokenSet(Exception):
    pass


@dataclass
class MinHasher:
    """A seeded family of k universal hash functions over 64-bit tokens."""

    k: int = DEFAULT_K
    seed: int = DEFAULT_HASH_SEED

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._a = [int(v) for v in rng.integers(1, MERSENNE_61, size=self.k)]
        self._b = [int(v) for v in rng.integers(0, MERSENNE_61, size=self.k)]

    def signature(self, tokens: Iterable[str]) -> np.ndarray:
        xs = [fnv1a64(t) for t in set(tokens)]
        if not xs:
            raise EmptyTokenSet("cannot hash an empty token set")
        sig = np.empty(self.k, dtype=np.uint64)
        for i in range(self.k):
            a, b = self._a[i], self._b[i]
            sig[i] = min((a * x + b) % MERSENNE_61 for x in xs)
        return sig


def minhash(tokens: set[str], k: int = DEFAULT_K, seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    """MinHash signature of a token set: k 64-bit minima."""
    return MinHasher(k=k, seed=seed).signature(tokens)


def estimate_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    if sig_a.shape != sig_b.shape:
        raise ValueError("signatures must have equal length")
    return float((sig_a == sig_b).mean())


def exact_jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


class LshIndex:
    """Banded signature index: b bands of r rows each, b*r = k."""

    def __init__(self, bands: int = DEFAULT_BANDS, rows: int = DEFAULT_ROWS):
        self.bands = bands
        self.rows = rows
        self._buckets: dict[tuple[int, bytes], list[str]] = {}

    def _keys(self, sig: np.ndarray):
        if sig.size != self.bands * self.rows:
            raise ValueError(
                f"signature length {sig.size} != bands*rows {self.bands * self.rows}"
            )
        for band in range(self.bands):
            yield band, sig[band * self.rows:(band + 1) * self.rows].tobytes()

    def insert(self, item_id: str, sig: np.ndarray) -> None:
        for key in self._keys(sig):
            self._buckets.setdefault(key, []).append(item_id)

    def candidates(self, sig: np.ndarray) -> list[str]:
        """Previously inserted ids sharing at least one band, stable order."""
        seen: dict[str, None] = {}
        for key in self._keys(sig):
            for item_id in self._buckets.get(key, ()):
                seen.setdefault(item_id)
        return list(seen)


def _token_set(sample: Sample) -> set[str]:
    return set(split_tokens(sample.code))


def dedup(
    corpus: Sequence[Sample],
    threshold: float = DEFAULT_THRESHOLD,
    k: int = DEFAULT_K,
    bands: int = DEFAULT_BANDS,
    rows: int = DEFAULT_ROWS,
    seed: int = DEFAULT_HASH_SEED,
) -> tuple[list[str], list[dict]]:
    """Remove exact then near-duplicates; the first occurrence survives.

    Returns (retained ids, removed pair records). A record names the
    removed item, the earlier item it matched, the signature-estimated
    Jaccard similarity and the stage that caught it.
    """
    hasher = MinHasher(k=k, seed=seed)
    retained: list[str] = []
    removed: list[dict] = []
    first_by_text: dict[str, str] = {}
    stage2: list[Sample] = []
    for sample in corpus:
        earlier = first_by_text.get(sample.code)
        if earlier is not None:
            removed.append(
                {"removed_id": sample.id, "kept_id": earlier,
                 "estimated_jaccard": 1.0, "stage": "exact"}
            )
            continue
        first_by_text[sample.code] = sample.id
        stage2.append(sample)

    index = LshIndex(bands=bands, rows=rows)
    sigs: dict[str, np.ndarray] = {}
    for sample in stage2:
        tokens = _token_set(sample)
        if not tokens:
            retained.append(sample.id)
            continue
        sig = hasher.signature(tokens)
        hit = None
        best = 0.0
        for cand in index.candidates(sig):
            est = estimate_jaccard(sig, sigs[cand])
            if est > threshold and est > best:
                hit, best = cand, est
        if hit is not None:
            removed.append(
                {"removed_id": sample.id, "kept_id": hit,
                 "estimated_jaccard": best, "stage": "near"}
            )
            continue
        index.insert(sample.id, sig)
        sigs[sample.id] = sig
        retained.append(sample.id)
    return retained, removed


def cross_split_check(
    train: Sequence[Sample],
    valid: Sequence[Sample],
    test: Sequence[Sample],
    threshold: float = DEFAULT_THRESHOLD,
    k: int = DEFAULT_K,
    bands: int = DEFAULT_BANDS,
    rows: int = DEFAULT_ROWS,
    seed: int = DEFAULT_HASH_SEED,
) -> tuple[list[dict], list[Sample], list[Sample]]:
    """Find valid/test items leaking from train; removal hits the non-train split.

    Returns (leak report, cleaned valid, cleaned test). Report entries carry
    kept_split (the non-training split the removed item came from), the
    removed id, the matching training id and the estimated similarity.
    """
    hasher = MinHasher(k=k, seed=seed)
    index = LshIndex(bands=bands, rows=rows)
    train_sigs: dict[str, np.ndarray] = {}
    train_by_text: dict[str, str] = {}
    for sample in train:
        train_by_text.setdefault(sample.code, sample.id)
        tokens = _token_set(sample)
        if tokens:
            sig = hasher.signature(tokens)
            index.insert(sample.id, sig)
            train_sigs[sample.id] = sig

    report: list[dict] = []

    def clean(split_name: str, samples: Sequence[Sample]) -> list[Sample]:
        kept = []
        for sample in samples:
            exact = train_by_text.get(sample.code)
            if exact is not None:
                report.append(
                    {"kept_split": split_name, "removed_id": sample.id,
                     "matched_train_id": exact, "estimated_jaccard": 1.0}
                )
                continue
            tokens = _token_set(sample)
            hit = None
            best = 0.0
            if tokens:
                sig = hasher.signature(tokens)
                for cand in index.candidates(sig):
                    est = estimate_jaccard(sig, train_sigs[cand])
                    if est > threshold and est > best:
                        hit, best = cand, est
            if hit is not None:
                report.append(
                    {"kept_split": split_name, "removed_id": sample.id,
                     "matched_train_id": hit, "estimated_jaccard": best}
                )
                continue
            kept.append(sample)
        return kept

    return report, clean("valid", valid), clean("test", test)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass
class StatsRecord:
    total: int = 0
    avg_nodes: float = 0.0
    avg_edges: float = 0.0
    avg_input_tokens: float = 0.0
    avg_target_tokens: float = 0.0
    max_nodes: int = 0
    max_edges: int = 0
    max_input_tokens: int = 0
    max_target_tokens: int = 0
    skipped: int = 0
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "avg_nodes": self.avg_nodes,
            "avg_edges": self.avg_edges,
            "avg_input_tokens": self.avg_input_tokens,
            "avg_target_tokens": self.avg_target_tokens,
            "max_nodes": self.max_nodes,
            "max_edges": self.max_edges,
            "max_input_tokens": self.max_input_tokens,
            "max_target_tokens": self.max_target_tokens,
            "skipped": self.skipped,
        }


def dataset_stats(samples: Sequence[Sample], node_cap: int = 50) -> StatsRecord:
    """Aggregate graph and token statistics; unextractable samples are
    counted in `skipped` and excluded from the averages."""
    record = StatsRecord()
    if not samples:
        return record
    for sample in samples:
        try:
            cpg = build_cpg(sample.code, max_nodes=node_cap)
        except (ParseError, GraphTooLarge):
            record.skipped += 1
            continue
        record.per_sample.append(
            {
                "id": sample.id,
                "nodes": len(cpg.nodes),
                "edges": len(cpg.edges),
                "input_tokens": len(split_tokens(sample.code)),
                "target_tokens": len(split_tokens(sample.target)),
            }
        )
    rows = record.per_sample
    record.total = len(rows)
    if rows:
        for agg, key in (("nodes", "nodes"), ("edges", "edges"),
                         ("input_tokens", "input_tokens"),
                         ("target_tokens", "target_tokens")):
            values = [r[key] for r in rows]
            setattr(record, f"avg_{agg}", sum(values) / len(values))
            setattr(record, f"max_{agg}", max(values))
    return record


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

FUNC_POOL = ["a", "b", "c", "d", "e"]
VAR_POOL = ["x", "y", "z", "w"]
COMPARE_POOL = ["<", ">", "==", "!="]


def _expr_calls(expr: AstNode) -> list[str]:
    calls = []

    def walk(node: AstNode) -> None:
        if node.kind == "Call":
            calls.append(node.name)
        for c in node.children:
            walk(c)

    walk(expr)
    return calls


def true_path_calls(func: AstNode) -> list[str]:
    """Function names called when every predicate evaluates true.

    Conditionals descend into the then-branch only; loop bodies are walked
    once. This is the rule the synthetic targets are built from.
    """
    out: list[str] = []

    def walk_block(stmts: list[AstNode]) -> None:
        for s in stmts:
            if s.kind == "Assign":
                out.extend(_expr_calls(s.value))
            elif s.kind == "If":
                out.extend(_expr_calls(s.cond))
                walk_block(s.then_body)
            elif s.kind == "While":
                out.extend(_expr_calls(s.cond))
                walk_block(s.body)
            elif s.kind == "Return":
                if s.value is not None:
                    out.extend(_expr_calls(s.value))
            else:
                out.extend(_expr_calls(s))

    walk_block(func.body)
    return out


TARGET_PREFIX = "calls"


def synth_target(func: AstNode) -> str:
    """Summary string for a function: the true-branch call sequence."""
    return " ".join([TARGET_PREFIX] + true_path_calls(func))


def synth_corpus(n: int, seed: int) -> list[Sample]:
    """n small programs whose target summarizes the true-branch calls.

    Every program parses. The conditional's then-branch calls one function
    a few times; else-branch calls (present half the time) appear in the
    code but never in the target, so the branch structure is what makes
    the target predictable.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)

    def pick(pool):
        return pool[int(rng.integers(0, len(pool)))]

    samples = []
    for i in range(n):
        lines = ["def main():"]
        cond_var = pick(VAR_POOL)
        lines.append(f"    {cond_var} = {int(rng.integers(0, 10))}")
        if rng.random() < 0.2:
            lines.append(f"    {pick(VAR_POOL)} = {pick(FUNC_POOL)}()")
        lines.append(
            f"    if {cond_var} {pick(COMPARE_POOL)} {int(rng.integers(0, 10))}:"
        )
        branch_fn = pick(FUNC_POOL)
        for _ in range(int(rng.integers(2, 5))):
            lines.append(f"        {branch_fn}()")
        if rng.random() < 0.5:
            other = pick([f for f in FUNC_POOL if f != branch_fn])
            lines.append("    else:")
            for _ in range(int(rng.integers(1, 4))):
                lines.append(f"        {other}()")
        if rng.random() < 0.15:
            lines.append(f"    {pick(FUNC_POOL)}()")
        code = "\n".join(lines) + "\n"
        target = synth_target(parse_function(code))
        samples.append(Sample(id=f"synth-{i:05d}", code=code, target=target))
    return samples
