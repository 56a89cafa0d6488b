"""A small deterministic encoder-decoder that stands in for a large model.

One pre-norm self-attention + feed-forward encoder block, one decoder
block (causal self-attention, cross-attention, feed-forward), sinusoidal
positions, and an output head tied to the embedding matrix. All tensors
are derived from (seed, dims) and registered frozen unless the model is
built trainable for full fine-tuning.

Attention query/key projections optionally accept low-rank deltas so that
LoRA-style adapters can be trained without touching the frozen weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Matrix, ParamStore
from .tokens import split_tokens

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

MAX_CONTEXT = 400

# Attention sites that accept low-rank query/key deltas.
LORA_SITES = ("enc_self", "dec_self", "dec_cross")


class ContextTooLong(Exception):
    pass


class EmptyTarget(Exception):
    pass


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @classmethod
    def build(cls, texts) -> "Vocab":
        seen = set()
        for text in texts:
            seen.update(split_tokens(text))
        id_to_token = list(SPECIALS) + sorted(seen)
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in split_tokens(text)]

    def decode(self, ids) -> str:
        return " ".join(
            self.id_to_token[i] for i in ids if i not in (PAD, BOS, EOS)
        )


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    # Scaled so a position row and an embedding row (entries ~ 1/sqrt(dim))
    # carry comparable weight in the residual stream.
    return table / math.sqrt(dim)


class Backbone:
    """Frozen-by-default toy seq2seq model over a fixed vocabulary."""

    def __init__(self, vocab_size: int, d_model: int, seed: int = 0,
                 trainable: bool = False, max_context: int = MAX_CONTEXT):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.seed = seed
        self.max_context = max_context
        self.d_ff = 2 * d_model
        self.params = ParamStore()
        self._positions = sinusoid_table(max_context, d_model)
        rng = np.random.default_rng(seed)
        frozen = not trainable

        def add(name: str, values: np.ndarray) -> None:
            self.params.add(name, Matrix._wrap(values, requires_grad=trainable),
                            frozen=frozen)

        def xavier(rows: int, cols: int) -> np.ndarray:
            limit = math.sqrt(6.0 / (rows + cols))
            return rng.uniform(-limit, limit, size=(rows, cols))

        # Content-carrying projections (values, output maps) are identity
        # plus a random perturbation, so token content survives the frozen
        # blocks the way it does in a pretrained model; query/key maps stay
        # fully random, feed-forward layers are a small perturbation on top
        # of the residual path.
        def near_identity(scale: float = 0.25) -> np.ndarray:
            return np.eye(d_model) + scale * xavier(d_model, d_model)

        add("E", rng.normal(0.0, 1.0 / math.sqrt(d_model), size=(vocab_size, d_model)))
        for block, names in (("enc", ("Wq", "Wk", "Wv", "Wo")),
                             ("dec", ("Wq", "Wk", "Wv", "Wo")),
                             ("dec", ("Cq", "Ck", "Cv", "Co"))):
            for n in names:
                if n in ("Wv", "Wo", "Cv", "Co"):
                    add(f"{block}.{n}", near_identity())
                else:
                    add(f"{block}.{n}", xavier(d_model, d_model))
        add("enc.W1", 0.5 * xavier(d_model, self.d_ff))
        add("enc.W2", 0.5 * xavier(self.d_ff, d_model))
        add("dec.W1", 0.5 * xavier(d_model, self.d_ff))
        add("dec.W2", 0.5 * xavier(self.d_ff, d_model))
        for gain in ("enc.g1", "enc.g2", "dec.g1", "dec.g2", "dec.g3", "g_out"):
            add(gain, np.ones((1, d_model)))

    # -- embeddings --------------------------------------------------------

    def embed(self, ids: list[int]) -> Matrix:
        """Token embeddings plus fixed sinusoidal positions."""
        if not ids:
            raise nm.EmptyInput("cannot embed an empty id sequence")
        if len(ids) > self.max_context:
            raise ContextTooLong(f"{len(ids)} tokens exceeds context {self.max_context}")
        rows = nm.gather_rows(self.params["E"], ids)
        pos = Matrix._wrap(self._positions[: len(ids)].copy(), False)
        return nm.add(rows, pos)

    # -- attention ---------------------------------------------------------

    def _project(self, x: Matrix, name: str, lora, site: str, which: str) -> Matrix:
        out = nm.matmul(x, self.params[name])
        if lora:
            delta = lora.get((site, which))
            if delta is not None:
                a, b = delta
                out = nm.add(out, nm.matmul(nm.matmul(x, a), b))
        return out

    def _ffn(self, x: Matrix, prefix: str) -> Matrix:
        hidden = nm.leaky_relu(nm.matmul(x, self.params[f"{prefix}.W1"]), 0.0)
        return nm.matmul(hidden, self.params[f"{prefix}.W2"])

    # -- encoder / decoder -------------------------------------------------

    def encode(self, c_final: Matrix, lora=None) -> Matrix:
        if c_final.cols != self.d_model:
            raise nm.ShapeMismatch(f"expected width {self.d_model}, got {c_final.cols}")
        a = nm.rms_norm(c_final, self.params["enc.g1"])
        x = nm.add(c_final, self._attn_block(a, a, "enc", ("Wq", "Wk", "Wv", "Wo"),
                                             lora, "enc_self", causal=False))
        h = nm.rms_norm(x, self.params["enc.g2"])
        return nm.add(x, self._ffn(h, "enc"))

    def _attn_block(self, q_in: Matrix, kv_in: Matrix, prefix: str, names, lora,
                    site: str, causal: bool) -> Matrix:
        wq, wk, wv, wo = names
        q = self._project(q_in, f"{prefix}.{wq}", lora, site, "q")
        k = self._project(kv_in, f"{prefix}.{wk}", lora, site, "k")
        v = nm.matmul(kv_in, self.params[f"{prefix}.{wv}"])
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(self.d_model))
        if causal:
            n = q_in.rows
            mask = np.triu(np.full((n, n), -1e30), k=1)
            scores = nm.add(scores, Matrix._wrap(mask, False))
        ctx = nm.matmul(nm.softmax_rows(scores), v)
        return nm.matmul(ctx, self.params[f"{prefix}.{wo}"])

    def _decoder_hidden(self, memory: Matrix, input_ids: list[int], lora=None) -> Matrix:
        t = self.embed(input_ids)
        a = nm.rms_norm(t, self.params["dec.g1"])
        x = nm.add(t, self._attn_block(a, a, "dec", ("Wq", "Wk", "Wv", "Wo"),
                                       lora, "dec_self", causal=True))
        b = nm.rms_norm(x, self.params["dec.g2"])
        x = nm.add(x, self._attn_block(b, memory, "dec", ("Cq", "Ck", "Cv", "Co"),
                                       lora, "dec_cross", causal=False))
        c = nm.rms_norm(x, self.params["dec.g3"])
        x = nm.add(x, self._ffn(c, "dec"))
        return nm.rms_norm(x, self.params["g_out"])

    def logits(self, memory: Matrix, input_ids: list[int], lora=None) -> Matrix:
        hidden = self._decoder_hidden(memory, input_ids, lora)
        return nm.matmul(hidden, nm.transpose(self.params["E"]))

    def decode_loss(self, memory: Matrix, target_ids: list[int], lora=None) -> Matrix:
        """Mean next-token cross-entropy under teacher forcing.

        The target must be non-empty and end with EOS; the decoder input is
        the BOS-shifted target.
        """
        if not target_ids:
            raise EmptyTarget("target id sequence is empty")
        if target_ids[-1] != EOS:
            raise EmptyTarget("target must end with EOS")
        input_ids = [BOS] + list(target_ids[:-1])
        return nm.cross_entropy_rows(self.logits(memory, input_ids, lora), target_ids)

    # -- generation --------------------------------------------------------

    def generate(self, memory: Matrix, max_len: int, beam: int = 4, lora=None) -> list[int]:
        """Beam-search decode (greedy when beam=1); returns generated ids
        without BOS/EOS."""

        def step_fn(prefix: list[int]) -> np.ndarray:
            with nm.no_grad():
                logits = self.logits(memory, [BOS] + prefix, lora).values[-1]
            shifted = logits - logits.max()
            return shifted - math.log(np.exp(shifted).sum())

        seq = beam_search(step_fn, EOS, max_len, beam)
        return [t for t in seq if t != EOS]


def beam_search(step_fn, eos_id: int, max_len: int, beam: int) -> list[int]:
    """Length-normalized beam search with early stopping on EOS.

    step_fn maps a generated-prefix id list to a log-probability vector
    over the vocabulary. Ties break toward lexicographically smaller id
    sequences, which makes decoding fully deterministic. The greedy
    rollout is always part of the final pool, so a wider beam can never
    return a sequence with a worse normalized score than greedy decoding.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        candidates: list[tuple[float, list[int]]] = []
        for seq, logp in live:
            logprobs = step_fn(seq)
            top = np.argsort(logprobs, kind="stable")[::-1][: beam + 1]
            for tok in top:
                tok = int(tok)
                candidates.append((logp + float(logprobs[tok]), seq + [tok]))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in candidates:
            if len(live) >= beam:
                break
            if seq[-1] == eos_id:
                finished.append((seq, score))
            else:
                live.append((seq, score))
        if len(finished) >= beam or not live:
            break
    pool = finished + live
    if beam > 1:
        greedy = beam_search(step_fn, eos_id, max_len, 1)
        if greedy and greedy not in [seq for seq, _ in pool]:
            logp = 0.0
            for i, tok in enumerate(greedy):
                logp += float(step_fn(greedy[:i])[tok])
            pool.append((greedy, logp))
    if not pool:
        return []
    pool.sort(key=lambda item: (-item[1] / len(item[0]), item[0]))
    return pool[0][0]
