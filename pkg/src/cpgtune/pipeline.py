"""Training, evaluation, checkpointing and the adaptation-mode registry.

Every mode routes through the same per-sample forward: embed the code,
adapt the embeddings (identity, linear map, soft prompts, low-rank
attention deltas, or the graph transducer variants), encode, then either
score the target under teacher forcing or beam-decode. Only the
mode-owned parameters ever receive optimizer updates; the backbone is
reconstructed from its seed and stays frozen except under full
fine-tuning.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import transducer as td
from .backbone import EOS, LORA_SITES, Backbone, ContextTooLong, Vocab
from .cpg import GraphTooLarge, build_cpg
from .dataio import Sample, write_text_atomic
from .metrics import smoothed_bleu
from .minilang import ParseError
from .numerics import Matrix, OptimState, ParamStore
from .tokens import split_tokens
from .vectorize import VectorizerModel, fit as fit_vectorizer, vectorize_graph

MODES = (
    "none",
    "full_ft",
    "linear_adapter",
    "lora",
    "prompt_tuning",
    "transducer",
    "gve_only",
    "abfl_only",
)
GRAPH_MODES = ("transducer", "gve_only")
LORA_RANKS = (4, 8)
PROMPT_LENGTHS = (0, 5, 10, 25, 50)

CHECKPOINT_VERSION = 1


class EmptyDataset(Exception):
    pass


class AllSamplesSkipped(Exception):
    pass


class DimMismatch(Exception):
    pass


class VersionMismatch(Exception):
    pass


class SchemaError(Exception):
    pass


@dataclass
class TrainConfig:
    mode: str = "transducer"
    epochs: int = 1
    batch_size: int = 8
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    seed: int = 8
    eval_batch: int = 32
    weight_decay: float = 0.01
    lora_r: int = 8
    prompt_len: int = 25
    d_backbone: int = 64
    d_init: int = 1024
    d_down: int = 8
    d_up: int = 128
    d_abf: int = 8
    softmax_axis: str = "tokens"
    residual: bool = True
    leaky_slope: float = 0.2
    vectorizer_mode: str = "binary"
    node_cap: int = 50
    max_context: int = 400
    backbone_seed: int = 0
    beam: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "lora" and self.lora_r not in LORA_RANKS:
            raise ValueError(f"lora_r must be one of {LORA_RANKS}")
        if self.mode == "prompt_tuning" and self.prompt_len not in PROMPT_LENGTHS:
            raise ValueError(f"prompt_len must be one of {PROMPT_LENGTHS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def effective_d_up(self) -> int:
        # Sum fusion adds G directly onto the embeddings.
        return self.d_backbone if self.mode == "gve_only" else self.d_up

    def transducer_config(self) -> td.TransducerConfig:
        return td.TransducerConfig(
            d_backbone=self.d_backbone,
            d_init=self.d_init,
            d_down=self.d_down,
            d_up=self.effective_d_up(),
            d_abf=self.d_abf,
            leaky_slope=self.leaky_slope,
            fusion="sum" if self.mode == "gve_only" else "abfl",
            softmax_axis=self.softmax_axis,
            residual=self.residual,
        )


@dataclass
class RunReport:
    mode: str
    trainable_param_count: int
    metric_name: str
    metric_value: float
    seed: int
    wall_time: float
    skipped: int = 0
    steps: int = 0
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "trainable_param_count": self.trainable_param_count,
            "metric": {"name": self.metric_name, "value": self.metric_value},
            "seed": self.seed,
            "wall_time": self.wall_time,
            "skipped": self.skipped,
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class Checkpoint:
    mode: str
    config: dict
    seed: int
    params: dict[str, np.ndarray]
    format_version: int = CHECKPOINT_VERSION

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "mode": self.mode,
            "config": self.config,
            "seed": self.seed,
            "params": {name: arr.tolist() for name, arr in self.params.items()},
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid checkpoint JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise SchemaError("checkpoint must be a JSON object")
        if "format_version" not in doc:
            raise SchemaError("missing format_version")
        version = doc["format_version"]
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"format_version {version!r}, expected {CHECKPOINT_VERSION}")
        for key, typ in (("mode", str), ("config", dict), ("seed", int), ("params", dict)):
            if key not in doc or not isinstance(doc[key], typ):
                raise SchemaError(f"missing or invalid {key!r}")
        if doc["mode"] not in MODES:
            raise SchemaError(f"unknown mode {doc['mode']!r}")
        params = {}
        for name, rows in doc["params"].items():
            try:
                arr = np.array(rows, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"params[{name!r}] is not a float matrix") from exc
            if arr.ndim != 2:
                raise SchemaError(f"params[{name!r}] must be 2-D")
            params[name] = arr
        return cls(doc["mode"], doc["config"], doc["seed"], params)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    write_text_atomic(path, ckpt.to_json())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Parameter construction per mode
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def adapter_shapes(cfg: TrainConfig) -> dict[str, tuple[int, int]]:
    """Expected (rows, cols) of every mode-owned tensor."""
    d = cfg.d_backbone
    mode = cfg.mode
    if mode in ("none", "full_ft"):
        return {}
    if mode == "linear_adapter":
        return {"W_A": (d, d)}
    if mode == "lora":
        shapes = {}
        for site in LORA_SITES:
            for proj in ("q", "k"):
                shapes[f"lora.{site}.A_{proj}"] = (d, cfg.lora_r)
                shapes[f"lora.{site}.B_{proj}"] = (cfg.lora_r, d)
        return shapes
    if mode == "prompt_tuning":
        return {"P": (cfg.prompt_len, d)} if cfg.prompt_len > 0 else {}
    tcfg = cfg.transducer_config()
    base = {name: (r, c) for name, r, c in td._param_shapes(tcfg)}
    if mode == "transducer":
        return {name: base[name] for name in td.GVE_PARAMS + td.ABFL_PARAMS}
    if mode == "gve_only":
        return {name: base[name] for name in td.GVE_PARAMS}
    if mode == "abfl_only":
        shapes = {"free_G": (1, tcfg.d_up)}
        shapes.update({name: base[name] for name in td.ABFL_PARAMS})
        return shapes
    raise ValueError(f"unknown mode {mode!r}")


def init_adapter_params(cfg: TrainConfig) -> ParamStore:
    """Seeded, mode-owned parameters; every mode starts as an exact no-op
    except prompt tuning with a positive soft-prompt length."""
    mode = cfg.mode
    if mode == "transducer":
        return td.init_params(cfg.transducer_config(), cfg.seed, variant="full")
    if mode == "gve_only":
        return td.init_params(cfg.transducer_config(), cfg.seed, variant="gve")
    if mode == "abfl_only":
        return td.init_params(cfg.transducer_config(), cfg.seed, variant="abfl")
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    d = cfg.d_backbone
    if mode == "linear_adapter":
        store.add("W_A", Matrix._wrap(np.eye(d), requires_grad=True))
    elif mode == "lora":
        for name, (rows, cols) in adapter_shapes(cfg).items():
            if ".A_" in name:
                values = _xavier(rng, rows, cols)
            else:
                values = np.zeros((rows, cols))
            store.add(name, Matrix._wrap(values, requires_grad=True))
    elif mode == "prompt_tuning" and cfg.prompt_len > 0:
        values = rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.prompt_len, d))
        store.add("P", Matrix._wrap(values, requires_grad=True))
    return store


def mode_param_count(mode: str, cfg: TrainConfig, vocab_size: int) -> int:
    """Trainable scalars a mode owns, from shapes alone."""
    if mode == "none":
        return 0
    if mode == "full_ft":
        d = cfg.d_backbone
        return vocab_size * d + 20 * d * d + 6 * d
    sized = TrainConfig(**{**asdict(cfg), "mode": mode})
    return sum(r * c for r, c in adapter_shapes(sized).values())


def param_report(cfg: TrainConfig, vocab_size: int) -> list[dict]:
    """Per-mode trainable parameter counts under one dimension config."""
    rows = []
    for mode in MODES:
        count = mode_param_count(mode, cfg, vocab_size)
        rows.append({"mode": mode, "trainable_params": count,
                     "thousands": f"{count / 1000:.1f}K"})
    return rows


# ---------------------------------------------------------------------------
# The adapted model: one backbone plus one mode's parameters
# ---------------------------------------------------------------------------

_CONFIG_EXTRA_KEYS = ("vocab", "vectorizer")


def _config_snapshot(cfg: TrainConfig, vocab: Vocab, vectorizer: VectorizerModel | None) -> dict:
    doc = asdict(cfg)
    doc["vocab"] = vocab.id_to_token[4:]  # specials are implicit
    doc["vectorizer"] = vectorizer.to_dict() if vectorizer is not None else None
    return doc


def _config_from_snapshot(doc: dict) -> tuple[TrainConfig, Vocab, VectorizerModel | None]:
    known = {f.name for f in fields(TrainConfig)}
    base = {k: v for k, v in doc.items() if k in known}
    missing = known - set(base)
    if missing:
        raise SchemaError(f"config snapshot missing keys: {sorted(missing)}")
    cfg = TrainConfig(**base)
    tokens = doc.get("vocab")
    if not isinstance(tokens, list):
        raise SchemaError("config snapshot missing vocab token list")
    vocab = Vocab.build([])  # specials only
    for tok in tokens:
        vocab.token_to_id[tok] = len(vocab.id_to_token)
        vocab.id_to_token.append(tok)
    vec_state = doc.get("vectorizer")
    vectorizer = VectorizerModel.from_dict(vec_state) if vec_state else None
    return cfg, vocab, vectorizer


class AdaptedModel:
    """A frozen backbone with one adaptation mode attached."""

    def __init__(self, cfg: TrainConfig, vocab: Vocab, backbone: Backbone,
                 vectorizer: VectorizerModel | None, adapters: ParamStore):
        self.cfg = cfg
        self.mode = cfg.mode
        self.vocab = vocab
        self.backbone = backbone
        self.vectorizer = vectorizer
        self.adapters = adapters

    # -- construction --------------------------------------------------

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AdaptedModel":
        cfg, vocab, vectorizer = _config_from_snapshot(ckpt.config)
        if ckpt.mode != cfg.mode:
            raise SchemaError("checkpoint mode disagrees with its config snapshot")
        backbone = Backbone(len(vocab), cfg.d_backbone, seed=cfg.backbone_seed,
                            trainable=False, max_context=cfg.max_context)
        if cfg.mode == "full_ft":
            for name, p in backbone.params.items():
                arr = ckpt.params.get(name)
                if arr is None or arr.shape != p.values.shape:
                    raise DimMismatch(f"backbone tensor {name!r} missing or mis-shaped")
                p.values[:] = arr
            adapters = ParamStore()
        else:
            expected = adapter_shapes(cfg)
            if set(ckpt.params) != set(expected):
                raise DimMismatch(
                    f"checkpoint params {sorted(ckpt.params)} != expected {sorted(expected)}"
                )
            adapters = ParamStore()
            for name in expected:
                arr = ckpt.params[name]
                if arr.shape != expected[name]:
                    raise DimMismatch(
                        f"{name!r} has shape {arr.shape}, expected {expected[name]}"
                    )
                adapters.add(name, Matrix._wrap(arr.copy(), requires_grad=False))
        if cfg.mode in GRAPH_MODES and vectorizer is None:
            raise SchemaError("graph modes need a vectorizer state in the checkpoint")
        return cls(cfg, vocab, backbone, vectorizer, adapters)

    def to_checkpoint(self) -> Checkpoint:
        params = {name: p.values.copy() for name, p in
                  (self.backbone.params.items() if self.mode == "full_ft"
                   else self.adapters.items())}
        return Checkpoint(
            mode=self.mode,
            config=_config_snapshot(self.cfg, self.vocab, self.vectorizer),
            seed=self.cfg.seed,
            params=params,
        )

    # -- adaptation -----------------------------------------------------

    def _lora_dict(self):
        return {
            (site, proj): (self.adapters[f"lora.{site}.A_{proj}"],
                           self.adapters[f"lora.{site}.B_{proj}"])
            for site in LORA_SITES
            for proj in ("q", "k")
        }

    def fuse(self, c_init: Matrix, code: str):
        """Mode-specific embedding adaptation; returns (c_fused, lora)."""
        mode = self.mode
        if mode in ("none", "full_ft"):
            return c_init, None
        if mode == "linear_adapter":
            return nm.matmul(c_init, self.adapters["W_A"]), None
        if mode == "lora":
            return c_init, self._lora_dict()
        if mode == "prompt_tuning":
            if self.cfg.prompt_len == 0:
                return c_init, None
            return nm.concat_rows([self.adapters["P"], c_init]), None
        tcfg = self.cfg.transducer_config()
        if mode == "abfl_only":
            return td.abfl_forward(c_init, self.adapters["free_G"], self.adapters, tcfg), None
        cpg = build_cpg(code, max_nodes=self.cfg.node_cap)
        gt = vectorize_graph(self.vectorizer, cpg)
        g_vec = td.gve_forward(gt, self.adapters, tcfg)
        if tcfg.fusion == "sum":
            return td.sum_fusion(c_init, g_vec), None
        return td.abfl_forward(c_init, g_vec, self.adapters, tcfg), None

    # -- forward --------------------------------------------------------

    def encode_sample(self, code: str, ids: list[int] | None = None):
        if ids is None:
            ids = self.vocab.encode(code)
        c_init = self.backbone.embed(ids)
        c_fused, lora = self.fuse(c_init, code)
        return self.backbone.encode(c_fused, lora=lora), lora

    def loss_for(self, sample: Sample) -> Matrix:
        memory, lora = self.encode_sample(sample.code)
        target_ids = self.vocab.encode(sample.target) + [EOS]
        return self.backbone.decode_loss(memory, target_ids, lora=lora)

    def predict(self, sample: Sample, max_len: int, beam: int) -> list[str]:
        with nm.no_grad():
            memory, lora = self.encode_sample(sample.code)
            ids = self.backbone.generate(memory, max_len=max_len, beam=beam, lora=lora)
        text = self.vocab.decode(ids)
        return text.split() if text else []


def adapt_embeddings(model: AdaptedModel, c_init: Matrix, code: str) -> Matrix:
    """Embedding-level adaptation only; LoRA deltas live inside attention
    and leave the embeddings untouched."""
    fused, _ = model.fuse(c_init, code)
    return fused


def swap_transducer(model: AdaptedModel, ckpt: Checkpoint) -> AdaptedModel:
    """Attach a different trained adapter to the same backbone.

    The replacement must have been trained against identical backbone
    dims, seed and vocabulary; anything else raises DimMismatch.
    """
    cfg, vocab, vectorizer = _config_from_snapshot(ckpt.config)
    same = (
        cfg.d_backbone == model.cfg.d_backbone
        and cfg.backbone_seed == model.cfg.backbone_seed
        and cfg.max_context == model.cfg.max_context
        and vocab.id_to_token == model.vocab.id_to_token
    )
    if not same:
        raise DimMismatch("checkpoint was trained against a different backbone")
    replacement = AdaptedModel.from_checkpoint(ckpt)
    replacement.backbone = model.backbone
    return replacement


def remove_adapter(model: AdaptedModel) -> AdaptedModel:
    """Drop the adapter entirely; behavior returns to the frozen backbone."""
    cfg = TrainConfig(**{**asdict(model.cfg), "mode": "none"})
    return AdaptedModel(cfg, model.vocab, model.backbone, model.vectorizer, ParamStore())


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


def _prepare(dataset: list[Sample], cfg: TrainConfig):
    """Shared session setup: vocabulary, backbone, vectorizer, usable samples."""
    if not dataset:
        raise EmptyDataset("dataset is empty")
    vocab = Vocab.build([s.code for s in dataset] + [s.target for s in dataset])
    backbone = Backbone(len(vocab), cfg.d_backbone, seed=cfg.backbone_seed,
                        trainable=(cfg.mode == "full_ft"), max_context=cfg.max_context)

    usable = []
    skipped = 0
    labels: list[str] = []
    for s in dataset:
        ids = vocab.encode(s.code)
        target_ids = vocab.encode(s.target) + [EOS]
        if not ids or len(ids) > cfg.max_context or len(target_ids) > cfg.max_context:
            skipped += 1
            continue
        if cfg.mode in GRAPH_MODES:
            try:
                cpg = build_cpg(s.code, max_nodes=cfg.node_cap)
            except (ParseError, GraphTooLarge):
                skipped += 1
                continue
            labels.extend(n.label for n in cpg.nodes)
        usable.append(s)
    if not usable:
        raise AllSamplesSkipped(f"all {len(dataset)} samples were skipped")

    vectorizer = None
    if cfg.mode in GRAPH_MODES:
        if cfg.vectorizer_mode == "tfidf":
            vectorizer = fit_vectorizer(labels, mode="tfidf", d_init=cfg.d_init)
        else:
            vectorizer = fit_vectorizer([], mode="binary", d_init=cfg.d_init)
    return vocab, backbone, vectorizer, usable, skipped


def train(dataset: list[Sample], cfg: TrainConfig) -> tuple[Checkpoint, RunReport]:
    """Seeded training of the mode-owned parameters only.

    Per batch: mean sample loss, backward, global-norm clip, one AdamW
    step at the linearly decayed rate. mode="none" performs zero steps.
    """
    start = time.perf_counter()
    vocab, backbone, vectorizer, usable, skipped = _prepare(dataset, cfg)
    adapters = init_adapter_params(cfg)
    model = AdaptedModel(cfg, vocab, backbone, vectorizer, adapters)
    train_store = backbone.params if cfg.mode == "full_ft" else adapters

    history: list[float] = []
    observed: set[str] = set()
    steps = 0
    if cfg.mode != "none" and len(train_store) > 0 and cfg.epochs > 0:
        opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed)
        n = len(usable)
        batches_per_epoch = math.ceil(n / cfg.batch_size)
        total_steps = cfg.epochs * batches_per_epoch
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for b in range(batches_per_epoch):
                batch = [usable[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                nm.reset_tape()
                total = model.loss_for(batch[0])
                for s in batch[1:]:
                    total = nm.add(total, model.loss_for(s))
                loss = nm.scale(total, 1.0 / len(batch))
                nm.backward(loss)
                observed.update(
                    name for name, p in train_store.trainable_items() if p.grad is not None
                )
                nm.clip_global_norm(train_store, cfg.max_grad_norm)
                nm.adamw_step(train_store, opt, cfg.lr * nm.linear_lr_factor(steps, total_steps))
                steps += 1
                history.append(loss.item())

    observed_count = sum(train_store[name].size for name in observed)
    ckpt = model.to_checkpoint()
    per_epoch = len(history) // cfg.epochs if cfg.epochs else 0
    last_epoch = history[-per_epoch:] if per_epoch else history
    final_loss = float(np.mean(last_epoch)) if last_epoch else 0.0
    report = RunReport(
        mode=cfg.mode,
        trainable_param_count=observed_count,
        metric_name="train_loss",
        metric_value=final_loss,
        seed=cfg.seed,
        wall_time=time.perf_counter() - start,
        skipped=skipped,
        steps=steps,
        history=history,
    )
    return ckpt, report


# Hyperparameter values searched per mode when tuning is requested.
SEARCH_SPACES = {
    "lora": ("lora_r", (4, 8)),
    "prompt_tuning": ("prompt_len", (5, 10, 25, 50)),
}


def tune_hyperparameters(dataset: list[Sample], cfg: TrainConfig):
    """Select the mode's searched hyperparameter on a held-out fifth of
    the data: best validation BLEU, ties broken toward fewer parameters.

    Modes without a search space return the config unchanged. Returns
    (chosen config, trial records).
    """
    space = SEARCH_SPACES.get(cfg.mode)
    if space is None:
        return cfg, []
    field_name, values = space
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, len(dataset) // 5)
    val = [dataset[i] for i in order[:n_val]]
    held = [dataset[i] for i in order[n_val:]] or val
    trials = []
    best = None
    for value in values:
        candidate = TrainConfig(**{**asdict(cfg), field_name: value})
        ckpt, train_rep = train(held, candidate)
        rep, _ = evaluate(val, ckpt)
        record = {field_name: value, "val_bleu": rep.metric_value,
                  "trainable_params": train_rep.trainable_param_count}
        trials.append(record)
        key = (-rep.metric_value, train_rep.trainable_param_count)
        if best is None or key < best[0]:
            best = (key, candidate)
    return best[1], trials


def evaluate(dataset: list[Sample], ckpt: Checkpoint, beam: int | None = None):
    """Generate for every sample and score corpus smoothed BLEU.

    Returns (RunReport, prediction rows); rows are (id, hypothesis,
    reference) strings. Samples whose graphs cannot be extracted under a
    graph mode are skipped and counted.
    """
    if not dataset:
        raise EmptyDataset("dataset is empty")
    start = time.perf_counter()
    model = AdaptedModel.from_checkpoint(ckpt)
    if beam is None:
        beam = model.cfg.beam
    ref_tokens = [split_tokens(s.target) for s in dataset]
    max_len = max((len(r) for r in ref_tokens), default=1) + 2
    hyps, refs, rows = [], [], []
    skipped = 0
    for sample, ref in zip(dataset, ref_tokens):
        try:
            hyp = model.predict(sample, max_len=max_len, beam=beam)
        except (ParseError, GraphTooLarge, ContextTooLong, nm.EmptyInput):
            skipped += 1
            continue
        hyps.append(hyp)
        refs.append(ref)
        rows.append((sample.id, " ".join(hyp), " ".join(ref)))
    if not hyps:
        raise AllSamplesSkipped("no sample could be evaluated")
    score = smoothed_bleu(hyps, refs)
    report = RunReport(
        mode=ckpt.mode,
        trainable_param_count=sum(arr.size for arr in ckpt.params.values()),
        metric_name="smoothed_bleu",
        metric_value=score,
        seed=model.cfg.seed,
        wall_time=time.perf_counter() - start,
        skipped=skipped,
    )
    return report, rows
