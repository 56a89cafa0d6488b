"""Command-line surface.

Subcommands: extract-cpg, vectorize, dedup, check-leakage, stats, synth,
train, infer, evaluate, count-params, gradcheck. Exit codes: 0 success,
1 domain error (message on stderr), 2 usage error. File outputs are
written atomically; report paths write a CSV and a PNG figure beside the
primary output unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import numerics as nm
from . import transducer as td
from .backbone import EOS, Backbone, ContextTooLong, EmptyTarget, Vocab
from .cpg import GraphTooLarge, SchemaError, build_cpg, cpg_from_json, cpg_to_json
from .dataio import load_jsonl, save_jsonl, write_text_atomic
from .datatools import (
    EmptyTokenSet,
    cross_split_check,
    dataset_stats,
    dedup,
    synth_corpus,
)
from .metrics import LengthMismatch
from .minilang import ParseError
from .pipeline import (
    AllSamplesSkipped,
    Checkpoint,
    DimMismatch,
    EmptyDataset,
    TrainConfig,
    SchemaError as CheckpointSchemaError,
    VersionMismatch,
    evaluate,
    load_checkpoint,
    param_report,
    save_checkpoint,
    train,
)
from .vectorize import (
    EmptyCorpus,
    UnknownLabel,
    fit as fit_vectorizer,
    load_external_table,
    vectorize_graph,
)

DOMAIN_ERRORS = (
    ParseError,
    GraphTooLarge,
    SchemaError,
    CheckpointSchemaError,
    VersionMismatch,
    DimMismatch,
    EmptyDataset,
    AllSamplesSkipped,
    EmptyCorpus,
    UnknownLabel,
    EmptyTokenSet,
    LengthMismatch,
    ContextTooLong,
    EmptyTarget,
    nm.ShapeMismatch,
    nm.OutOfRange,
    nm.EmptyInput,
    nm.NotScalar,
    nm.MissingGrad,
    FileNotFoundError,
    ValueError,
)


def _add_dim_flags(p: argparse.ArgumentParser, d_backbone_default: int = 64) -> None:
    p.add_argument("--d-backbone", type=int, default=d_backbone_default,
                   help="backbone hidden width")
    p.add_argument("--d-init", type=int, default=1024,
                   help="initial node-feature width")
    p.add_argument("--d-down", type=int, default=8, help="down-projection width")
    p.add_argument("--d-up", type=int, default=128, help="up-projection width")
    p.add_argument("--d-abf", type=int, default=8, help="attention-fusion width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpgtune",
        description="Code property graphs, graph transducers and frozen-backbone tuning.",
    )
    parser.add_argument("--config", help="JSON file whose keys override flag defaults")
    sub = parser.add_subparsers(
        dest="command", required=True,
        parser_class=lambda **kw: argparse.ArgumentParser(
            formatter_class=argparse.ArgumentDefaultsHelpFormatter, **kw
        ),
    )

    p = sub.add_parser("extract-cpg", help="parse a source file and write its graph as JSON")
    p.add_argument("source", help="mini-language source file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--function", default=None, help="function name (default: first)")
    p.add_argument("--max-nodes", type=int, default=50)

    p = sub.add_parser("vectorize", help="write initial node features and adjacency as JSON")
    p.add_argument("source", help="mini-language source file or CPG JSON (.json)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=("binary", "tfidf", "external"), default="binary")
    p.add_argument("--d-init", type=int, default=1024)
    p.add_argument("--dataset", help="JSONL corpus to fit the tf-idf table on")
    p.add_argument("--external-table", help="embedding table JSON for external mode")
    p.add_argument("--max-nodes", type=int, default=50)

    p = sub.add_parser("dedup", help="remove exact and near duplicates from a JSONL corpus")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--report", help="where to write the removed-pairs JSON")

    p = sub.add_parser("check-leakage", help="find and remove valid/test items leaked from train")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out-dir", required=True, help="directory for cleaned splits and report")

    p = sub.add_parser("stats", help="dataset statistics (graph sizes, token counts)")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", help="stats JSON path (also writes CSV and figure)")
    p.add_argument("--max-nodes", type=int, default=50)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic JSONL corpus")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=8)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("train", help="train one adaptation mode on a JSONL dataset")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True, help="checkpoint JSON path")
    p.add_argument("--mode", choices=("none", "full_ft", "linear_adapter", "lora",
                                      "prompt_tuning", "transducer", "gve_only",
                                      "abfl_only"), default="transducer",
                   help="adaptation mode")
    p.add_argument("--epochs", type=int, default=1, help="training epochs")
    p.add_argument("--batch-size", type=int, default=8, help="training batch size")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    p.add_argument("--max-grad-norm", type=float, default=1.0,
                   help="global gradient-norm clip")
    p.add_argument("--seed", type=int, default=8,
                   help="random seed (18 is the replication pair)")
    p.add_argument("--eval-batch", type=int, default=32, help="validation batch size")
    p.add_argument("--weight-decay", type=float, default=0.01,
                   help="decoupled weight decay")
    p.add_argument("--lora-r", type=int, default=8, choices=(4, 8),
                   help="low-rank adapter rank")
    p.add_argument("--prompt-len", type=int, default=25, choices=(0, 5, 10, 25, 50),
                   help="soft-prompt length")
    _add_dim_flags(p)
    p.add_argument("--vectorizer", choices=("binary", "tfidf"), default="binary",
                   help="node-label vectorizer")
    p.add_argument("--max-nodes", type=int, default=50, help="graph node cap")
    p.add_argument("--max-context", type=int, default=400,
                   help="maximum context length")
    p.add_argument("--backbone-seed", type=int, default=0,
                   help="seed deriving the frozen backbone")
    p.add_argument("--beam", type=int, default=4, help="beam width for generation")
    p.add_argument("--tune", action="store_true",
                   help="pick the mode's searched hyperparameter on a 20%% "
                        "validation split before training")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("infer", help="generate target text for each dataset sample")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True, help="predictions JSONL path")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)

    p = sub.add_parser("evaluate", help="smoothed BLEU of a checkpoint on a dataset")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True, help="report JSON path")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("count-params", help="trainable parameter count of the transducer")
    _add_dim_flags(p, d_backbone_default=768)
    p.add_argument("--table", action="store_true", help="print counts for every mode")
    p.add_argument("--vocab-size", type=int, default=32000,
                   help="vocabulary size assumed for the full fine-tuning row")
    p.add_argument("-o", "--output", default=None,
                   help="optional path for the table CSV (figure written beside it)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full training path")
    p.add_argument("--d-backbone", type=int, default=64)
    p.add_argument("--d-init", type=int, default=256)
    p.add_argument("--d-down", type=int, default=8)
    p.add_argument("--d-up", type=int, default=128)
    p.add_argument("--d-abf", type=int, default=8)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=8)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _load_dataset(path: str):
    samples = load_jsonl(path)
    if not samples:
        raise EmptyDataset(f"{path} holds no samples")
    return samples


def _write_json(path: str, obj) -> None:
    write_text_atomic(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_extract_cpg(args) -> int:
    source = Path(args.source).read_text(encoding="utf-8")
    cpg = build_cpg(source, max_nodes=args.max_nodes, function=args.function)
    write_text_atomic(args.output, cpg_to_json(cpg))
    return 0


def _cmd_vectorize(args) -> int:
    raw = Path(args.source).read_text(encoding="utf-8")
    if args.source.endswith(".json"):
        cpg = cpg_from_json(raw)
    else:
        cpg = build_cpg(raw, max_nodes=args.max_nodes)
    if args.mode == "external":
        if not args.external_table:
            raise ValueError("external mode needs --external-table")
        model = load_external_table(Path(args.external_table).read_text(encoding="utf-8"))
    elif args.mode == "tfidf":
        if not args.dataset:
            raise ValueError("tfidf mode needs --dataset to fit on")
        labels = []
        for s in _load_dataset(args.dataset):
            try:
                labels.extend(n.label for n in build_cpg(s.code, args.max_nodes).nodes)
            except (ParseError, GraphTooLarge):
                continue
        model = fit_vectorizer(labels, mode="tfidf", d_init=args.d_init)
    else:
        model = fit_vectorizer([], mode="binary", d_init=args.d_init)
    gt = vectorize_graph(model, cpg)
    _write_json(args.output, {
        "node_count": gt.node_count,
        "d_init": model.d_init,
        "h_init": gt.h_init.tolist(),
        "adjacency": gt.adjacency,
    })
    return 0


def _cmd_dedup(args) -> int:
    samples = _load_dataset(args.dataset)
    retained, removed = dedup(samples, threshold=args.threshold)
    budget = {}
    for rid in retained:
        budget[rid] = budget.get(rid, 0) + 1
    kept = []
    for s in samples:
        if budget.get(s.id, 0) > 0:
            budget[s.id] -= 1
            kept.append(s)
    save_jsonl(args.output, kept)
    if args.report:
        _write_json(args.report, removed)
    print(f"retained {len(retained)}/{len(samples)}, removed {len(removed)}")
    return 0


def _cmd_check_leakage(args) -> int:
    train_s = _load_dataset(args.train)
    valid_s = _load_dataset(args.valid)
    test_s = _load_dataset(args.test)
    report, valid_clean, test_clean = cross_split_check(
        train_s, valid_s, test_s, threshold=args.threshold
    )
    out = Path(args.out_dir)
    save_jsonl(out / "valid.jsonl", valid_clean)
    save_jsonl(out / "test.jsonl", test_clean)
    _write_json(out / "leak_report.json", report)
    print(f"leaks removed: {len(report)} "
          f"(valid {len(valid_s) - len(valid_clean)}, test {len(test_s) - len(test_clean)})")
    return 0


def _cmd_stats(args) -> int:
    samples = _load_dataset(args.dataset)
    record = dataset_stats(samples, node_cap=args.max_nodes)
    doc = record.to_dict()
    for key, value in doc.items():
        print(f"{key}: {value}")
    if args.output:
        _write_json(args.output, doc)
        base = Path(args.output).with_suffix("")
        from . import report as rp

        rp.write_csv(
            base.with_suffix(".csv"),
            ["id", "nodes", "edges", "input_tokens", "target_tokens"],
            [[r["id"], r["nodes"], r["edges"], r["input_tokens"], r["target_tokens"]]
             for r in record.per_sample],
        )
        if not args.no_figures:
            rp.save_histograms(
                base.with_suffix(".png"),
                [("nodes", [r["nodes"] for r in record.per_sample]),
                 ("edges", [r["edges"] for r in record.per_sample]),
                 ("input tokens", [r["input_tokens"] for r in record.per_sample]),
                 ("target tokens", [r["target_tokens"] for r in record.per_sample])],
            )
    return 0


def _cmd_synth(args) -> int:
    save_jsonl(args.output, synth_corpus(args.n, args.seed))
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        mode=args.mode,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        max_grad_norm=args.max_grad_norm,
        seed=args.seed,
        eval_batch=args.eval_batch,
        weight_decay=args.weight_decay,
        lora_r=args.lora_r,
        prompt_len=args.prompt_len,
        d_backbone=args.d_backbone,
        d_init=args.d_init,
        d_down=args.d_down,
        d_up=args.d_up,
        d_abf=args.d_abf,
        vectorizer_mode=args.vectorizer,
        node_cap=args.max_nodes,
        max_context=args.max_context,
        backbone_seed=args.backbone_seed,
        beam=args.beam,
    )


def _cmd_train(args) -> int:
    samples = _load_dataset(args.dataset)
    cfg = _train_config(args)
    if args.tune:
        from .pipeline import tune_hyperparameters

        cfg, trials = tune_hyperparameters(samples, cfg)
        for trial in trials:
            print(f"tune: {trial}")
    ckpt, rep = train(samples, cfg)
    save_checkpoint(ckpt, args.output)
    base = Path(args.output).with_suffix("")
    write_text_atomic(str(base) + ".report.json", rep.to_json())
    from . import report as rp

    rp.write_csv(str(base) + ".history.csv", ["step", "loss"],
                 [[i + 1, loss] for i, loss in enumerate(rep.history)])
    if not args.no_figures and rep.history:
        rp.save_loss_curve(str(base) + ".loss.png", rep.history)
    print(f"mode={rep.mode} steps={rep.steps} trainable={rep.trainable_param_count} "
          f"final_loss={rep.metric_value:.6f} skipped={rep.skipped}")
    return 0


def _cmd_infer(args) -> int:
    samples = _load_dataset(args.dataset)
    from .pipeline import AdaptedModel
    from .tokens import split_tokens

    ckpt = load_checkpoint(args.checkpoint)
    model = AdaptedModel.from_checkpoint(ckpt)
    beam = args.beam if args.beam is not None else model.cfg.beam
    if args.max_len is not None:
        max_len = args.max_len
    else:
        max_len = max((len(split_tokens(s.target)) for s in samples), default=1) + 2
    lines = []
    for s in samples:
        try:
            tokens = model.predict(s, max_len=max_len, beam=beam)
            lines.append({"id": s.id, "prediction": " ".join(tokens)})
        except (ParseError, GraphTooLarge, ContextTooLong, nm.EmptyInput) as exc:
            lines.append({"id": s.id, "prediction": None, "error": str(exc)})
    write_text_atomic(args.output,
                      "\n".join(json.dumps(line) for line in lines) + "\n")
    return 0


def _cmd_evaluate(args) -> int:
    samples = _load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    rep, rows = evaluate(samples, ckpt, beam=args.beam)
    write_text_atomic(args.output, rep.to_json())
    base = Path(args.output).with_suffix("")
    from . import report as rp
    from .metrics import sentence_bleu

    per_sample = [
        (sid, hyp, ref, sentence_bleu(hyp.split(), ref.split()) if ref else 0.0)
        for sid, hyp, ref in rows
    ]
    rp.write_csv(str(base) + ".predictions.csv",
                 ["id", "hypothesis", "reference", "sentence_bleu"], per_sample)
    if not args.no_figures:
        rp.save_histograms(str(base) + ".png",
                           [("per-sample smoothed BLEU", [r[3] for r in per_sample])])
    print(f"mode={rep.mode} smoothed_bleu={rep.metric_value:.4f} "
          f"samples={len(rows)} skipped={rep.skipped}")
    return 0


def _cmd_count_params(args) -> int:
    tcfg = td.TransducerConfig(
        d_backbone=args.d_backbone, d_init=args.d_init, d_down=args.d_down,
        d_up=args.d_up, d_abf=args.d_abf,
    )
    count = td.count_trainable(tcfg)
    print(count)
    print(f"{count / 1000:.1f}K")
    if args.table or args.output:
        cfg = TrainConfig(mode="none", d_backbone=args.d_backbone, d_init=args.d_init,
                          d_down=args.d_down, d_up=args.d_up, d_abf=args.d_abf)
        rows = param_report(cfg, vocab_size=args.vocab_size)
        for row in rows:
            print(f"{row['mode']:>16}: {row['trainable_params']:>12} ({row['thousands']})")
        if args.output:
            from . import report as rp

            rp.write_csv(args.output,
                         ["mode", "trainable_params", "thousands"],
                         [[r["mode"], r["trainable_params"], r["thousands"]] for r in rows])
            if not args.no_figures:
                nonzero = [r for r in rows if r["trainable_params"] > 0]
                rp.save_bar_chart(
                    str(Path(args.output).with_suffix(".png")),
                    [r["mode"] for r in nonzero],
                    [r["trainable_params"] for r in nonzero],
                    "trainable parameters", "trainable parameters by mode", log=True,
                )
    return 0


def gradcheck_program(node_count: int) -> str:
    """A deterministic program whose graph has exactly node_count nodes."""
    if node_count < 7:
        raise ValueError("gradcheck program needs at least 7 nodes")
    lines = ["def main():", "    x = a()", "    if x > 3:",
             "        y = b()", "        c()", "    else:", "        d()"]
    for i in range(node_count - 7):
        lines.append(f"    z = {i}")
    return "\n".join(lines) + "\n"


def run_gradcheck(d_backbone: int = 64, d_init: int = 256, d_down: int = 8,
                  d_up: int = 128, d_abf: int = 8, nodes: int = 20,
                  seed: int = 8, eps: float = 1e-5) -> float:
    """Finite differences vs analytic gradients through the whole
    transduce -> encode -> decode_loss path; returns max relative error."""
    code = gradcheck_program(nodes)
    tcfg = td.TransducerConfig(d_backbone=d_backbone, d_init=d_init, d_down=d_down,
                               d_up=d_up, d_abf=d_abf)
    store = td.init_params(tcfg, seed)
    vectorizer = fit_vectorizer([], mode="binary", d_init=d_init)
    cpg = build_cpg(code, max_nodes=max(nodes, 50))
    if len(cpg.nodes) != nodes:
        raise ValueError(f"program yields {len(cpg.nodes)} nodes, wanted {nodes}")
    gt = vectorize_graph(vectorizer, cpg)
    vocab = Vocab.build([code, "a b c"])
    backbone = Backbone(len(vocab), d_backbone, seed=0)
    ids = vocab.encode(code)
    target = vocab.encode("a b c") + [EOS]

    def loss_fn(params):
        c_init = backbone.embed(ids)
        g_vec = td.gve_forward(gt, params, tcfg)
        c_fused = td.abfl_forward(c_init, g_vec, params, tcfg)
        memory = backbone.encode(c_fused)
        return backbone.decode_loss(memory, target)

    return nm.grad_check(loss_fn, store, eps=eps)


def _cmd_gradcheck(args) -> int:
    error = run_gradcheck(
        d_backbone=args.d_backbone, d_init=args.d_init, d_down=args.d_down,
        d_up=args.d_up, d_abf=args.d_abf, nodes=args.nodes,
        seed=args.seed, eps=args.eps,
    )
    print(f"max relative error: {error:.3e}")
    if error > args.tolerance:
        print(f"FAIL: above tolerance {args.tolerance:.1e}", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "extract-cpg": _cmd_extract_cpg,
    "vectorize": _cmd_vectorize,
    "dedup": _cmd_dedup,
    "check-leakage": _cmd_check_leakage,
    "stats": _cmd_stats,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "count-params": _cmd_count_params,
    "gradcheck": _cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    # A config file supplies defaults; explicit flags still win.
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        try:
            overrides = json.loads(Path(known.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config {known.config}: {exc}", file=sys.stderr)
            return 1
        if not isinstance(overrides, dict):
            print("error: --config must hold a JSON object", file=sys.stderr)
            return 1
        for action in parser._subparsers._group_actions[0].choices.values():  # type: ignore[union-attr]
            valid = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in overrides.items() if k in valid})
        unknown = [k for k in overrides
                   if not any(k in {a.dest for a in sp._actions}
                              for sp in parser._subparsers._group_actions[0].choices.values())]  # type: ignore[union-attr]
        if unknown:
            print(f"error: unknown config keys {unknown}", file=sys.stderr)
            return 2
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(run())
