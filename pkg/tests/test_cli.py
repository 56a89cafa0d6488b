import hashlib
import json

import pytest

from cpgtune.cli import run
from cpgtune.cpg import cpg_from_json
from cpgtune.dataio import load_jsonl, save_jsonl
from cpgtune.datatools import synth_corpus


@pytest.fixture
def listing1_file(tmp_path, listing1):
    p = tmp_path / "listing1.mini"
    p.write_text(listing1)
    return p


@pytest.fixture
def small_dataset(tmp_path):
    p = tmp_path / "data.jsonl"
    save_jsonl(p, synth_corpus(16, seed=8))
    return p


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- extraction ----------------------------------------------------------------


def test_extract_cpg_matches_golden(tmp_path, listing1_file, golden_dir):
    out = tmp_path / "cpg.json"
    assert run(["extract-cpg", str(listing1_file), "-o", str(out)]) == 0
    got = cpg_from_json(out.read_text())
    golden = cpg_from_json((golden_dir / "listing1_cpg.json").read_text())
    assert got == golden


def test_extract_cpg_parse_error_exit_1(tmp_path):
    bad = tmp_path / "bad.mini"
    bad.write_text("def f(:")
    out = tmp_path / "cpg.json"
    assert run(["extract-cpg", str(bad), "-o", str(out)]) == 1
    assert not out.exists()


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as err:
        run(["extract-cpg"])  # missing required args
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        run(["no-such-command"])
    assert err.value.code == 2


def test_unknown_flag_rejected(listing1_file, tmp_path):
    with pytest.raises(SystemExit) as err:
        run(["extract-cpg", str(listing1_file), "-o",
             str(tmp_path / "x.json"), "--bogus"])
    assert err.value.code == 2


# -- vectorize -------------------------------------------------------------------


def test_vectorize_source_and_cpg_json(tmp_path, listing1_file):
    cpg_path = tmp_path / "cpg.json"
    run(["extract-cpg", str(listing1_file), "-o", str(cpg_path)])
    out1 = tmp_path / "v1.json"
    out2 = tmp_path / "v2.json"
    assert run(["vectorize", str(listing1_file), "-o", str(out1),
                "--d-init", "64"]) == 0
    assert run(["vectorize", str(cpg_path), "-o", str(out2),
                "--d-init", "64"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    doc = json.loads(out1.read_text())
    assert doc["node_count"] == 6
    assert len(doc["h_init"]) == 6
    assert len(doc["h_init"][0]) == 64


# -- data tooling ----------------------------------------------------------------


def test_dedup_cli(tmp_path):
    samples = synth_corpus(10, seed=8)
    from cpgtune.dataio import Sample

    samples.append(Sample("copycat", samples[0].code, samples[0].target))
    data = tmp_path / "dup.jsonl"
    save_jsonl(data, samples)
    out = tmp_path / "clean.jsonl"
    report = tmp_path / "removed.json"
    assert run(["dedup", str(data), "-o", str(out), "--report", str(report)]) == 0
    kept = load_jsonl(out)
    assert len(kept) <= 10
    assert all(s.id != "copycat" for s in kept)
    removed = json.loads(report.read_text())
    assert any(r["removed_id"] == "copycat" for r in removed)


def test_check_leakage_cli(tmp_path):
    train = synth_corpus(10, seed=8)
    valid = synth_corpus(5, seed=99)
    test = [train[0]]
    for name, split in (("train", train), ("valid", valid), ("test", test)):
        save_jsonl(tmp_path / f"{name}.jsonl", split)
    out_dir = tmp_path / "cleaned"
    assert run(["check-leakage", "--train", str(tmp_path / "train.jsonl"),
                "--valid", str(tmp_path / "valid.jsonl"),
                "--test", str(tmp_path / "test.jsonl"),
                "--out-dir", str(out_dir)]) == 0
    report = json.loads((out_dir / "leak_report.json").read_text())
    assert any(r["removed_id"] == train[0].id for r in report)
    assert len(load_jsonl(out_dir / "test.jsonl")) == 0


def test_stats_cli(tmp_path, small_dataset, capsys):
    out = tmp_path / "stats.json"
    assert run(["stats", str(small_dataset), "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["total"] == 16
    assert (tmp_path / "stats.csv").exists()
    assert (tmp_path / "stats.png").exists()


def test_synth_cli_deterministic(tmp_path):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    assert run(["synth", "-n", "8", "--seed", "8", "-o", str(a)]) == 0
    assert run(["synth", "-n", "8", "--seed", "8", "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


# -- training / inference ----------------------------------------------------------


def test_train_reproducible_and_reports(tmp_path, small_dataset):
    ck1 = tmp_path / "run1.json"
    ck2 = tmp_path / "run2.json"
    args = ["--mode", "transducer", "--seed", "8", "--d-backbone", "16",
            "--d-init", "64", "--epochs", "1", "--no-figures"]
    assert run(["train", str(small_dataset), "-o", str(ck1)] + args) == 0
    assert run(["train", str(small_dataset), "-o", str(ck2)] + args) == 0
    assert sha(ck1) == sha(ck2)
    assert (tmp_path / "run1.report.json").exists()
    assert (tmp_path / "run1.history.csv").exists()


def test_train_emits_loss_figure(tmp_path, small_dataset):
    ck = tmp_path / "fig.json"
    assert run(["train", str(small_dataset), "-o", str(ck), "--mode", "none"]) == 0
    # mode none performs no steps, so no curve is drawn
    assert not (tmp_path / "fig.loss.png").exists()
    ck2 = tmp_path / "fig2.json"
    assert run(["train", str(small_dataset), "-o", str(ck2), "--mode",
                "linear_adapter", "--d-backbone", "16", "--d-init", "64"]) == 0
    assert (tmp_path / "fig2.loss.png").exists()


def test_infer_and_evaluate_cli(tmp_path, small_dataset):
    ck = tmp_path / "ck.json"
    run(["train", str(small_dataset), "-o", str(ck), "--mode", "none",
         "--d-backbone", "16", "--d-init", "64", "--no-figures"])
    preds = tmp_path / "preds.jsonl"
    assert run(["infer", str(small_dataset), "--checkpoint", str(ck),
                "-o", str(preds), "--beam", "1"]) == 0
    lines = [json.loads(l) for l in preds.read_text().splitlines()]
    assert len(lines) == 16
    assert all("prediction" in l for l in lines)

    report = tmp_path / "eval.json"
    assert run(["evaluate", str(small_dataset), "--checkpoint", str(ck),
                "-o", str(report), "--beam", "1", "--no-figures"]) == 0
    doc = json.loads(report.read_text())
    assert doc["metric"]["name"] == "smoothed_bleu"
    assert (tmp_path / "eval.predictions.csv").exists()


def test_evaluate_missing_checkpoint_exit_1(tmp_path, small_dataset):
    assert run(["evaluate", str(small_dataset), "--checkpoint",
                str(tmp_path / "nope.json"), "-o", str(tmp_path / "r.json")]) == 1


# -- parameter accounting -----------------------------------------------------------


def test_count_params_cli(capsys):
    assert run(["count-params", "--d-backbone", "768"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "30744"
    assert out[1] == "30.7K"
    assert run(["count-params", "--d-backbone", "1024"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "37144"
    assert out[1] == "37.1K"


def test_count_params_table(tmp_path, capsys):
    out = tmp_path / "params.csv"
    assert run(["count-params", "--d-backbone", "768", "--table",
                "-o", str(out)]) == 0
    text = out.read_text()
    assert "transducer,30744,30.7K" in text
    assert "linear_adapter,589824,589.8K" in text
    assert (tmp_path / "params.png").exists()


# -- gradcheck ------------------------------------------------------------------


def test_gradcheck_cli_small(capsys):
    assert run(["gradcheck", "--d-init", "32", "--d-up", "16",
                "--nodes", "8", "--tolerance", "1e-4"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out


# -- config file ---------------------------------------------------------------


def test_config_file_overrides_defaults(tmp_path, small_dataset):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"mode": "none", "d_backbone": 16, "d_init": 64}))
    ck = tmp_path / "ck.json"
    assert run(["--config", str(config), "train", str(small_dataset),
                "-o", str(ck), "--no-figures"]) == 0
    doc = json.loads(ck.read_text())
    assert doc["mode"] == "none"
    assert doc["config"]["d_backbone"] == 16


def test_config_file_unknown_key_rejected(tmp_path, small_dataset):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"warp_drive": 9}))
    assert run(["--config", str(config), "train", str(small_dataset),
                "-o", str(tmp_path / "x.json")]) == 2


def test_help_lists_training_defaults(capsys):
    with pytest.raises(SystemExit) as err:
        run(["train", "--help"])
    assert err.value.code == 0
    out = capsys.readouterr().out
    assert "(default: 1)" in out          # epochs
    assert "(default: 8)" in out          # batch size / seed
    assert "(default: 0.0003)" in out     # learning rate
    assert "(default: 1.0)" in out        # gradient clip
    assert "(default: 400)" in out        # context length


def test_tune_flag_selects_hyperparameter(tmp_path, capsys):
    from cpgtune.dataio import save_jsonl

    data = tmp_path / "tiny.jsonl"
    save_jsonl(data, synth_corpus(10, seed=8))
    ck = tmp_path / "tuned.json"
    assert run(["train", str(data), "-o", str(ck), "--mode", "prompt_tuning",
                "--tune", "--d-backbone", "16", "--d-init", "64",
                "--no-figures"]) == 0
    out = capsys.readouterr().out
    assert out.count("tune:") == 4  # the four searched soft-prompt lengths
    doc = json.loads(ck.read_text())
    assert doc["config"]["prompt_len"] in (5, 10, 25, 50)
