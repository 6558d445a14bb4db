import json

import pytest
import yaml

from lingspot.checkpoint import load_checkpoint
from lingspot.cli import main

TINY_PLM = ["plm.dim=16", "plm.heads=2", "plm.encoder_layers=1", "plm.decoder_layers=1", "plm.batch_size=16"]
TINY_VIS = ["visual.dim=16", "visual.heads=2", "visual.encoder_layers=1", "visual.decoder_layers=1",
            "visual.ffn_inner=32", "visual.channels=[8,8,16,16]", "visual.num_points=5"]
SMALL_DATA = ["scenes.count=4", "corpus.max_entries=40"]


def _sets(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["build-corpus", "--out", str(data), "--seed", "1", *_sets(SMALL_DATA)]) == 0
    plm = root / "plm"
    assert main(["pretrain-plm", "--corpus", str(data), "--out", str(plm), "--epochs", "1", *_sets(TINY_PLM)]) == 0
    spot = root / "spot"
    rc = main(["train-spotter", "--data", str(data), "--plm", str(plm / "checkpoint"), "--out", str(spot),
               "--steps", "2", *_sets(TINY_PLM + TINY_VIS + ["spotter.batch_size=2", "spotter.visual_warmup=1"])])
    assert rc == 0
    return root


def test_build_corpus_outputs(workspace):
    data = workspace / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["scenes"] == 4
    assert manifest["entries"] <= 40
    assert (data / "config.yaml").exists() and (data / "version.json").exists()
    assert yaml.safe_load((data / "config.yaml").read_text())["seed"] == 1
    assert len(list((data / "scenes").glob("*.json"))) == 4


def test_build_corpus_deterministic(workspace, tmp_path):
    again = tmp_path / "again"
    assert main(["build-corpus", "--out", str(again), "--seed", "1", *_sets(SMALL_DATA)]) == 0
    a = json.loads((workspace / "data" / "manifest.json").read_text())
    b = json.loads((again / "manifest.json").read_text())
    assert a["files"] == b["files"]
    other = tmp_path / "other"
    assert main(["build-corpus", "--out", str(other), "--seed", "2", *_sets(SMALL_DATA)]) == 0
    c = json.loads((other / "manifest.json").read_text())
    assert c["files"] != a["files"]


def test_no_sources_is_usage_error(tmp_path):
    rc = main(["build-corpus", "--out", str(tmp_path / "x"), *_sets(["corpus.synthetic=false"])])
    assert rc == 1


def test_overwrite_guard(workspace):
    rc = main(["build-corpus", "--out", str(workspace / "data"), "--seed", "1", *_sets(SMALL_DATA)])
    assert rc == 1


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("LINGSPOT_OUTPUT_ROOT", str(tmp_path))
    assert main(["build-corpus", "--seed", "5", *_sets(SMALL_DATA)]) == 0
    assert (tmp_path / "build-corpus-seed5" / "manifest.json").exists()


def test_pretrain_zero_epochs_and_resume(workspace, tmp_path):
    data = str(workspace / "data")
    zero = tmp_path / "zero"
    assert main(["pretrain-plm", "--corpus", data, "--out", str(zero), "--epochs", "0", *_sets(TINY_PLM)]) == 0
    ck = load_checkpoint(zero / "checkpoint")
    assert ck.meta["steps"] == 0
    first = load_checkpoint(workspace / "plm" / "checkpoint")
    assert first.meta["steps"] > 0
    resumed = tmp_path / "resumed"
    rc = main(["pretrain-plm", "--corpus", data, "--out", str(resumed), "--epochs", "1",
               "--resume", str(workspace / "plm" / "checkpoint"), *_sets(TINY_PLM)])
    assert rc == 0
    assert load_checkpoint(resumed / "checkpoint").meta["steps"] == 2 * first.meta["steps"]


def test_train_spotter_needs_plm(workspace, tmp_path):
    rc = main(["train-spotter", "--data", str(workspace / "data"), "--out", str(tmp_path / "s"), "--steps", "1"])
    assert rc == 1


def test_random_init_arm(workspace, tmp_path):
    out = tmp_path / "r"
    rc = main(["train-spotter", "--data", str(workspace / "data"), "--init", "random", "--out", str(out),
               "--steps", "1", *_sets(TINY_PLM + TINY_VIS + ["spotter.batch_size=2"])])
    assert rc == 0
    assert load_checkpoint(out / "checkpoint").meta["init"] == "random"
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and "total" in json.loads(lines[0])


def test_non_finite_loss_is_runtime_failure(workspace, tmp_path):
    rc = main(["train-spotter", "--data", str(workspace / "data"), "--init", "random", "--out", str(tmp_path / "n"),
               "--steps", "6", *_sets(TINY_PLM + TINY_VIS + ["spotter.batch_size=2", "spotter.lr=1e30",
                                                              "spotter.grad_clip=null"])])
    assert rc == 2


def test_infer_evaluate_report(workspace, tmp_path, capsys):
    data = str(workspace / "data")
    inf = tmp_path / "inf"
    rc = main(["infer", "--model", str(workspace / "spot" / "checkpoint"), "--data", data, "--out", str(inf),
               "--lexicon", "none"])
    assert rc == 0
    preds = inf / "predictions.jsonl"
    assert preds.exists()
    ev = tmp_path / "ev"
    rc = main(["evaluate", "--predictions", str(preds), "--annotations", data, "--out", str(ev),
               "--lexicon", "none", "--train-words", data])
    assert rc == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["n_gt"] > 0
    capsys.readouterr()
    assert main(["report", "--report", str(ev)]) == 0
    assert "end-to-end" in capsys.readouterr().out
    rc = main(["report", "--predictions", str(preds), "--compare", str(preds), "--annotations", data])
    assert rc == 0


def test_evaluate_with_lexicon_modes(workspace, tmp_path):
    data = workspace / "data"
    words = tmp_path / "words.txt"
    words.write_text("LOSTWORLD\nHELLO\n")
    preds = tmp_path / "p.jsonl"
    preds.write_text("")
    for mode in ("absolute", "normalized"):
        rc = main(["evaluate", "--predictions", str(preds), "--annotations", str(data), "--lexicon", str(words),
                   "--mode", mode, "--out", str(tmp_path / mode)])
        assert rc == 0
        assert json.loads((tmp_path / mode / "report.json").read_text())["true_positives"] == 0


def test_usage_errors(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["pretrain-plm"])  # --corpus missing
    assert exc.value.code == 1
    assert main(["build-corpus", "--out", str(tmp_path / "a"), "--set", "nope=1"]) == 1
    assert main(["report"]) == 1
    assert main(["evaluate", "--predictions", str(tmp_path / "missing.jsonl"),
                 "--annotations", str(workspace / "data"), "--out", str(tmp_path / "e")]) == 2


def _tree_hashes(directory):
    import hashlib

    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def test_training_commands_reproducible(workspace, tmp_path):
    data = str(workspace / "data")
    for name in ("a", "b"):
        assert main(["pretrain-plm", "--corpus", data, "--out", str(tmp_path / f"plm_{name}"), "--epochs", "1",
                     *_sets(TINY_PLM)]) == 0
        assert main(["train-spotter", "--data", data, "--plm", str(tmp_path / f"plm_{name}" / "checkpoint"),
                     "--out", str(tmp_path / f"spot_{name}"), "--steps", "2",
                     *_sets(TINY_PLM + TINY_VIS + ["spotter.batch_size=2"])]) == 0
    for kind in ("plm", "spot"):
        a = _tree_hashes(tmp_path / f"{kind}_a" / "checkpoint")
        b = _tree_hashes(tmp_path / f"{kind}_b" / "checkpoint")
        assert a and a == b
        ma = (tmp_path / f"{kind}_a" / "metrics.jsonl").read_text()
        assert ma == (tmp_path / f"{kind}_b" / "metrics.jsonl").read_text()
