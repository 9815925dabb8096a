"""End-to-end subcommand contracts on a small synthetic dataset."""

import hashlib
import json
import os

import numpy as np
import pytest

from retinaforge.cli import main
from synthfundus import write_dataset


def tree_digest(root):
    chunks = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            chunks.append(rel.encode())
            chunks.append(hashlib.sha256(open(path, "rb").read()).digest())
    return hashlib.sha256(b"".join(chunks)).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Prepared cache plus a 1-epoch itermiunet training run."""
    root = tmp_path_factory.mktemp("cli")
    manifest = write_dataset(
        str(root / "ds"), 4, seed=21, height=96, width=96,
        split={"kind": "fixed", "train": ["s00", "s01"], "test": ["s02", "s03"]},
    )
    out = str(root / "run")
    args = ["--manifest", manifest, "--out", out, "--seed", "7"]
    assert main(["prepare"] + args) == 0
    assert main([
        "train", "--arch", "itermiunet", "--epochs", "1",
        "--patches-per-image", "100", "--iterations", "2",
    ] + args) == 0
    return {"manifest": manifest, "out": out, "root": str(root)}


def test_prepare_writes_cache_and_is_idempotent(workspace):
    cache = os.path.join(workspace["out"], "cache")
    for sub in ("images", "fov", "gt1", "gt2"):
        assert len(os.listdir(os.path.join(cache, sub))) == 4
    before = tree_digest(cache)
    assert main(["prepare", "--manifest", workspace["manifest"],
                 "--out", workspace["out"], "--seed", "7"]) == 0
    assert tree_digest(cache) == before


def test_prepare_missing_file_exit_code(tmp_path, capsys):
    manifest = write_dataset(str(tmp_path / "ds"), 2, seed=1)
    os.remove(str(tmp_path / "ds" / "s00_img.png"))
    code = main(["prepare", "--manifest", manifest, "--out", str(tmp_path / "o")])
    assert code == 4
    assert "s00_img.png" in capsys.readouterr().err


def test_train_without_cache_is_config_error(tmp_path):
    code = main(["train", "--out", str(tmp_path / "nothing")])
    assert code == 2


def test_train_writes_archive_history_and_figure(workspace):
    fold = os.path.join(workspace["out"], "train", "fold_00")
    assert os.path.exists(os.path.join(fold, "best.weights"))
    history = open(os.path.join(fold, "history.csv")).read().splitlines()
    assert history[0] == "epoch,lr,train_loss,val_loss"
    assert len(history) == 2
    assert os.path.exists(os.path.join(fold, "history.png"))
    assert os.path.exists(os.path.join(workspace["out"], "train_config.json"))


def test_train_determinism_bit_identical_outputs(tmp_path):
    manifest = write_dataset(str(tmp_path / "ds"), 2, seed=5, height=96, width=96,
                             split={"kind": "fixed", "train": ["s00"], "test": ["s01"]})
    blobs = []
    for tag in ("a", "b"):
        out = str(tmp_path / tag)
        args = ["--manifest", manifest, "--out", out, "--seed", "3"]
        assert main(["prepare"] + args) == 0
        assert main(["train", "--arch", "miunet", "--epochs", "2",
                     "--patches-per-image", "60", "--iterations", "1"] + args) == 0
        fold = os.path.join(out, "train", "fold_00")
        blobs.append((
            open(os.path.join(fold, "best.weights"), "rb").read(),
            open(os.path.join(fold, "history.csv"), "rb").read(),
        ))
    assert blobs[0] == blobs[1]


def test_eval_writes_reports_and_maps(workspace):
    out = workspace["out"]
    code = main([
        "eval", "--arch", "itermiunet", "--iterations", "2", "--seed", "7",
        "--out", out, "--weights", out, "--stride", "24",
    ])
    assert code == 0
    eval_dir = os.path.join(out, "eval")
    csv_lines = open(os.path.join(eval_dir, "metrics.csv")).read().splitlines()
    assert csv_lines[0].startswith("scope,AUC,SE,SP,AC,F1")
    assert any(row.startswith("pooled") for row in csv_lines)
    assert os.path.exists(os.path.join(eval_dir, "metrics.txt"))
    assert os.path.exists(os.path.join(eval_dir, "roc.png"))
    for sid in ("s02", "s03"):
        assert os.path.exists(os.path.join(eval_dir, "maps", f"{sid}_prob.png"))
        assert os.path.exists(os.path.join(eval_dir, "maps", f"{sid}_bin.png"))


def test_predict_writes_maps(workspace):
    out = workspace["out"]
    code = main([
        "predict", "--arch", "itermiunet", "--iterations", "2", "--seed", "7",
        "--out", out, "--weights", out, "--stride", "24",
    ])
    assert code == 0
    maps = os.listdir(os.path.join(out, "predict", "maps"))
    assert len(maps) == 8  # 4 samples x (prob, bin)


def test_cross_eval_runs_on_foreign_manifest(workspace, tmp_path):
    foreign = write_dataset(
        str(tmp_path / "other"), 2, seed=77, height=96, width=112, name="otherset",
        split={"kind": "first_k", "k": 1},
    )
    out = workspace["out"]
    code = main([
        "cross-eval", "--arch", "itermiunet", "--iterations", "2", "--seed", "7",
        "--manifest", foreign, "--out", out, "--weights", out, "--stride", "24",
    ])
    assert code == 0
    assert os.path.exists(os.path.join(out, "cross_eval_otherset", "metrics.csv"))


def test_interrater_emits_both_reports(workspace):
    out = workspace["out"]
    code = main([
        "interrater", "--arch", "itermiunet", "--iterations", "2", "--seed", "7",
        "--out", out, "--weights", out, "--stride", "24",
    ])
    assert code == 0
    assert os.path.exists(
        os.path.join(out, "interrater_model_vs_expert2", "metrics.csv")
    )
    assert os.path.exists(
        os.path.join(out, "interrater_expert1_vs_expert2", "metrics.csv")
    )


def test_eval_spec_mismatch_exit_code(workspace):
    out = workspace["out"]
    code = main([
        "eval", "--arch", "unet", "--seed", "7",
        "--out", out, "--weights", out, "--stride", "24",
    ])
    assert code == 4  # archive holds a different architecture


def test_eval_after_overfit_scores_high(tmp_path):
    # train on a single image until memorized, then evaluate on that same
    # image via a second manifest with the split roles swapped
    manifest = write_dataset(
        str(tmp_path / "ds"), 2, seed=33, height=96, width=96,
        split={"kind": "fixed", "train": ["s00"], "test": ["s01"]},
    )
    doc = json.load(open(manifest))
    doc["split"] = {"kind": "fixed", "train": ["s01"], "test": ["s00"]}
    swapped = os.path.join(os.path.dirname(manifest), "manifest_swapped.json")
    json.dump(doc, open(swapped, "w"))

    out = str(tmp_path / "run")
    assert main(["prepare", "--manifest", manifest, "--out", out, "--seed", "2"]) == 0
    assert main([
        "train", "--arch", "miunet", "--iterations", "1", "--epochs", "5",
        "--patches-per-image", "600", "--manifest", manifest,
        "--out", out, "--seed", "2",
    ]) == 0
    out2 = str(tmp_path / "run_swapped")
    assert main(["prepare", "--manifest", swapped, "--out", out2, "--seed", "2"]) == 0
    assert main([
        "eval", "--arch", "miunet", "--iterations", "1", "--seed", "2",
        "--out", out2, "--weights", out, "--stride", "12",
    ]) == 0
    rows = open(os.path.join(out2, "eval", "metrics.csv")).read().splitlines()
    pooled = [r for r in rows if r.startswith("pooled")][0].split(",")
    ac = float(pooled[4])
    assert ac > 0.95, f"pooled accuracy {ac}"


def test_params_self_check(capsys):
    assert main(["params"]) == 0
    text = capsys.readouterr().out
    assert "Parameters" in text and "Size (in MB)" in text
    for kind in ("unet", "miunet", "iternet", "itermiunet"):
        assert kind in text


def test_params_out_writes_table_and_figure(tmp_path):
    out = str(tmp_path / "params")
    assert main(["params", "--out", out]) == 0
    rows = open(os.path.join(out, "params.csv")).read().splitlines()
    assert rows[0] == "model,parameters,size_bytes"
    assert len(rows) == 5
    assert os.path.exists(os.path.join(out, "params.png"))


def test_benchmark_reports_without_asserting(capsys):
    assert main(["benchmark", "--steps", "1", "--image-size", "64",
                 "--batch-size", "4", "--stride", "16"]) == 0
    text = capsys.readouterr().out
    assert "train step" in text and "reported for reference only" in text


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "5", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert "passed" in out


def test_config_file_and_flag_precedence(tmp_path):
    cfg = {"arch": "miunet", "epochs": 3, "seed": 99}
    path = str(tmp_path / "cfg.json")
    json.dump(cfg, open(path, "w"))
    from retinaforge.cli import build_parser, _resolve_config

    args = build_parser().parse_args(["train", "--config", path, "--epochs", "5"])
    resolved = _resolve_config(args)
    assert resolved.arch == "miunet"
    assert resolved.epochs == 5      # flag wins
    assert resolved.seed == 99       # file wins over default


def test_env_seed_fallback(tmp_path, monkeypatch):
    from retinaforge.cli import build_parser, _resolve_config

    monkeypatch.setenv("RETINA_FORGE_SEED", "4242")
    args = build_parser().parse_args(["params"])
    assert _resolve_config(args).seed == 4242
    monkeypatch.setenv("RETINA_FORGE_SEED", "not-an-int")
    from retinaforge.errors import ConfigError

    with pytest.raises(ConfigError):
        _resolve_config(args)


def test_unknown_config_key_rejected(tmp_path):
    path = str(tmp_path / "bad.json")
    json.dump({"nonsense": 1}, open(path, "w"))
    code = main(["params", "--config", path])
    assert code == 2
