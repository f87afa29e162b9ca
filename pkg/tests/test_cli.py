import filecmp
import json

import pytest

from scribblevc.cli import main
from scribblevc.train import load_checkpoint

TINY = {
    "data": {"height": 32, "width": 32, "num_classes": 3, "n_train": 2, "n_val": 2, "seed": 5},
    "model": {"base_channels": 4, "num_heads": [1, 1, 2, 2]},
    "train": {"epochs": 2, "batch_size": 2},
    "experiment": {"seeds": [0], "sizes": [1, 2]},
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def stderr_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return err[-1]


@pytest.fixture(scope="module")
def synthesized(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.json", TINY)
    assert main(["synth", "--config", cfg, "--out", str(root / "data"), "--quiet"]) == 0
    return root, cfg


def test_synth_layout(synthesized):
    root, _ = synthesized
    data = root / "data"
    assert (data / "train.json").exists() and (data / "val.json").exists()
    assert (data / "resolved_config.json").exists()
    manifest = json.loads((data / "train.json").read_text())
    assert manifest["num_classes"] == 3 and len(manifest["records"]) == 2


def test_synth_is_byte_identical(synthesized, tmp_path):
    root, cfg = synthesized
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again"), "--quiet"]) == 0
    cmp = filecmp.dircmp(root / "data", tmp_path / "again")

    def same(c):
        if c.left_only or c.right_only or c.diff_files or c.funny_files:
            return False
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        return not mismatch and not errors and all(same(s) for s in c.subdirs.values())

    assert same(cmp)


@pytest.fixture(scope="module")
def trained(synthesized):
    root, _ = synthesized
    doc = dict(TINY, train_manifest=str(root / "data" / "train.json"),
               val_manifest=str(root / "data" / "val.json"))
    cfg = write_config(root / "train.json", doc)
    out = root / "run"
    assert main(["train", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    return root, out


def test_train_outputs(trained):
    _, out = trained
    lines = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 2
    echo = json.loads((out / "resolved_config.json").read_text())
    assert echo["train"]["epochs"] == 2 and echo["model"]["image_size"] == 32
    assert (out / "last.pt").exists() and (out / "loss_curve.png").exists()


def test_eval_reproduces_training_dice(trained):
    root, out = trained
    ev = root / "eval"
    code = main(["eval", "--checkpoint", str(out / "last.pt"),
                 "--manifest", str(root / "data" / "val.json"), "--out", str(ev), "--quiet"])
    assert code == 0
    final = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    metrics = json.loads((ev / "metrics.json").read_text())
    assert abs(metrics["dice_mean"] - final["val_dice_mean"]) <= 1e-6
    assert (ev / "metrics.csv").exists() and (ev / "resolved_config.json").exists()
    assert len(list((ev / "overlays").glob("*.png"))) == 2


@pytest.mark.parametrize("policy", ["cnn", "trans"])
def test_eval_policies(trained, policy, tmp_path):
    root, out = trained
    code = main(["eval", "--checkpoint", str(out / "last.pt"), "--policy", policy,
                 "--manifest", str(root / "data" / "val.json"), "--out", str(tmp_path), "--quiet"])
    assert code == 0
    assert json.loads((tmp_path / "metrics.json").read_text())["policy"] == policy


def test_usage_error_exit_code(capsys):
    assert main(["train"]) == 2
    assert main(["bogus", "--out", "x"]) == 2
    assert main(["eval", "--out", "x", "--checkpoint", "c", "--manifest", "m",
                 "--policy", "max"]) == 2


def test_bad_config_is_validation_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", {"data": {"heigth": 32}})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    line = stderr_line(capsys)
    assert line.startswith("scribblevc: error code=3 kind=validation") and "heigth" in line


def test_missing_manifest_is_validation_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", TINY)
    assert main(["train", "--config", cfg, "--manifest", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "o")]) == 3
    assert "none.json" in stderr_line(capsys)


def test_class_count_mismatch(trained, tmp_path, capsys):
    root, _ = trained
    doc = json.loads(json.dumps(TINY))
    doc["data"]["num_classes"] = 4
    cfg = write_config(tmp_path / "k4.json", doc)
    assert main(["train", "--config", cfg, "--manifest", str(root / "data" / "train.json"),
                 "--out", str(tmp_path / "o")]) == 3
    assert "num_classes=3" in stderr_line(capsys)


def test_eval_missing_checkpoint(trained, tmp_path, capsys):
    root, _ = trained
    assert main(["eval", "--checkpoint", str(tmp_path / "x.pt"),
                 "--manifest", str(root / "data" / "val.json"), "--out", str(tmp_path)]) == 3
    assert "not found" in stderr_line(capsys)


def test_runtime_error_exit_code(trained, tmp_path, capsys):
    root, _ = trained
    (tmp_path / "broken.pt").write_bytes(b"not a checkpoint")
    code = main(["eval", "--checkpoint", str(tmp_path / "broken.pt"),
                 "--manifest", str(root / "data" / "val.json"), "--out", str(tmp_path / "o")])
    assert code == 4
    assert stderr_line(capsys).startswith("scribblevc: error code=4 kind=runtime")


def test_seed_override_changes_data(synthesized, tmp_path):
    _, cfg = synthesized
    assert main(["synth", "--config", cfg, "--seed", "9", "--out", str(tmp_path), "--quiet"]) == 0
    echo = json.loads((tmp_path / "resolved_config.json").read_text())
    assert echo["data"]["seed"] == 9 and echo["train"]["seed"] == 9


def test_sweep_and_ablate_grids(synthesized, tmp_path):
    _, cfg = synthesized
    doc = json.loads(json.dumps(TINY))
    doc["train"]["epochs"] = 1
    cfg = write_config(tmp_path / "one.json", doc)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s"), "--quiet"]) == 0
    grid = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert [r["size"] for r in grid["rows"]] == [1, 2]
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert (tmp_path / "a" / "ablation.csv").exists()


def test_sweep_duplicate_sizes(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["experiment"]["sizes"] = [2, 2]
    cfg = write_config(tmp_path / "dup.json", doc)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 3
    assert "duplicate" in stderr_line(capsys)


def train_doc(root, **train):
    doc = json.loads(json.dumps(TINY))
    doc["train"].update(train)
    doc["train_manifest"] = str(root / "data" / "train.json")
    doc["val_manifest"] = str(root / "data" / "val.json")
    return doc


def test_zero_epoch_train_writes_checkpoint(synthesized, tmp_path):
    root, _ = synthesized
    cfg = write_config(tmp_path / "c.json", train_doc(root, epochs=0))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    state = load_checkpoint(str(tmp_path / "o" / "last.pt"))
    assert state.epoch == 0 and state.history == []


def test_failed_validation_has_no_side_effects(tmp_path):
    cfg = write_config(tmp_path / "c.json", TINY)
    out = tmp_path / "never"
    assert main(["train", "--config", cfg, "--manifest", str(tmp_path / "none.json"),
                 "--out", str(out)]) == 3
    assert not out.exists()
    bad = write_config(tmp_path / "bad.json", {"train": {"lr": -1}})
    assert main(["synth", "--config", bad, "--out", str(out)]) == 3
    assert not out.exists()


def test_resolved_config_reproduces_run(trained, tmp_path):
    _, out = trained
    echo = str(out / "resolved_config.json")
    assert main(["train", "--config", echo, "--out", str(tmp_path / "again"), "--quiet"]) == 0
    assert (tmp_path / "again" / "metrics.jsonl").read_text() == (out / "metrics.jsonl").read_text()


def test_train_resume_matches_uninterrupted(synthesized, tmp_path):
    root, _ = synthesized
    full = write_config(tmp_path / "full.json", train_doc(root, epochs=3))
    half = write_config(tmp_path / "half.json", train_doc(root, epochs=1))
    assert main(["train", "--config", full, "--out", str(tmp_path / "full"), "--quiet"]) == 0
    assert main(["train", "--config", half, "--out", str(tmp_path / "half"), "--quiet"]) == 0
    assert main(["train", "--config", full, "--checkpoint", str(tmp_path / "half" / "last.pt"),
                 "--out", str(tmp_path / "resumed"), "--quiet"]) == 0
    a = [json.loads(x) for x in (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()]
    b = [json.loads(x) for x in (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines()]
    assert len(a) == len(b) == 3
    for ra, rb in zip(a, b):
        for key in ("L_ss", "L_pl", "L_crf", "L_cls", "L_total"):
            assert abs(ra[key] - rb[key]) <= 1e-6


def test_inputs_not_mutated(trained, tmp_path):
    root, out = trained
    before = {p: p.read_bytes() for p in [out / "last.pt", root / "data" / "val.json"]}
    main(["eval", "--checkpoint", str(out / "last.pt"), "--manifest", str(root / "data" / "val.json"),
          "--out", str(tmp_path), "--quiet"])
    assert all(p.read_bytes() == b for p, b in before.items())
