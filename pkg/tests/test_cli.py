import json

import pytest
import torch

from weaksurg.cli import main
from weaksurg.trainer import RunRecord

TINY_CONFIG = """
embed_dim = 24
depth = 2
heads = 3
projection_dim = 8
crop_size = 16
window_k = 3
delta_max = 2
batch_size = 4
epochs = 1
num_crops = 2
enable_pter = false
enable_ctsc = false
"""


def tree_hashes(root):
    import hashlib

    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["--seed", "4", "synth", "--out", str(root), "--clips", "2", "--frames", "3",
                 "--image-size", "32"]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "config.toml"
    cfg.write_text(TINY_CONFIG)
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out)]) == 0
    return out


def test_synth_layout(dataset, capsys):
    clips = sorted((dataset / "clips").iterdir())
    assert len(clips) == 2
    assert all(len(list((c / "frames").iterdir())) == 3 for c in clips)


def test_synth_repeatable(tmp_path, dataset):
    main(["--seed", "4", "synth", "--out", str(tmp_path), "--clips", "2", "--frames", "3",
          "--image-size", "32"])
    assert tree_hashes(tmp_path) == tree_hashes(dataset)


@pytest.mark.parametrize("argv", [
    ["synth", "--out", "x", "--classes", "0"],
    ["synth", "--out", "x", "--clips", "many"],
    ["synth"],
    ["eval", "--oracle", "--data", "x", "--stage", "final"],
    ["frobnicate"],
    [],
])
def test_bad_flags_exit_2(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2


def test_missing_paths_exit_3(tmp_path, dataset):
    assert main(["eval", "--oracle", "--data", str(tmp_path / "nope"), "--stage", "cam_seed"]) == 3
    assert main(["eval", "--ckpt", str(tmp_path / "none.pt"), "--data", str(dataset),
                 "--stage", "cam_seed"]) in (3, 4)
    assert main(["train", "--config", str(tmp_path / "none.toml"), "--data", str(dataset),
                 "--out", str(tmp_path)]) == 3


def test_bad_config_exit_2(tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_a_field": 1}))
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path)]) == 2


def test_bad_worker_env_exit_2(monkeypatch, dataset):
    monkeypatch.setenv("WEAKSURG_NUM_WORKERS", "zero")
    assert main(["eval", "--oracle", "--data", str(dataset), "--stage", "cam_seed"]) == 2


def test_corrupt_checkpoint_exit_4(tmp_path, dataset, run_dir, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--ckpt", str(bad), "--data", str(dataset), "--stage", "cam_seed"]) == 4
    state = torch.load(run_dir / "checkpoint.pt", weights_only=False)
    state["version"] = 7
    torch.save(state, tmp_path / "old.pt")
    assert main(["eval", "--ckpt", str(tmp_path / "old.pt"), "--data", str(dataset),
                 "--stage", "cam_seed"]) == 4
    assert "format-version 7" in capsys.readouterr().err


def test_oracle_eval_report(tmp_path, dataset, monkeypatch, capsys):
    monkeypatch.setenv("WEAKSURG_NUM_WORKERS", "2")
    report = tmp_path / "r.json"
    assert main(["eval", "--oracle", "--data", str(dataset), "--stage", "pseudo_mask",
                 "--report", str(report), "--masks-out", str(tmp_path / "pm")]) == 0
    data = json.loads(report.read_text())
    assert data["semantic"]["Ch_IoU"] >= 99
    assert data["instance"]["AP50"] == 100.0
    assert "Ch_IoU" in capsys.readouterr().out
    assert len(list((tmp_path / "pm").rglob("scores.json"))) == 2


def test_train_record_switches(run_dir):
    record = RunRecord.read_jsonl(run_dir / "run_record.jsonl")
    assert record.steps and all(set(s["losses"]) == {"cls"} for s in record.steps)


def test_train_seed_flag_overrides_config(tmp_path, dataset, run_dir):
    cfg = run_dir / "config.toml"
    assert main(["--seed", "9", "train", "--config", str(cfg), "--data", str(dataset),
                 "--out", str(tmp_path)]) == 0
    ckpt = torch.load(tmp_path / "checkpoint.pt", weights_only=False)
    assert ckpt["train_config"]["seed"] == 9


def test_eval_checkpoint_writes_report(dataset, run_dir):
    assert main(["eval", "--ckpt", str(run_dir / "checkpoint.pt"), "--data", str(dataset),
                 "--stage", "cam_seed"]) == 0
    data = json.loads((run_dir / "eval_cam_seed.json").read_text())
    assert data["stage"] == "cam_seed" and 0 <= data["semantic"]["Ch_IoU"] <= 100


def test_export_plots_one_panel_per_frame(tmp_path, dataset, run_dir):
    out = tmp_path / "plots"
    assert main(["export-plots", "--ckpt", str(run_dir / "checkpoint.pt"), "--data", str(dataset),
                 "--out", str(out), "--max-frames", "2"]) == 0
    pngs = sorted(out.rglob("*.png"))
    assert len(pngs) == 4  # 2 clips x 2 frames
    assert pngs[0].read_bytes()[:4] == b"\x89PNG"
