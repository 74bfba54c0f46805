import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from changerel.cli import dispatch
from changerel.metrics import PALETTE


def _train_args(data, out, *extra):
    return ["train", "--set", f"train_manifest={data}/train.txt", "--set", "tile_size=64",
            "--set", "batch_size=2", "--set", "steps=2", "--set", "val_every=0", "--out", str(out), *extra]


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert dispatch(["synth", "--seed", "5", "--n", "4", "--size", "64", "--split", "train", "--out", str(root)]) == 0
    assert dispatch(["synth", "--seed", "6", "--n", "2", "--size", "128", "--split", "test", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def cli_ckpt(cli_data):
    out = cli_data / "run"
    assert dispatch(_train_args(cli_data, out)) == 0
    return out / "final.ckpt"


def test_synth_layout(cli_data):
    for sub in ("A", "B", "label"):
        assert sorted(p.name for p in (cli_data / sub).glob("train_*.png"))[:1] == ["train_00000.png"]
    assert len((cli_data / "train.txt").read_text().splitlines()) == 4


def test_train_outputs(cli_data, cli_ckpt, capsys):
    run = cli_ckpt.parent
    assert cli_ckpt.is_file() and (run / "config.yaml").is_file() and (run / "train.log").is_file()
    assert "tile_size: 64" in (run / "config.yaml").read_text()


def test_train_config_file_and_overrides(cli_data, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"train_manifest: {cli_data}/train.txt\ntile_size: 64\nbatch_size: 1\nsteps: 5\nval_every: 0\n")
    out = tmp_path / "r"
    assert dispatch(["train", "--config", str(cfg), "--set", "steps=1", "--seed", "3", "--out", str(out)]) == 0
    text = (out / "config.yaml").read_text()
    assert "steps: 1" in text and "seed: 3" in text


def test_eval_writes_tables(cli_data, cli_ckpt, tmp_path, capsys):
    # test split holds 128 px scenes; eval tiles them to the 64 px training size
    assert dispatch(["eval", "--checkpoint", str(cli_ckpt), "--manifest", str(cli_data / "test.txt"),
                     "--out", str(tmp_path)]) == 0
    kv = dict(line.split("=", 1) for line in (tmp_path / "metrics.kv").read_text().splitlines())
    counts = sum(int(kv[k]) for k in ("tp", "fp", "fn", "tn"))
    assert counts == 2 * 128 * 128
    assert "f1" in (tmp_path / "metrics.txt").read_text()
    assert "precision" in capsys.readouterr().out


def test_eval_incompatible_config_exit_code(cli_data, cli_ckpt, tmp_path):
    code = dispatch(["eval", "--checkpoint", str(cli_ckpt), "--manifest", str(cli_data / "test.txt"),
                     "--set", "enable_scr=false", "--out", str(tmp_path)])
    assert code == 1


def test_infer_tiles_and_colors(cli_data, cli_ckpt, tmp_path):
    args = ["infer", "--checkpoint", str(cli_ckpt), "--pre", str(cli_data / "A" / "test_00000.png"),
            "--post", str(cli_data / "B" / "test_00000.png"), "--label", str(cli_data / "label" / "test_00000.png"),
            "--out", str(tmp_path), "--debug"]
    assert dispatch(args) == 0
    cm = np.load(tmp_path / "change_prob.npy")
    assert cm.shape == (128, 128) and 0 <= cm.min() and cm.max() <= 1
    colors = np.asarray(Image.open(tmp_path / "change_colors.png"))
    assert {tuple(px) for px in colors.reshape(-1, 3)} <= set(PALETTE.values())
    assert (tmp_path / "activations.png").is_file() and (tmp_path / "heads.png").is_file()


def test_infer_without_label(cli_data, cli_ckpt, tmp_path):
    args = ["infer", "--checkpoint", str(cli_ckpt), "--pre", str(cli_data / "A" / "train_00000.png"),
            "--post", str(cli_data / "B" / "train_00000.png"), "--out", str(tmp_path)]
    assert dispatch(args) == 0
    assert (tmp_path / "change_prob.png").is_file() and not (tmp_path / "change_colors.png").exists()


def test_pvf_dump_endpoints(cli_data, tmp_path):
    pre, post = cli_data / "A" / "train_00001.png", cli_data / "B" / "train_00001.png"
    assert dispatch(["pvf-dump", "--pre", str(pre), "--post", str(post), "--frames", "4", "--out", str(tmp_path)]) == 0
    frames = sorted(tmp_path.glob("frame_*.png"))
    assert len(frames) == 4
    first, last = (np.asarray(Image.open(p)) for p in (frames[0], frames[-1]))
    assert first.tobytes() == np.asarray(Image.open(pre).convert("RGB")).tobytes()
    assert last.tobytes() == np.asarray(Image.open(post).convert("RGB")).tobytes()


def test_ablate_small_grid(cli_data, tmp_path):
    out = tmp_path / "abl"
    args = ["ablate", "--set", f"train_manifest={cli_data}/train.txt", "--set", "tile_size=64",
            "--set", "batch_size=1", "--set", "steps=1", "--set", "val_every=0",
            "--grid", "scr", "--frames", "2", "--no-temporal", "--out", str(out)]
    assert dispatch(args) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["cell"] for r in rows] == ["scr=0 ccr=1", "scr=1 ccr=1", "none", "ccr W=2"]
    assert rows[0]["params"] < rows[1]["params"]
    assert "final_loss" in (out / "ablation.txt").read_text()


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], 2),
    (["ablate", "--grid", "xyz", "--set", "train_manifest=x"], 2),
    (["train", "--set", "steps=-1"], 2),
    (["train", "--set", "not_a_key=1"], 2),
    (["infer", "--checkpoint", "/nonexistent.ckpt", "--pre", "a", "--post", "b"], 1),
])
def test_error_exit_codes(argv, code, tmp_path):
    assert dispatch(argv + ["--out", str(tmp_path)]) == code


def test_numerical_abort_exit_code(cli_data, tmp_path):
    args = _train_args(cli_data, tmp_path, "--set", "normalize_mean=[0,0,0]", "--set", "normalize_std=[0,0,0]")
    assert dispatch(args) == 3
    assert (tmp_path / "abort.txt").is_file()


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "changerel.cli", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 2 and "invalid choice" in res.stderr
