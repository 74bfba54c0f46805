import re
import time

import numpy as np
import pytest
import torch

from changerel.config import TrainConfig, model_spec
from changerel.data import synth_dataset

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_(\w+)", item.name)
    if m and (rep.when == "call" or rep.failed or rep.skipped):
        key = int(m.group(1))
        prev = _ACCEPTANCE.get(key, "PASS")
        status = "FAIL" if rep.failed else ("SKIP" if rep.skipped else "PASS")
        if prev == "FAIL" or (prev == "SKIP" and status == "PASS"):
            status = prev
        _ACCEPTANCE[key] = status
        _ACCEPTANCE[f"name{key}"] = m.group(2).replace("_", " ")


def pytest_terminal_summary(terminalreporter):
    keys = sorted(k for k in _ACCEPTANCE if isinstance(k, int))
    if not keys:
        return
    terminalreporter.section("acceptance criteria")
    for k in keys:
        terminalreporter.write_line(f"criterion {k}: {_ACCEPTANCE[k]:4s}  {_ACCEPTANCE['name%d' % k]}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_spec():
    return model_spec("tiny")


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Eight 64x64 training scenes and four validation scenes."""
    root = tmp_path_factory.mktemp("small_data")
    train = synth_dataset(3, 8, 64, 0.1, root, "train")
    val = synth_dataset(4, 4, 64, 0.1, root, "val")
    return root, train, val


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The 2,000-step tiny run on 64 synthetic 128 px scenes, shared by the slow checks."""
    from changerel.trainer import train

    root = tmp_path_factory.mktemp("desk")
    train_m = synth_dataset(11, 64, 128, 0.1, root / "data", "train")
    val_m = synth_dataset(12, 16, 128, 0.1, root / "data", "val")
    cfg = TrainConfig(train_manifest=str(root / "data" / "train.txt"), val_manifest=str(root / "data" / "val.txt"),
                      steps=2000, val_every=100, log_every=50, out_dir=str(root / "run"))
    t0 = time.perf_counter()
    ckpt = train(cfg)
    return dict(config=cfg, checkpoint=ckpt, train=train_m, val=val_m, minutes=(time.perf_counter() - t0) / 60)
