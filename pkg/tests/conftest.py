"""Shared heavyweight fixtures for the acceptance suite.

The standard toy scene and its trained checkpoints are built once per session
and reused by every criterion; a summary line per criterion is printed at the
end of the run.
"""

import numpy as np
import pytest
import torch

_ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, detail: str):
    line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'} - {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_bundle():
    from scenescale.scenegen import standard_toy_bundle
    return standard_toy_bundle()


def _train(bundle, tmp_root, tag, **overrides):
    from scenescale import trainer as tr
    cfg = tr.TrainConfig(seed=0, **overrides)
    ckpt = tmp_root / f"{tag}.bin"
    report = tmp_root / f"{tag}.json"
    fields, net, rep = tr.train_full(bundle, cfg, checkpoint_path=ckpt,
                                     report_path=report)
    return {"fields": fields, "net": net, "report": rep,
            "ckpt": ckpt, "report_path": report}


@pytest.fixture(scope="session")
def heavy_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def trained_default(toy_bundle, heavy_root):
    torch.set_num_threads(1)
    return _train(toy_bundle, heavy_root, "default")


@pytest.fixture(scope="session")
def trained_r1(toy_bundle, heavy_root):
    torch.set_num_threads(1)
    return _train(toy_bundle, heavy_root, "r1", rounds=1)


@pytest.fixture(scope="session")
def trained_noboot(toy_bundle, heavy_root):
    torch.set_num_threads(1)
    return _train(toy_bundle, heavy_root, "noboot", skip_bootstrap=True)


@pytest.fixture(scope="session")
def default_checkpoint(trained_default):
    from scenescale.trainer import load_checkpoint
    return load_checkpoint(trained_default["ckpt"])
