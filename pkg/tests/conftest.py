from __future__ import annotations

import numpy as np
import pytest

from prfnet.backbone import BackboneConfig
from prfnet.data import TripletDataset, generate_synthetic_dataset
from prfnet.model import ModelConfig
from prfnet.tensor import precision

# Smallest configuration the architecture allows: one block per stage and
# two Res2Net groups. Used wherever the toy widths would only cost time.
TINY = ModelConfig(
    backbone=BackboneConfig(
        stem_width=4,
        stage_widths=(8, 16, 32, 64),
        block_counts=(1, 1, 1, 1),
        res2net_scale=2,
        se_reduction=4,
    ),
    mlp_hidden=8,
)

TINY_INI = """\
[model]
stem_width = 4
stage_widths = 8, 16, 32, 64
block_counts = 1, 1, 1, 1
res2net_scale = 2
se_reduction = 4
mlp_hidden = 8

[train]
batch_size = 8
epochs = 2
lr0 = 0.01
momentum = 0.9

[data]
train_manifest = {train}
val_manifest = {val}

[io]
checkpoint_dir = ckpt
report_dir = report
"""


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """24 triplets of 32x32, all four kinds."""
    return generate_synthetic_dataset(24, tmp_path_factory.mktemp("small"), size=32, seed=7)


@pytest.fixture(scope="session")
def small_dataset(small_manifest):
    return TripletDataset.from_manifest(small_manifest)


@pytest.fixture(scope="session")
def noise_manifest(tmp_path_factory):
    return generate_synthetic_dataset(
        200, tmp_path_factory.mktemp("noise"), size=32, kinds=("gaussian_noise",), seed=3
    )


@pytest.fixture
def tiny_ini(tmp_path, small_manifest):
    """Write a tiny-model run config into ``tmp_path`` and return its path."""
    path = tmp_path / "run.ini"
    path.write_text(TINY_INI.format(train=small_manifest, val=small_manifest))
    return path


# --------------------------------------------------------------------------- #
# acceptance verdict lines
# --------------------------------------------------------------------------- #
_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


def _emit(config, criterion, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
    config.stash[_VERDICTS][criterion] = line
    tr = config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.write_line(line)


@pytest.fixture
def verdict(request):
    """``verdict(passed, detail)`` prints and stores the line for this test's criterion."""
    marker = request.node.get_closest_marker("acceptance")
    criterion = marker.args[0] if marker else request.node.name

    def record(passed: bool, detail: str) -> bool:
        _emit(request.config, criterion, bool(passed), detail)
        return bool(passed)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and rep.when == "call" and rep.failed and marker.args[0] not in item.config.stash[_VERDICTS]:
        _emit(item.config, marker.args[0], False, f"error: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines.values():
            terminalreporter.write_line(line)
