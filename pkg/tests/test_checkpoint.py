import struct

import numpy as np
import pytest

from prfnet.checkpoint import (
    MAGIC,
    CheckpointError,
    CheckpointMeta,
    CheckpointMismatch,
    ConfigDigestWarning,
    config_digest,
    decode,
    encode,
    load_checkpoint,
    load_into,
    save_checkpoint,
)
from prfnet.model import ModelConfig, PRFNet
from prfnet.tensor import precision


@pytest.fixture
def model(tiny_cfg, rng):
    m = PRFNet(tiny_cfg, seed=5)
    for p in m.parameters():
        p.data += 0.01 * rng.standard_normal(p.shape).astype(p.dtype)
    m.trained_stages = ["coarse"]
    return m


def test_byte_exact_round_trip(model, tmp_path):
    a, b = tmp_path / "a.prfn", tmp_path / "b.prfn"
    save_checkpoint(a, model, "coarse", 3, 5)
    loaded, meta = load_checkpoint(a)
    save_checkpoint(b, loaded, meta.stage, meta.epoch, meta.seed)
    assert a.read_bytes() == b.read_bytes()
    assert (meta.stage, meta.epoch, meta.seed, meta.trained_stages) == ("coarse", 3, 5, ["coarse"])


def test_loaded_model_scores_identically(model, tmp_path, rng):
    save_checkpoint(tmp_path / "m.prfn", model)
    loaded, _ = load_checkpoint(tmp_path / "m.prfn")
    x = [rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32) for _ in range(3)]
    model.eval()
    loaded.eval()
    assert np.array_equal(model.score(*x), loaded.score(*x))


def test_f64_round_trip(tiny_cfg, tmp_path):
    with precision("f64"):
        m = PRFNet(tiny_cfg)
    save_checkpoint(tmp_path / "m.prfn", m)
    loaded, _ = load_checkpoint(tmp_path / "m.prfn")
    assert loaded.parameters()[0].dtype == np.float64


def test_header_layout(model):
    raw = encode([("w", np.arange(3, dtype=np.float32))], CheckpointMeta(stage="fine"))
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8]) == (1,)
    tensors, meta = decode(raw)
    assert tensors[0][0] == "w" and np.array_equal(tensors[0][1], [0, 1, 2])
    assert meta.stage == "fine"


def test_big_endian_input_stored_little_endian():
    be = np.arange(4, dtype=">f8")
    raw = encode([("x", be)], CheckpointMeta())
    assert raw.endswith(np.arange(4, dtype="<f8").tobytes())


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda r: b"XXXX" + r[4:], "magic"),
        (lambda r: r[:4] + struct.pack("<I", 9) + r[8:], "version"),
        (lambda r: r[:-3], "truncated"),
        (lambda r: r + b"\0", "trailing"),
    ],
)
def test_corrupt_files(model, tmp_path, mutate, match):
    path = tmp_path / "m.prfn"
    save_checkpoint(path, model)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(path)


def test_unsupported_dtype():
    with pytest.raises(CheckpointError, match="dtype"):
        encode([("i", np.arange(3))], CheckpointMeta())


def test_mismatched_architecture_names_tensors(model, tmp_path):
    save_checkpoint(tmp_path / "m.prfn", model)
    other = PRFNet(ModelConfig(), seed=0)
    with pytest.raises(CheckpointMismatch) as err:
        load_into(other, tmp_path / "m.prfn")
    assert any("backbone.stem_conv.weight" in d and "shape" in d for d in err.value.diffs)


def test_mismatched_dtype_is_reported(model, tmp_path):
    save_checkpoint(tmp_path / "m.prfn", model)
    with precision("f64"):
        other = PRFNet(model.cfg)
    with pytest.raises(CheckpointMismatch, match="dtype"):
        load_into(other, tmp_path / "m.prfn")


def test_digest_mismatch_only_warns(model, tmp_path):
    save_checkpoint(tmp_path / "m.prfn", model)
    variant = ModelConfig(backbone=model.cfg.backbone, mlp_hidden=model.cfg.mlp_hidden, cascaded=False)
    assert config_digest(variant) != config_digest(model.cfg)
    with pytest.warns(ConfigDigestWarning):
        loaded, _ = load_checkpoint(tmp_path / "m.prfn", variant)
    assert not loaded.cfg.cascaded
    assert np.array_equal(loaded.parameters()[0].data, model.parameters()[0].data)


def test_buffers_saved(model, tmp_path):
    name, buf = next(iter(model.named_buffers()))
    buf[:] = 0.25
    save_checkpoint(tmp_path / "m.prfn", model)
    loaded, _ = load_checkpoint(tmp_path / "m.prfn")
    assert np.all(dict(loaded.named_buffers())[name] == 0.25)
