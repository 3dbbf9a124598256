import numpy as np
import pytest

from prfnet import ops
from prfnet.blocks import (
    BLOCK_TYPES,
    BlockConfig,
    Bottleneck,
    Res2NetBlock,
    SEBlock,
    SERes2NetBlock,
    make_block,
)
from prfnet.gradcheck import run_gradcheck
from prfnet.nn import BatchNorm2d, Conv2d, Linear
from prfnet.tensor import Tensor

CFG = BlockConfig(in_channels=8, mid_channels=8, out_channels=16)


@pytest.mark.parametrize("kind", BLOCK_TYPES)
@pytest.mark.parametrize("stride", [1, 2])
def test_block_output_shape(kind, stride, rng):
    cfg = BlockConfig(8, 8, 16, stride=stride)
    out = make_block(kind, cfg, rng)(Tensor(rng.standard_normal((2, 8, 8, 8))))
    assert out.shape == (2, 16, 8 // stride, 8 // stride)
    assert np.all(out.data >= 0)


def test_make_block_rejects_unknown(rng):
    with pytest.raises(ValueError, match="unknown block type"):
        make_block("resnext", CFG, rng)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(stride=3), "stride"),
        (dict(res2net_scale=1), "res2net_scale"),
        (dict(mid_channels=6), "divisible"),
        (dict(se_reduction=32), "se_reduction"),
    ],
)
def test_block_config_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        BlockConfig(**{**dict(in_channels=8, mid_channels=8, out_channels=16), **kwargs})


def test_block_rejects_wrong_channels(rng):
    with pytest.raises(ValueError, match="input channels"):
        make_block("bottleneck", CFG, rng)(Tensor(np.zeros((1, 4, 8, 8))))


def test_shortcut_projection_only_when_needed(rng):
    assert make_block("bottleneck", BlockConfig(16, 4, 16), rng).shortcut.conv is None
    assert make_block("bottleneck", BlockConfig(16, 4, 16, stride=2), rng).shortcut.conv is not None
    assert make_block("bottleneck", BlockConfig(8, 4, 16), rng).shortcut.conv is not None


def test_identity_shortcut_adds_input(rng):
    block = Bottleneck(BlockConfig(16, 4, 16), rng).eval()
    x = Tensor(rng.standard_normal((1, 16, 4, 4)))
    expect = np.maximum(block.residual(x).data + x.data, 0)
    np.testing.assert_array_equal(block(x).data, expect)


def _manual_groups(block, x):
    h = ops.relu(block.bn1(block.conv1(x)))
    xs = ops.split_channels(h, block.cfg.res2net_scale)
    ys = [xs[0].data]
    for i in range(1, len(xs)):
        inp = Tensor(xs[i].data + ys[-1])
        ys.append(np.maximum(block.bns[i - 1](block.convs[i - 1](inp)).data, 0))
    return ys


def test_res2net_hierarchy(rng):
    """y1 = x1; yi = K_i(x_i + y_{i-1}) for i >= 2."""
    block = Res2NetBlock(BlockConfig(8, 16, 16, res2net_scale=4), rng).eval()
    x = Tensor(rng.standard_normal((2, 8, 6, 6)))
    got = [y.data for y in block.groups(x)]
    want = _manual_groups(block, x)
    assert len(got) == 4
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, rtol=1e-5, atol=1e-6)


def test_res2net_strided_groups(rng):
    block = Res2NetBlock(BlockConfig(8, 16, 16, stride=2, res2net_scale=4), rng).eval()
    x = Tensor(rng.standard_normal((1, 8, 6, 6)))
    ys = block.groups(x)
    assert all(y.shape == (1, 4, 3, 3) for y in ys)
    x1 = ops.split_channels(ops.relu(block.bn1(block.conv1(x))), 4)[0]
    np.testing.assert_allclose(ys[0].data, ops.avg_pool2d(x1, 3, 2, pad=1).data)


def test_se_gates_in_unit_interval(rng):
    se = SEBlock(16, 4, rng)
    x = Tensor(3 * rng.standard_normal((3, 16, 5, 5)))
    s = se.excitation(x).data
    assert s.shape == (3, 16)
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(se(x).data, x.data * s[:, :, None, None], rtol=1e-6)


def test_se_requires_enough_channels(rng):
    with pytest.raises(ValueError):
        SEBlock(2, 4, rng)


def test_se_res2net_has_se_on_residual(rng):
    assert SERes2NetBlock(CFG, rng).se is not None
    assert Res2NetBlock(CFG, rng).se is None


def test_batchnorm_running_stats(rng):
    bn = BatchNorm2d(3)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) + 2.0)
    bn(x)
    mean = x.data.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(bn._buffers["running_mean"], 0.1 * mean, rtol=1e-5)
    bn.eval()
    before = bn._buffers["running_mean"].copy()
    bn(x)
    np.testing.assert_array_equal(bn._buffers["running_mean"], before)


def test_eval_mode_is_per_sample(rng):
    block = make_block("se_res2net", CFG, rng).eval()
    x = rng.standard_normal((3, 8, 8, 8)).astype(np.float32)
    full = block(Tensor(x)).data
    np.testing.assert_array_equal(full[1:2], block(Tensor(x[1:2])).data)


def test_module_parameter_names(rng):
    block = make_block("se_res2net", CFG, rng)
    block.name_parameters("b.")
    names = [p.name for p in block.parameters()]
    assert "b.conv1.weight" in names and "b.se.fc1.bias" in names
    assert [n for n, _ in block.named_parameters("b.")] == names
    assert len(set(names)) == len(names) == len(block.parameters())
    block.freeze()
    assert all(p.frozen for p in block.parameters())
    block.unfreeze()
    assert not any(p.frozen for p in block.parameters())


def test_layers_without_bias(rng):
    assert Conv2d(2, 3, 3, rng).bias is None
    assert Linear(2, 3, rng, bias=False).bias is None


BLOCK_ROWS = [f"{k}{tag}" for k in BLOCK_TYPES for tag in ("", "/stride2")] + ["se"]


@pytest.mark.parametrize("component", BLOCK_ROWS)
def test_block_gradcheck(component):
    (row,) = run_gradcheck(components=[component])
    assert row.max_rel_error < 1e-5
