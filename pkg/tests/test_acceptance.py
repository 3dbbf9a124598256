"""End-to-end acceptance criteria; each test prints one PASS/FAIL line.

The training criterion runs the full two-stage protocol for five seeds on
freshly generated data and takes over an hour on one CPU core. Deselect it
with ``-m "not slow"`` for a quick pass.
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from prfnet import baselines, data, ops
from prfnet.checkpoint import load_checkpoint, save_checkpoint
from prfnet.cli import main
from prfnet.config import load_config
from prfnet.model import ModelConfig, PRFNet
from prfnet.tensor import Tensor, precision
from prfnet.trainer import TrainConfig, evaluate_accuracy, predict, train_stage

TOY_INI = Path(__file__).resolve().parent.parent / "configs" / "toy.ini"
SEEDS = range(5)
TARGET_ACC = 0.90
SEED_BUDGET_S = 30 * 60


def _backbone_hash(model) -> str:
    h = hashlib.sha256()
    for name, p in model.backbone.named_parameters("backbone."):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def _progress(request, text):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.write_line(text)


# --------------------------------------------------------------------------- #
# gradient integrity
# --------------------------------------------------------------------------- #
@pytest.mark.acceptance("gradient integrity")
def test_gradient_integrity(verdict, capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--seed", "0", "--eps", "1e-6"])
    seconds = time.perf_counter() - t0
    table = capsys.readouterr().out
    rows = [line.split() for line in table.splitlines()[1:]]
    worst = max(float(r[1]) for r in rows)
    with capsys.disabled():
        print("\n" + table)
    ok = verdict(
        code == 0 and seconds < 300 and all(r[-1] == "pass" for r in rows),
        f"{len(rows)} components incl. end-to-end, worst rel err {worst:.2e}, {seconds:.0f}s",
    )
    assert ok


# --------------------------------------------------------------------------- #
# shape law
# --------------------------------------------------------------------------- #
@pytest.mark.acceptance("shape law")
def test_shape_law(verdict):
    model = PRFNet(ModelConfig(), seed=0).eval()
    rng = np.random.default_rng(0)
    O, A, B = (Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)) for _ in range(3))
    _, pyramids, diffs, state = model.forward_detailed(O, A, B)
    levels = [(t.shape[1], t.shape[2], t.shape[3]) for t in pyramids[0].levels]
    diff_ch = [d.shape[1] for d in diffs.diffs]
    fused = state.fused[0].shape[1:]
    ok = (
        levels == [(32, 32, 32), (64, 16, 16), (128, 8, 8), (256, 4, 4)]
        and diff_ch == [64, 128, 256, 512]
        and fused == (64, 32, 32)
    )
    verdict(ok, f"pyramid {levels}, diff channels {diff_ch}, fusion {fused}")
    assert ok


# --------------------------------------------------------------------------- #
# exact invariants
# --------------------------------------------------------------------------- #
@pytest.mark.acceptance("exact invariants")
def test_exact_invariants(verdict, tmp_path, small_dataset):
    checks = {}
    rng = np.random.default_rng(1)
    model = PRFNet(ModelConfig(), seed=1).eval()
    O, A, B = (Tensor(rng.uniform(0, 1, (2, 3, 64, 64)).astype(np.float32)) for _ in range(3))

    _, _, d, _ = model.forward_detailed(O, O, B)
    zero_bias = all(not np.any(c.bias.data) for c in model.head.cross.convs)
    checks["zero-diff collapse"] = zero_bias and all(not np.any(x.data) for x in d.diffa)

    _, _, d1, s1 = model.forward_detailed(O, A, B)
    _, _, d2, _ = model.forward_detailed(O, B, A)
    swap = True
    for x, y in zip(d1.diffs, d2.diffs):
        c = x.shape[1] // 2
        swap &= np.array_equal(x.data[:, :c], y.data[:, c:]) and np.array_equal(x.data[:, c:], y.data[:, :c])
    checks["A/B swap"] = swap
    checks["fusion weights in (0,1)"] = all(np.all((w.data > 0) & (w.data < 1)) for w in s1.weights)

    sym = ident = True
    for _ in range(20):
        x, y = rng.uniform(0, 1, (2, 3, 32, 32))
        sym &= baselines.ssim(x, y) == baselines.ssim(y, x) and baselines.psnr(x, y) == baselines.psnr(y, x)
        ident &= baselines.ssim(x, x) == pytest.approx(1.0, abs=1e-12) and baselines.ssim(x, y) < 1.0
        ident &= baselines.psnr(x, x) == math.inf and math.isfinite(baselines.psnr(x, y))
    checks["metric symmetry"] = sym
    checks["metric identity maximum"] = ident

    a, b = tmp_path / "a.prfn", tmp_path / "b.prfn"
    save_checkpoint(a, model, "coarse", 0, 1)
    loaded, meta = load_checkpoint(a)
    save_checkpoint(b, loaded, meta.stage, meta.epoch, meta.seed)
    checks["checkpoint round trip"] = a.read_bytes() == b.read_bytes()

    trained = PRFNet(ModelConfig(), seed=2)
    train_stage(trained, small_dataset, TrainConfig.for_stage("coarse", epochs=1, lr0=0.01, batch_size=8))
    before = _backbone_hash(trained)
    train_stage(trained, small_dataset, TrainConfig.for_stage("fine", epochs=2, lr0=0.01, batch_size=8))
    checks["backbone frozen in fine"] = _backbone_hash(trained) == before

    failed = [k for k, v in checks.items() if not v]
    verdict(not failed, f"{len(checks) - len(failed)}/{len(checks)} hold" + (f"; broken: {failed}" if failed else ""))
    assert not failed


# --------------------------------------------------------------------------- #
# oracle equivalence
# --------------------------------------------------------------------------- #
@pytest.mark.acceptance("oracle equivalence")
def test_oracle_equivalence(verdict):
    n = 20
    worst = {"conv": 0.0, "linear": 0.0, "pool": 0.0, "ssim": 0.0}
    with precision("f64"):
        for i in range(n):
            rng = np.random.default_rng(1000 + i)
            k, stride = int(rng.choice([1, 3])), int(rng.integers(1, 3))
            pad = int(rng.integers(0, k // 2 + 1))
            x = rng.standard_normal((2, 3, 7, 6))
            w, b = rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
            worst["conv"] = max(worst["conv"], oracles.rel_err(got, oracles.conv2d(x, w, b, stride, pad)))

            xl, wl, bl = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
            got = ops.linear(Tensor(xl), Tensor(wl), Tensor(bl)).data
            worst["linear"] = max(worst["linear"], oracles.rel_err(got, oracles.linear(xl, wl, bl)))

            got = ops.avg_pool2d(Tensor(x), 3, 2, pad=1).data
            e1 = oracles.rel_err(got, oracles.avg_pool2d(x, 3, 2, pad=1))
            e2 = oracles.rel_err(ops.global_avg_pool(Tensor(x)).data, oracles.global_avg_pool(x))
            worst["pool"] = max(worst["pool"], e1, e2)

            xs = rng.uniform(0, 1, (14, 15))
            ys = np.clip(xs + 0.2 * rng.standard_normal(xs.shape), 0, 1)
            worst["ssim"] = max(worst["ssim"], oracles.rel_err(baselines.ssim(xs, ys), oracles.ssim(xs, ys)))
    x = np.random.default_rng(0).uniform(0.1, 0.9, (3, 64, 64))
    p = baselines.psnr(x, x + 1 / 16)
    ok = max(worst.values()) < 1e-6 and abs(p - 24.0824) < 1e-3
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(ok, f"{n} instances each, worst rel err {detail}; PSNR uniform diff {p:.4f} dB")
    assert ok


# --------------------------------------------------------------------------- #
# desk-scale training and the progressive-vs-joint ablation
# --------------------------------------------------------------------------- #
@pytest.fixture(scope="module")
def protocol_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("protocol")
    train = data.generate_synthetic_dataset(2000, root / "train", size=64, seed=100)
    val = data.generate_synthetic_dataset(500, root / "val", size=64, seed=200)
    return data.TripletDataset.from_manifest(train), data.TripletDataset.from_manifest(val)


@pytest.fixture(scope="module")
def protocol_runs(protocol_data, request):
    """Coarse then fine for every seed; returns per-seed (accuracy, seconds, model)."""
    cfg = load_config(TOY_INI, check_paths=False)
    train, val = protocol_data
    runs = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        model = PRFNet(cfg.model, seed=seed)
        train_stage(model, train, cfg.stage("coarse", seed=seed))
        coarse_acc = evaluate_accuracy(model, val)
        train_stage(model, train, cfg.stage("fine", seed=seed))
        seconds = time.perf_counter() - t0
        acc = evaluate_accuracy(model, val)
        runs[seed] = (acc, seconds, model)
        _progress(request, f"  seed {seed}: coarse {coarse_acc:.3f}, after fine {acc:.3f}, {seconds / 60:.1f} min")
    return runs


@pytest.mark.slow
@pytest.mark.acceptance("desk-scale training")
def test_desk_scale_training(verdict, protocol_runs):
    good = [s for s, (acc, sec, _) in protocol_runs.items() if acc >= TARGET_ACC and sec < SEED_BUDGET_S]
    detail = ", ".join(f"seed {s} {acc:.3f} in {sec / 60:.1f} min" for s, (acc, sec, _) in protocol_runs.items())
    ok = verdict(len(good) >= 4, f"{len(good)}/5 seeds reach {TARGET_ACC} within 30 min ({detail})")
    assert ok


@pytest.mark.slow
def test_trained_model_prefers_exact_copy(protocol_runs, protocol_data):
    _, val = protocol_data
    _, _, model = protocol_runs[0]
    copy = data.TripletDataset(val.ref, val.ref, val.dis_b, np.zeros(len(val), dtype=int), val.soft)
    q = predict(model, copy)
    assert np.mean(q <= 0.5) >= 0.95


@pytest.mark.slow
@pytest.mark.acceptance("ablation progressive vs joint")
def test_ablation_progressive_vs_mtl(verdict, protocol_runs, protocol_data, request):
    cfg = load_config(TOY_INI, check_paths=False)
    train, val = protocol_data
    model = PRFNet(cfg.model, seed=0)
    t0 = time.perf_counter()
    train_stage(model, train, cfg.stage("mtl", seed=0))
    mtl_acc = evaluate_accuracy(model, val)
    prog_acc = protocol_runs[0][0]
    order = "progressive > joint" if prog_acc > mtl_acc else "progressive <= joint"
    # reported, not gated: the direction at toy scale is recorded either way
    verdict(True, f"seed 0: progressive {prog_acc:.3f}, joint {mtl_acc:.3f} ({order}, {(time.perf_counter() - t0) / 60:.1f} min)")


# --------------------------------------------------------------------------- #
# baseline sanity
# --------------------------------------------------------------------------- #
@pytest.mark.acceptance("baseline sanity")
def test_baseline_sanity(verdict, tmp_path):
    manifest = data.generate_synthetic_dataset(500, tmp_path, size=64, kinds=("gaussian_noise",), seed=5)
    ds = data.TripletDataset.from_manifest(manifest)
    acc, _ = baselines.baseline_accuracy((ds.triplet(i) for i in range(len(ds))), "psnr")

    sweeps = {"psnr": "gaussian_noise", "ssim": "gaussian_noise", "msssim": "gaussian_blur"}
    violations = {}
    for metric, kind in sweeps.items():
        fn = baselines.get_metric(metric)
        count = 0
        for seed in range(10):
            ref = data.make_reference(64, "procedural-texture", np.random.default_rng(seed))
            levels = data.SEVERITY_LEVELS[kind]
            scores = [fn(ref, data.apply_distortion(ref, data.DistortionSpec(kind, s, seed))) for s in levels]
            count += sum(b >= a for a, b in zip(scores, scores[1:]))
        violations[f"{metric}/{kind}"] = count
    ok = acc >= 0.99 and not any(violations.values())
    verdict(ok, f"PSNR on noise-only triplets {acc:.3f}; sweep violations {violations}")
    assert ok


# --------------------------------------------------------------------------- #
# determinism
# --------------------------------------------------------------------------- #
@pytest.mark.acceptance("determinism")
def test_train_determinism(verdict, tmp_path, capsys):
    train = data.generate_synthetic_dataset(48, tmp_path / "d", size=64, seed=9)
    text = TOY_INI.read_text().replace("../data/train/manifest.jsonl", str(train))
    text = text.replace("../data/val/manifest.jsonl", str(train))
    text = text.replace("epochs = 15", "epochs = 2")
    columns = []
    for run in ("a", "b"):
        ini = tmp_path / f"{run}.ini"
        ini.write_text(text.replace("../runs/", f"{run}/"))
        assert main(["train", "--config", str(ini), "--stage", "coarse", "--seed", "3"]) == 0
        with open(tmp_path / run / "reports" / "coarse_record.csv", newline="") as fh:
            columns.append([row[1] for row in csv.reader(fh)])
    capsys.readouterr()
    ok = columns[0] == columns[1] and len(columns[0]) == 3
    verdict(ok, f"two runs, losses {columns[0][1:]} vs {columns[1][1:]}")
    assert ok
