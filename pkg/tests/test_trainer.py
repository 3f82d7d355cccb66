import numpy as np
import pytest

from ceilcomp.arch import parse_arch
from ceilcomp.data import make_dataset
from ceilcomp.errors import ConfigurationError, DataError, NumericalError
from ceilcomp.network import NetworkGraph
from ceilcomp.planner import CeilingPlan
from ceilcomp.projection import weight_matrix
from ceilcomp.trainer import (
    Checkpoint, PlateauScheduler, TrainConfig, evaluate, progressive_compress, reduce_on_plateau,
    train_baseline,
)

TOY = """
arch toy
input 1x6x6
Conv2d conv1 out=4 k=3 pad=1
ReLU relu1
Conv2d conv2 out=4 k=3 pad=1
ReLU relu2
GlobalAvgPool gap
Dense fc out=2
SoftmaxXent loss
"""


def separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    pattern = rng.standard_normal((1, 6, 6))
    x = (2 * y - 1)[:, None, None, None] * pattern + 0.3 * rng.standard_normal((n, 1, 6, 6))
    return make_dataset(x, y, 2, val_fraction=0.2, test_fraction=0.2, seed=seed)


def cfg(**kw):
    base = dict(lr=0.05, baseline_epochs=6, epochs_per_insertion=1, final_epochs=2, batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_base():
    ds = separable()
    net = NetworkGraph.from_arch(parse_arch(TOY), seed=1)
    ck = train_baseline(net, ds, cfg())
    ck.net.freeze()
    return ds, ck


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(final_epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(init="ones")


def test_config_file(tmp_path):
    path = tmp_path / "mnist.cfg"
    path.write_text("# desk-scale\nepochs_per_insertion = 2\nfinal_epochs = 8\nlr=0.02\nhflip = yes\n")
    c = TrainConfig.from_file(path, seed=4)
    assert (c.epochs_per_insertion, c.final_epochs, c.lr, c.hflip, c.seed) == (2, 8, 0.02, True, 4)
    path.write_text("warmup = 3\n")
    with pytest.raises(ConfigurationError, match="warmup"):
        TrainConfig.from_file(path)


def test_reduce_on_plateau():
    c = TrainConfig(plateau_patience=2, plateau_factor=0.1, lr=0.01)
    assert reduce_on_plateau([0.1, 0.2, 0.3, 0.4], c) == 0.01
    assert reduce_on_plateau([0.5, 0.5, 0.5], c) == pytest.approx(0.001)
    assert reduce_on_plateau([0.5, 0.5, 0.5], c, lr=1e-6) == 1e-6
    assert reduce_on_plateau([0.5, 0.5, 0.5], c, lr=5e-6) == 1e-6
    assert reduce_on_plateau([0.5, 0.50005, 0.50009], c) == pytest.approx(0.001)  # below 1e-4
    assert reduce_on_plateau([0.5], c) == 0.01


def test_scheduler_waits_patience_after_reduction():
    s = PlateauScheduler(TrainConfig(plateau_patience=2, lr=1.0, plateau_factor=0.5))
    lrs = [s.step(0.5) for _ in range(7)]
    assert lrs == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.125]


def test_evaluate_oracles():
    ds = make_dataset(np.zeros((30, 4)), np.arange(30) % 3, 3)
    net = NetworkGraph.from_arch(parse_arch("input 4\nDense fc out=3"))
    net.params["fc"].tensors["w"][:] = 0
    net.params["fc"].tensors["b"][:] = [0, 1, 0]
    assert evaluate(net, ds, "train") == pytest.approx(1 / 3)

    x = np.eye(4, dtype=np.float32)
    mem = NetworkGraph.from_arch(parse_arch("input 4\nDense fc out=4 bias=0"))
    mem.params["fc"].tensors["w"][:] = np.eye(4)
    assert evaluate(mem, (x, np.arange(4))) == 1.0

    rng = np.random.default_rng(0)
    xs, ys = rng.standard_normal((100, 4)).astype(np.float32), rng.integers(0, 4, 100)
    mem.params["fc"].tensors["w"][:] = rng.standard_normal((4, 4))
    count = sum(int(np.argmax(mem.params["fc"].tensors["w"] @ xi) == yi) for xi, yi in zip(xs, ys))
    assert evaluate(mem, (xs, ys), batch_size=7) == count / 100
    with pytest.raises(DataError):
        evaluate(mem, (xs[:0], ys[:0]))


def test_baseline_separable_and_deterministic(toy_base):
    ds, ck = toy_base
    assert ck.val_acc >= 0.99
    again = train_baseline(NetworkGraph.from_arch(parse_arch(TOY), seed=1), ds, cfg())
    for (k, a), (_, b) in zip(ck.net.named_tensors(), again.net.named_tensors()):
        assert a.tobytes() == b.tobytes(), k
    assert again.val_acc == max(r["val_acc"] for r in again.meta["log"])


def test_baseline_empty_dataset():
    ds = separable(20)
    ds.splits["train"] = ds.splits["train"][:0]
    with pytest.raises(DataError):
        train_baseline(NetworkGraph.from_arch(parse_arch(TOY)), ds, cfg())


def test_empty_plan_returns_base(toy_base):
    ds, ck = toy_base
    empty = CeilingPlan(1, 1.0, {}, {}, {}, 1.0)
    assert progressive_compress(ck, empty, ds, cfg()) is ck


def _rank2_base(ds, ck):
    """Base whose conv2 kernel is exactly rank 2 over its input channels."""
    net = ck.net.copy()
    w = net.params["conv2"].tensors["w"]
    what = weight_matrix(w).astype(np.float64)
    u, s, vt = np.linalg.svd(what, full_matrices=False)
    low = (u[:, :2] * s[:2]) @ vt[:2]
    net.params["conv2"].tensors["w"] = low.reshape(4, 3, 3, 4).transpose(0, 3, 1, 2).astype(np.float32).copy()
    net.touch()
    return Checkpoint(net, {}, 0, evaluate(net, ds, "val"), 0, 0.05)


def test_lossless_site_and_frozen_base(toy_base, tmp_path):
    ds, ck = toy_base
    base = _rank2_base(ds, ck)
    plan = CeilingPlan(72, 2.0, {"conv1": 2}, {}, {}, 1.0)
    log_path = tmp_path / "log.csv"
    out = progressive_compress(base, plan, ds, cfg(), log_path=log_path)
    rows = out.meta["log"]
    assert abs(rows[0]["val_acc"] - base.val_acc) <= 0.001  # no training yet
    assert rows[1]["val_acc"] >= rows[0]["val_acc"] - 0.002
    for key, arr in base.net.named_tensors():
        assert out.net.get(key).tobytes() == arr.tobytes(), key
    assert out.net.trainable_keys() == ["proj.conv1.s1", "proj.conv1.s2"]
    final = [r["val_acc"] for r in rows if r["stage"] == out.stage]
    assert out.val_acc == max(final)
    text = log_path.read_text().splitlines()
    assert text[0].startswith("# ") and "reset_per_stage" in text[0]
    assert text[1] == "stage,epoch,lr,train_loss,val_acc"
    assert len(text) == 2 + len(rows)


@pytest.mark.parametrize("init", ["svd", "pca", "random"])
def test_progressive_is_seeded(toy_base, init):
    ds, ck = toy_base
    plan = CeilingPlan(72, 2.0, {"conv1": 2, "conv2": 3}, {}, {}, 1.0)
    a = progressive_compress(ck, plan, ds, cfg(init=init))
    b = progressive_compress(ck, plan, ds, cfg(init=init))
    assert [lay.name for lay in a.net.layers if lay.kind == "Projection"] == ["proj.conv1", "proj.conv2"]
    for (k, x), (_, y) in zip(a.net.named_tensors(), b.net.named_tensors()):
        assert x.tobytes() == y.tobytes(), k


def test_tied_projections_stay_transposed(toy_base):
    ds, ck = toy_base
    plan = CeilingPlan(72, 2.0, {"conv1": 2}, {}, {}, 1.0)
    out = progressive_compress(ck, plan, ds, cfg(tie_projections=True))
    t = out.net.params["proj.conv1"].tensors
    assert np.array_equal(t["s1"], t["s2"].T)


def test_nan_loss_reports_stage(toy_base):
    ds, ck = toy_base
    bad = make_dataset(ds.images.copy(), ds.labels, 2, 0.2, 0.2, seed=0)
    bad.images[bad.splits["train"][0]] = np.nan
    plan = CeilingPlan(72, 2.0, {"conv1": 2}, {}, {}, 1.0)
    with pytest.raises(NumericalError, match="stage 1"):
        progressive_compress(ck, plan, bad, cfg())
