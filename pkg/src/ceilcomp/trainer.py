"""Baseline training and progressive projection fine-tuning on a frozen network."""
import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import DENSE, FLATTEN
from .data import LabeledDataset, batches
from .errors import ConfigurationError, DataError, NumericalError
from .network import backward, forward, predict, softmax_xent
from .projection import (
    foldable, insert_projection, pca_init, projection_name, random_init,
    resolve_site, site_consumers, svd_init, weight_matrix,
)

log = logging.getLogger(__name__)

LR_FLOOR = 1e-6
PLATEAU_THRESHOLD = 1e-4
LOG_COLUMNS = ("stage", "epoch", "lr", "train_loss", "val_acc")


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs_per_insertion: int = 4
    final_epochs: int = 20
    baseline_epochs: int = 10
    batch_size: int = 64
    plateau_patience: int = 2
    plateau_factor: float = 0.1
    seed: int = 0
    momentum: float = 0.9
    init: str = "svd"
    tie_projections: bool = False
    hflip: bool = False
    pca_samples: int = 256

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        for name in ("epochs_per_insertion", "final_epochs", "baseline_epochs", "batch_size", "plateau_patience"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.init not in ("svd", "pca", "random"):
            raise ConfigurationError(f"init must be svd, pca or random, got {self.init!r}")

    @classmethod
    def from_file(cls, path, **overrides):
        """Read ``key = value`` lines (``#`` comments) over the defaults."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in types:
                raise ConfigurationError(f"{path}:{lineno}: unknown setting {key!r}")
            typ = types[key]
            if typ in ("bool", bool):
                values[key] = val.lower() in ("1", "true", "yes", "on")
            elif typ in ("int", int):
                values[key] = int(val)
            elif typ in ("float", float):
                values[key] = float(val)
            else:
                values[key] = val
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class Checkpoint:
    net: object                      # NetworkGraph
    optimizer: dict = field(default_factory=dict)   # "layer.tensor" -> momentum buffer
    epoch: int = 0
    val_acc: float = 0.0
    stage: int = 0
    lr: float = 0.01
    meta: dict = field(default_factory=dict)

    def copy(self):
        return copy.deepcopy(self)


# ---------------------------------------------------------------- pieces


def evaluate(net, data, split="test", batch_size=1000):
    """Fraction of argmax-correct predictions on ``split`` (or an ``(images, labels)`` pair)."""
    images, labels = data.split(split) if isinstance(data, LabeledDataset) else data
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, images, batch_size) == np.asarray(labels)))


def reduce_on_plateau(history, cfg, lr=None):
    """New learning rate given validation accuracies (higher is better)."""
    lr = cfg.lr if lr is None else lr
    p = cfg.plateau_patience
    if len(history) > p:
        best_before = max(history[:-p])
        if max(history[-p:]) <= best_before + PLATEAU_THRESHOLD:
            return max(lr * cfg.plateau_factor, LR_FLOOR) if lr > LR_FLOOR else lr
    return lr


class PlateauScheduler:
    """Stateful wrapper: after each reduction the bad-epoch window starts again."""

    def __init__(self, cfg, lr=None):
        self.cfg = cfg
        self.lr = cfg.lr if lr is None else lr
        self.history = []
        self.anchor = 0

    def step(self, val_acc):
        self.history.append(val_acc)
        new = reduce_on_plateau(self.history[self.anchor:], self.cfg, self.lr)
        if new != self.lr:
            self.anchor = len(self.history) - 1
        self.lr = new
        return new


def sgd_step(net, grads, velocity, lr, momentum):
    for key, g in grads.items():
        v = velocity.get(key)
        v = g.copy() if v is None else momentum * v + g
        velocity[key] = v
        p = net.get(key)
        p -= np.float32(lr) * v
    net.touch()


def _hflip(x, seed):
    rng = np.random.default_rng(seed)
    flip = rng.random(len(x)) < 0.5
    x = x.copy()
    x[flip] = x[flip][..., ::-1]
    return x


def train_epoch(net, ds, cfg, velocity, lr, epoch_seed, tied=()):
    images, labels = ds.split("train")
    total, count = 0.0, 0
    for xb, yb, _ in batches(images, labels, cfg.batch_size, seed=epoch_seed, shuffle=True):
        if cfg.hflip:
            xb = _hflip(xb, epoch_seed + count)
        logits, cache = forward(net, xb)
        loss, g = softmax_xent(logits, yb)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} after {count} samples")
        grads = backward(net, cache, g)
        for pname in tied:
            # tied pairs train S1 = S2^T: one shared gradient
            g1, g2 = grads.pop(f"{pname}.s1"), grads.pop(f"{pname}.s2")
            grads[f"{pname}.s2"] = g2 + g1.T
        sgd_step(net, grads, velocity, lr, cfg.momentum)
        for pname in tied:
            t = net.params[pname].tensors
            t["s1"][...] = t["s2"].T
        total += loss * len(yb)
        count += len(yb)
    return total / count


def _write_log(path, rows, header_note):
    if path is None:
        return
    with open(path, "w", newline="") as f:
        f.write(f"# {header_note}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["stage"], r["epoch"], f"{r['lr']:.6g}", f"{r['train_loss']:.6f}", f"{r['val_acc']:.6f}"])


# ---------------------------------------------------------------- baseline


def train_baseline(net, ds, cfg, log_path=None):
    """Train every parameter; return the best-validation checkpoint."""
    if len(ds.splits.get("train", ())) == 0:
        raise DataError("training split is empty")
    net = net.copy()
    for entry in net.params.values():
        entry.trainable = True
    net.touch()
    velocity = {}
    sched = PlateauScheduler(cfg)
    best, rows = None, []
    for epoch in range(1, cfg.baseline_epochs + 1):
        lr = sched.lr
        loss = train_epoch(net, ds, cfg, velocity, lr, cfg.seed * 100003 + epoch)
        acc = evaluate(net, ds, "val")
        rows.append({"stage": 0, "epoch": epoch, "lr": lr, "train_loss": loss, "val_acc": acc})
        log.info("baseline epoch %d lr %.4g loss %.4f val %.4f", epoch, lr, loss, acc)
        sched.step(acc)
        if best is None or acc > best.val_acc:
            best = Checkpoint(net.copy(), copy.deepcopy(velocity), epoch, acc, 0, lr)
    best.meta["log"] = rows
    _write_log(log_path, rows, "phase=baseline")
    return best


# ---------------------------------------------------------------- progressive compression


def consumer_matrix(net, producer):
    """Stacked ``[rows, c]`` matrix through which the consumers read the site's channels, or None."""
    mats = []
    for cons in site_consumers(net, producer):
        if foldable(cons):
            mats.append(weight_matrix(net.params[cons.name].tensors["w"]))
        elif cons.kind == FLATTEN:
            nxt = site_consumers(net, cons.name)
            if len(nxt) != 1 or nxt[0].kind != DENSE:
                return None
            w = net.params[nxt[0].name].tensors["w"]
            c = net.shapes()[producer][0]
            mats.append(w.reshape(w.shape[0], c, -1).transpose(0, 2, 1).reshape(-1, c))
        else:
            return None
    return np.concatenate(mats) if mats else None


def site_samples(net, producer, images, n):
    _, cache = forward(net, images[:n])
    return list(cache.acts[producer])


def init_pair(net, site, k, ds, cfg, method=None):
    method = method or cfg.init
    rec = resolve_site(net, site)
    c = rec.shape[0]
    if method == "svd":
        mat = consumer_matrix(net, rec.producer)
        if mat is not None:
            w4 = mat.reshape(-1, 1, 1, c).transpose(0, 3, 1, 2)
            return svd_init(w4, k, site=site)
        method = "pca"
    if method == "pca":
        images, _ = ds.split("train")
        return pca_init(site_samples(net, rec.producer, images, cfg.pca_samples), k, site=site)
    return random_init(c, k, seed=cfg.seed, site=site)


def _run_phase(net, velocity, ds, cfg, stage, epochs, epoch_counter, rows, tied):
    """Train ``epochs`` epochs; return the best (net, velocity, val_acc, epoch) incl. the start state."""
    acc0 = evaluate(net, ds, "val")
    rows.append({"stage": stage, "epoch": 0, "lr": cfg.lr, "train_loss": float("nan"), "val_acc": acc0})
    best = (net.copy(), copy.deepcopy(velocity), acc0, epoch_counter)
    sched = PlateauScheduler(cfg)
    for e in range(1, epochs + 1):
        epoch_counter += 1
        lr = sched.lr
        try:
            loss = train_epoch(net, ds, cfg, velocity, lr, cfg.seed * 100003 + 7919 * stage + e, tied)
        except NumericalError as exc:
            raise NumericalError(f"stage {stage}, epoch {e}: {exc}") from None
        acc = evaluate(net, ds, "val")
        rows.append({"stage": stage, "epoch": e, "lr": lr, "train_loss": loss, "val_acc": acc})
        log.info("stage %d epoch %d lr %.4g loss %.4f val %.4f", stage, e, lr, loss, acc)
        sched.step(acc)
        if acc > best[2]:
            best = (net.copy(), copy.deepcopy(velocity), acc, epoch_counter)
    return best, epoch_counter


def progressive_compress(base, plan, ds, cfg, log_path=None):
    """Insert the plan's projections one at a time on the frozen base and fine-tune them.

    Each stage trains all inserted projections for ``epochs_per_insertion``
    epochs and continues from its best checkpoint; after the last insertion
    ``final_epochs`` more epochs run. The learning-rate schedule restarts at
    every stage. Returns the best checkpoint of the final phase.
    """
    if not plan.assignments:
        return base
    net = base.net.copy()
    net.freeze()
    net.touch()
    velocity = {}
    rows = []
    tied = []
    epochs = base.epoch
    stage = 0
    for stage, (site, k) in enumerate(plan.assignments.items(), 1):
        pair = init_pair(net, site, k, ds, cfg)
        net = insert_projection(net, pair)
        if cfg.tie_projections:
            tied.append(projection_name(site))
        best, epochs = _run_phase(net, velocity, ds, cfg, stage, cfg.epochs_per_insertion, epochs, rows, tied)
        net, velocity = best[0], best[1]
    (net, velocity, acc, epochs_at), _ = _run_phase(
        net, velocity, ds, cfg, stage + 1, cfg.final_epochs, epochs, rows, tied
    )
    _write_log(log_path, rows, "phase=progressive lr_schedule=reset_per_stage best=final_phase")
    meta = {"log": rows, "plan": plan.to_dict(), "init": cfg.init}
    return Checkpoint(net, velocity, epochs_at, acc, stage + 1, cfg.lr, meta)


def compress_single_site(base, site, k, ds, cfg, epochs):
    """Insert one projection and train it for ``epochs``; returns the best checkpoint."""
    net = base.net.copy()
    net.freeze()
    net = insert_projection(net, init_pair(net, site, k, ds, cfg))
    rows = []
    (net, velocity, acc, ep), _ = _run_phase(net, {}, ds, cfg, 1, epochs, 0, rows, ())
    return Checkpoint(net, velocity, ep, acc, 1, cfg.lr, {"log": rows})


__all__ = [
    "Checkpoint", "PlateauScheduler", "TrainConfig", "evaluate",
    "progressive_compress", "reduce_on_plateau", "train_baseline",
]
