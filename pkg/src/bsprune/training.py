"""Training loop, evaluation and BN statistics recomputation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import augment
from .engine import cosine_lr, sgd_step
from .errors import NumericError
from .execution import forward, loss_and_grads, predict_logits


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_min: float = 1e-4
    lr_max: float = 1e-1
    momentum: float = 0.9
    augment: bool = False
    shift: float = 0.15
    flip: bool = True
    seed: int = 0


def _param_views(g):
    return {(nid, name): g[nid].params[name] for nid, name in g.trainable_set()}


def train_stage(g, train, cfg=None, val=None):
    """Train a copy of ``g``; only parameters flagged trainable change.

    The learning rate follows one cosine cycle from ``lr_max`` to ``lr_min``
    over the stage's steps (restarting at every call). Basis scaling
    factors are clamped at zero after each update. Returns the trained
    graph and one history entry per epoch.
    """
    cfg = cfg or TrainConfig()
    g = g.copy()
    history = []
    if cfg.epochs <= 0:
        return g, history
    rng = np.random.default_rng(cfg.seed)
    x_all, y_all = train.as_tuple()
    n = len(y_all)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    params = _param_views(g)
    nonneg = {key for key in params if g[key[0]].kind == "basis_scaling_conv" and key[1] == "s"}
    velocities = {}
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_all[idx]
            if cfg.augment:
                xb = augment(xb, rng, cfg.shift, cfg.flip)
            loss, logits, grads = loss_and_grads(g, xb, y_all[idx], mode="train", rng=rng)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch} (loss {loss})")
            sgd_step(params, grads, velocities, cosine_lr(step, total, cfg.lr_min, cfg.lr_max),
                     cfg.momentum, nonneg)
            step += 1
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y_all[idx]).sum())
        entry = {"epoch": epoch, "loss": loss_sum / n, "accuracy": correct / n}
        if val is not None:
            entry["val_accuracy"] = evaluate(g, val)
        history.append(entry)
    return g, history


def evaluate(g, ds, batch_size=256):
    """Top-1 accuracy of ``g`` on a dataset in inference mode."""
    if len(ds) == 0:
        return float("nan")
    logits = predict_logits(g, ds.images, batch_size)
    return float((logits.argmax(axis=1) == ds.labels).mean())


def recompute_bn_stats(g, ds, batch_size=64):
    """Replace BN moving statistics with averages of batch statistics.

    One pass over ``ds`` in training mode; each BN gets the mean of its
    per-batch means and variances, weighted by batch size.
    """
    bns = [n for n in g if n.kind == "bn"]
    if not bns or len(ds) == 0:
        return g
    g = g.copy()
    inputs = tuple({n.inputs[0] for n in bns})
    sums = {n.id: [0.0, 0.0] for n in bns}
    for start in range(0, len(ds), batch_size):
        xb = ds.images[start : start + batch_size]
        _, acts = forward(g, xb, "train", update_stats=False, collect=inputs)
        for n in bns:
            a = acts[n.inputs[0]]
            axes = tuple(range(a.ndim - 1))
            sums[n.id][0] = sums[n.id][0] + a.mean(axis=axes) * len(xb)
            sums[n.id][1] = sums[n.id][1] + a.var(axis=axes) * len(xb)
    for n in bns:
        mean, var = sums[n.id]
        g[n.id].params["moving_mean"] = (mean / len(ds)).astype(np.float32)
        g[n.id].params["moving_var"] = (var / len(ds)).astype(np.float32)
    return g
