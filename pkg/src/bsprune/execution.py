"""Running a :class:`NetGraph`: forward passes with a tape and reverse-mode
gradients for the trainable set only.

Gradients flow through frozen kernels (convolutions, ``vbar_t``) but are
never produced for them.
"""
from __future__ import annotations

import numpy as np

from . import engine
from .errors import ShapeError


class Tape:
    """Caches recorded by one forward pass; owned by a single thread."""

    def __init__(self, graph, mode):
        self.graph = graph
        self.mode = mode
        self.caches = {}
        self.shapes = {}
        self.complete = False


def _requires_grad(g, collect=()):
    need = {}
    for node in g:
        need[node.id] = (bool(node.trainable) or node.id in collect
                         or any(need[i] for i in node.inputs))
    return need


def forward(g, x, mode="infer", tape=None, update_stats=True, rng=None, collect=()):
    """Logits of ``g`` on the NHWC batch ``x``.

    ``mode="train"`` uses batch statistics in BN (moving statistics are
    updated unless ``update_stats`` is False) and applies dropout when the
    dense layer carries a ``dropout`` rate and ``rng`` is given. Node outputs
    named in ``collect`` are returned as a dict alongside the logits.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != g.input_shape:
        raise ShapeError(f"input batch {x.shape} does not match graph input {g.input_shape}")
    record = tape is not None
    values = {}
    consumers_left = {nid: 0 for nid in g.nodes}
    for node in g:
        for i in node.inputs:
            consumers_left[i] += 1
    keep = set(collect) | {g.output_id}
    for node in g:
        ins = [values[i] for i in node.inputs]
        out, cache = _forward_node(node, ins, x, mode, update_stats, rng, record)
        values[node.id] = out
        if record:
            tape.caches[node.id] = cache
            tape.shapes[node.id] = out.shape
        for i in node.inputs:
            consumers_left[i] -= 1
            if consumers_left[i] == 0 and i not in keep:
                del values[i]
    if record:
        tape.complete = True
    logits = values[g.output_id]
    if collect:
        return logits, {nid: values[nid] for nid in collect}
    return logits


def _forward_node(node, ins, x, mode, update_stats, rng, record):
    p = node.params
    a = node.attrs
    k = node.kind
    if k == "input":
        return x, None
    h = ins[0]
    if k == "conv":
        return engine.conv2d_forward(h, p["kernel"], p.get("bias"), a.get("strides", 1),
                                     a.get("padding", "same"), return_cache=True)
    if k == "basis_scaling_conv":
        return engine.basis_scaling_forward(h, p["s"], p["vbar_t"], p.get("bias"), return_cache=True)
    if k == "bn":
        return engine.batchnorm_forward(h, p["gamma"], p["beta"], p["moving_mean"], p["moving_var"],
                                        mode=mode, update_stats=update_stats, return_cache=True)
    if k == "relu":
        return np.maximum(h, 0.0), (h > 0 if record else None)
    if k == "maxpool":
        return engine.maxpool_forward(h, a["pool_size"], a.get("strides"), a.get("padding", "valid"),
                                      return_cache=True)
    if k == "avgpool":
        return engine.avgpool_forward(h, a["pool_size"], a.get("strides"), a.get("padding", "valid"),
                                      return_cache=True)
    if k == "global_avg_pool":
        return engine.global_avg_pool(h), h.shape
    if k == "add":
        out = ins[0].copy()
        for other in ins[1:]:
            out += other
        return out, len(ins)
    if k == "concat":
        return np.concatenate(ins, axis=-1), [t.shape[-1] for t in ins]
    if k == "dense":
        rate = a.get("dropout", 0.0)
        if rate:
            if mode == "train" and rng is not None:
                mask = rng.random(h.shape) >= rate
                h = h * mask
            else:
                mask = None
                h = h * (1.0 - rate)
        else:
            mask = None
        out = h @ p["kernel"].astype(np.float64) + p["bias"]
        return out, (h, mask, rate, mode == "train" and rng is not None)
    raise ShapeError(f"cannot execute node kind {k!r}")


def backward(tape, dlogits, collect=()):
    """Gradients of every trainable parameter given d(loss)/d(logits).

    Returns ``{(node_id, param): grad}``; when ``collect`` names nodes, also
    returns their output gradients as a second dict.
    """
    if tape is None or not tape.complete:
        raise RuntimeError("backward called without a recorded forward pass")
    g = tape.graph
    need = _requires_grad(g, collect)
    grads = {}
    node_grads = {g.output_id: np.asarray(dlogits, dtype=np.float64)}
    collected = {}
    for node in reversed(list(g)):
        dout = node_grads.pop(node.id, None)
        if node.id in collect:
            collected[node.id] = dout if dout is not None else np.zeros(tape.shapes[node.id])
        if dout is None or not need[node.id]:
            continue
        dins, pgrads = _backward_node(node, tape.caches[node.id], dout)
        for name, value in pgrads.items():
            if name in node.trainable:
                grads[(node.id, name)] = value
        for src, din in zip(node.inputs, dins):
            if din is None or not need[src]:
                continue
            if src in node_grads:
                node_grads[src] = node_grads[src] + din
            else:
                node_grads[src] = din
    for key in g.trainable_set():
        grads.setdefault(key, np.zeros(g[key[0]].params[key[1]].shape))
    if collect:
        return grads, collected
    return grads


def _backward_node(node, cache, dout):
    k = node.kind
    if k == "conv":
        return [engine.conv2d_backward_input(dout, cache)], {}
    if k == "basis_scaling_conv":
        dz, ds = engine.basis_scaling_backward(dout, cache)
        return [dz], {"s": ds}
    if k == "bn":
        dx, dgamma, dbeta = engine.batchnorm_backward(dout, cache)
        return [dx], {"gamma": dgamma, "beta": dbeta}
    if k == "relu":
        return [dout * cache], {}
    if k == "maxpool":
        return [engine.maxpool_backward(dout, cache)], {}
    if k == "avgpool":
        return [engine.avgpool_backward(dout, cache)], {}
    if k == "global_avg_pool":
        return [engine.global_avg_pool_backward(dout, cache)], {}
    if k == "add":
        return [dout] * cache, {}
    if k == "concat":
        splits = np.cumsum(cache)[:-1]
        return np.split(dout, splits, axis=-1), {}
    if k == "dense":
        h, mask, rate, dropped = cache
        dkernel = h.T @ dout
        dbias = dout.sum(axis=0)
        dh = dout @ node.params["kernel"].astype(np.float64).T
        if rate:
            dh = dh * mask if dropped else dh * (1.0 - rate)
        return [dh], {"kernel": dkernel, "bias": dbias}
    if k == "input":
        return [], {}
    raise ShapeError(f"cannot differentiate node kind {k!r}")


def loss_and_grads(g, x, labels, mode="train", update_stats=True, rng=None, collect=()):
    """Forward, softmax cross-entropy and backward in one call."""
    tape = Tape(g, mode)
    out = forward(g, x, mode, tape, update_stats=update_stats, rng=rng, collect=collect)
    logits, acts = out if collect else (out, {})
    loss, dlogits = engine.softmax_cross_entropy(logits, labels)
    if collect:
        grads, dacts = backward(tape, dlogits, collect)
        return loss, logits, grads, acts, dacts
    return loss, logits, backward(tape, dlogits)


def predict_logits(g, x, batch_size=256):
    outs = [forward(g, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, g[g.output_id].attrs.get("units", 0)))
