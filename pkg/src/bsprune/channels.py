"""Channel provenance: which producer channel every feature channel comes from.

Concatenations keep the offsets of their sources, so a mask on any producer
can be mapped to every downstream tensor. Producers whose channels reach an
element-wise ``add`` are protected and always keep every channel.
"""
from __future__ import annotations

import numpy as np

from .graph import CHANNELWISE


def channel_producers(g):
    """Nodes whose output channels can be pruned: convs and basis-scaling layers.

    The basis half of a decomposed pair is excluded; its outputs belong to
    basis pruning.
    """
    return [n.id for n in g if n.kind == "basis_scaling_conv"
            or (n.kind == "conv" and not n.is_basis)]


def provenance(g):
    """Per node, a list of ``(producer_id, channel)`` for each output channel."""
    shapes = g.infer_shapes()
    prov = {}
    for node in g:
        k = node.kind
        if k in CHANNELWISE or k == "add":
            prov[node.id] = prov[node.inputs[0]]
        elif k == "concat":
            prov[node.id] = [item for src in node.inputs for item in prov[src]]
        else:
            prov[node.id] = [(node.id, i) for i in range(shapes[node.id][-1])]
    return prov


def protected_producers(g, prov=None):
    """Producers feeding an element-wise merge; their outputs are never pruned."""
    prov = prov or provenance(g)
    out = set()
    for node in g:
        if node.kind == "add":
            for src in node.inputs:
                out.update(p for p, _ in prov[src])
    return out & set(channel_producers(g))


def propagate_masks(g, masks, prov=None):
    """Resolve producer masks into a keep vector for every node's output.

    Producers without a mask, protected producers and non-producers keep
    everything. The result is a fixed point: re-running on its own producer
    entries returns the same vectors.
    """
    prov = prov or provenance(g)
    protected = protected_producers(g, prov)
    resolved = {}
    for pid in channel_producers(g):
        width = len(prov[pid])
        mask = masks.get(pid)
        if mask is None or pid in protected:
            resolved[pid] = np.ones(width, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (width,):
                raise ValueError(f"mask for {pid!r} has shape {mask.shape}, expected ({width},)")
            resolved[pid] = mask.copy()
    keeps = {}
    for node in g:
        keeps[node.id] = np.array([resolved[p][i] if p in resolved else True
                                   for p, i in prov[node.id]], dtype=bool)
    for node in g:
        if node.kind == "add":
            assert all(keeps[src].all() for src in node.inputs), f"add {node.id!r} inputs pruned"
    return keeps


def source_activation(g, producer_id):
    """The node to read a producer's feature maps from: after its BN/ReLU chain."""
    consumers = g.consumers()
    nid = producer_id
    while len(consumers[nid]) == 1 and g[consumers[nid][0]].kind in ("bn", "relu"):
        nid = consumers[nid][0]
    return nid


def scaling_bn(g, producer_id):
    """The BN directly consuming a producer, if it is the only consumer."""
    cons = g.consumers()[producer_id]
    if len(cons) == 1 and g[cons[0]].kind == "bn":
        return cons[0]
    return None
