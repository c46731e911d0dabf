"""Basis pruning and double pruning as graph surgery.

Surviving channels and basis vectors are never reordered, so a pruned graph
computes exactly what the unpruned graph computes with the removed scaling
factors (or channels) set to zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .channels import propagate_masks, provenance
from .cost import cost_report
from .errors import PruningError
from .graph import LayerNode, NetGraph
from .head import replace_head
from .importance import keep_masks


@dataclass
class PruneMask:
    basis_keep: dict = field(default_factory=dict)
    channel_keep: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    removed: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({
            "provenance": self.provenance,
            "basis_keep": {k: np.flatnonzero(v).tolist() for k, v in self.basis_keep.items()},
            "basis_size": {k: int(v.size) for k, v in self.basis_keep.items()},
            "channel_keep": {k: np.flatnonzero(v).tolist() for k, v in self.channel_keep.items()},
            "channel_size": {k: int(v.size) for k, v in self.channel_keep.items()},
            "removed": self.removed,
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)

        def expand(kept, sizes):
            out = {}
            for k, idx in kept.items():
                v = np.zeros(sizes[k], dtype=bool)
                v[idx] = True
                out[k] = v
            return out

        return cls(expand(d["basis_keep"], d["basis_size"]),
                   expand(d["channel_keep"], d["channel_size"]),
                   d.get("provenance", {}), d.get("removed", []))


def _clone(node, **changes):
    n = LayerNode(node.id, node.kind, node.inputs, dict(node.attrs),
                  {k: v.copy() for k, v in node.params.items()}, node.trainable)
    for k, v in changes.items():
        setattr(n, k, v)
    return n


def _slice_pair(u_node, s_node, keep):
    r_p = int(keep.sum())
    u_node.attrs["filters"] = r_p
    s_node.attrs["rank"] = r_p
    if "kernel" in u_node.params:
        u_node.params["kernel"] = np.ascontiguousarray(u_node.params["kernel"][..., keep])
    for name in ("s", "sigma"):
        if name in s_node.params:
            s_node.params[name] = s_node.params[name][keep].copy()
    if "vbar_t" in s_node.params:
        s_node.params["vbar_t"] = np.ascontiguousarray(s_node.params["vbar_t"][keep])


def apply_basis_masks(g, keeps, seed=0):
    """Remove basis vectors where ``keeps[layer]`` is False.

    A pair left with no basis vectors removes itself and every layer after
    it; the classifier is then re-attached to the last surviving activation.
    """
    nodes = {nid: _clone(n) for nid, n in g.nodes.items()}
    pair_ids = [n.id for n in g if n.kind == "basis_scaling_conv"]
    emptied = [pid for pid in pair_ids if pid in keeps and not keeps[pid].any()]
    if emptied and emptied[0] == pair_ids[0]:
        raise PruningError(f"model destroyed: every basis vector of the first layer {pair_ids[0]!r} "
                           "would be removed")
    for pid in pair_ids:
        keep = keeps.get(pid)
        if keep is None or not keep.any():
            continue
        s_node = nodes[pid]
        if keep.shape != (s_node.attrs["rank"],):
            raise PruningError(f"basis mask for {pid!r} has shape {keep.shape}, "
                               f"expected ({s_node.attrs['rank']},)")
        _slice_pair(nodes[s_node.attrs["pair"]], s_node, keep)
    pruned = NetGraph(nodes.values(), g.input_shape, g.output_id, g.name)
    removed = []
    if emptied:
        pruned, removed = _cascade(pruned, g[emptied[0]].attrs["pair"], seed)
    return pruned, removed


def _cascade(g, cut_id, seed):
    order = list(g.nodes)
    before = order[: order.index(cut_id)]
    activations = [nid for nid in before if g[nid].kind == "relu"]
    if not activations:
        activations = [nid for nid in before if g[nid].kind in ("bn", "conv", "basis_scaling_conv")]
    feature = activations[-1]
    keep = g.ancestors(feature)
    num_classes = g[g.output_id].attrs["units"]
    trunk = NetGraph([g[nid] for nid in order if nid in keep], g.input_shape, feature, g.name)
    head = replace_head(trunk, num_classes, seed=seed)
    removed = [nid for nid in order if nid not in keep]
    return head, removed


def basis_prune(g, table, threshold, seed=0):
    """Drop basis vectors whose normalized score is below ``threshold``."""
    if table.target != "basis":
        raise ValueError("basis pruning needs a basis-mode importance table")
    keeps = keep_masks(table, threshold)
    pruned, removed = apply_basis_masks(g, keeps, seed)
    mask = PruneMask(basis_keep=keeps, removed=removed,
                     provenance={"method": table.method, "threshold": float(threshold),
                                 "kind": "basis"})
    return pruned, mask


def apply_channel_masks(g, masks):
    """Remove producer output channels and the matching downstream input slices."""
    prov = provenance(g)
    keeps = propagate_masks(g, masks, prov)
    out = []
    for node in g:
        n = _clone(node)
        p = n.params
        in_keep = keeps[node.inputs[0]] if node.inputs else None
        own = keeps[node.id]
        if n.kind == "conv":
            if "kernel" in p:
                p["kernel"] = np.ascontiguousarray(p["kernel"][:, :, in_keep])
            if not n.is_basis:
                if "kernel" in p:
                    p["kernel"] = np.ascontiguousarray(p["kernel"][..., own])
                if "bias" in p:
                    p["bias"] = p["bias"][own].copy()
                n.attrs["filters"] = int(own.sum())
        elif n.kind == "basis_scaling_conv":
            if "vbar_t" in p:
                p["vbar_t"] = np.ascontiguousarray(p["vbar_t"][:, own])
            if "bias" in p:
                p["bias"] = p["bias"][own].copy()
            n.attrs["filters"] = int(own.sum())
        elif n.kind == "bn":
            for name in list(p):
                p[name] = p[name][in_keep].copy()
        elif n.kind == "dense":
            if "kernel" in p:
                p["kernel"] = np.ascontiguousarray(p["kernel"][in_keep])
        out.append(n)
    pruned = NetGraph(out, g.input_shape, g.output_id, g.name)
    pruned.infer_shapes()
    return pruned, keeps


def double_prune(g, table, threshold):
    """Prune output channels of conv / basis-scaling layers below ``threshold``.

    Layers feeding an element-wise add are exempt; concatenations carry the
    per-source masks through at their offsets. Every layer keeps at least
    its best channel.
    """
    if table.target != "channel":
        raise ValueError("double pruning needs a channel-mode importance table")
    masks = keep_masks(table, threshold)
    for lid, keep in masks.items():
        if not keep.any():
            keep[int(np.argmax(table.normalized[lid]))] = True
    pruned, keeps = apply_channel_masks(g, masks)
    producer_keep = {lid: keeps[lid] for lid in table.raw if lid in keeps}
    mask = PruneMask(channel_keep=producer_keep,
                     provenance={"method": table.method, "threshold": float(threshold),
                                 "kind": "channel", "protected": sorted(table.protected)})
    return pruned, mask


def prune_report(before, after, input_shape=None):
    """Parameter and FLOP totals before and after, with pruning ratios."""
    b = cost_report(before, input_shape)
    a = cost_report(after, input_shape)
    layers = {}
    for lid in b.params:
        layers[lid] = {"params_before": b.params[lid], "params_after": a.params.get(lid, 0),
                       "flops_before": b.flops.get(lid, 0), "flops_after": a.flops.get(lid, 0)}
    return {
        "params_before": b.total_params,
        "params_after": a.total_params,
        "flops_before": b.total_flops,
        "flops_after": a.total_flops,
        "param_pr": pruning_ratio(b.total_params, a.total_params),
        "flop_pr": pruning_ratio(b.total_flops, a.total_flops),
        "trainable_after": a.trainable,
        "layers": layers,
    }


def pruning_ratio(before, after):
    return 1.0 - after / before if before else 0.0
