"""Importance scores for basis vectors and output channels.

Every method yields raw non-negative scores per layer; scores are then
normalized by the per-layer maximum so a single global threshold can be
derived from the fraction of items to remove.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channels import channel_producers, protected_producers, scaling_bn, source_activation
from .decomposition import fused_kernel
from .execution import loss_and_grads, forward

BASIS_METHODS = ("taylor_fo", "singular", "random", "reverse")
CHANNEL_METHODS = ("taylor_fo", "l1", "hrank")


@dataclass
class ImportanceTable:
    method: str
    target: str  # "basis" or "channel"
    raw: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict)
    protected: frozenset = frozenset()

    def __post_init__(self):
        if self.raw and not self.normalized:
            normalize_per_layer(self)

    @property
    def layers(self):
        return list(self.raw)

    def prunable_layers(self):
        return [lid for lid in self.raw if lid not in self.protected]

    def to_text(self):
        lines = [f"# method={self.method} target={self.target}",
                 "layer_id,index,raw,normalized"]
        for lid, raw in self.raw.items():
            for i, (r, n) in enumerate(zip(raw, self.normalized[lid])):
                lines.append(f"{lid},{i},{r:.9e},{n:.9e}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        method, target = "unknown", "basis"
        raw, norm = {}, {}
        for line in text.splitlines():
            if line.startswith("#"):
                fields = dict(part.split("=", 1) for part in line[1:].split())
                method, target = fields.get("method", method), fields.get("target", target)
                continue
            if not line or line.startswith("layer_id,"):
                continue
            lid, _, r, n = line.rsplit(",", 3)
            raw.setdefault(lid, []).append(float(r))
            norm.setdefault(lid, []).append(float(n))
        return cls(method, target, {k: np.array(v) for k, v in raw.items()},
                   {k: np.array(v) for k, v in norm.items()})


def normalize_per_layer(table):
    """Divide each layer's scores by that layer's maximum (all-zero stays zero)."""
    table.normalized = {}
    for lid, raw in table.raw.items():
        raw = np.asarray(raw, dtype=np.float64)
        peak = raw.max(initial=0.0)
        table.normalized[lid] = raw / peak if peak > 0 else np.zeros_like(raw)
    return table


def _batches(data, batch_size):
    x, y = data
    if len(x) == 0:
        raise ValueError("importance estimation needs a non-empty evaluation set")
    return [(x[i : i + batch_size], y[i : i + batch_size]) for i in range(0, len(x), batch_size)]


def taylor_fo_scores(g, eval_data, batch_size=64, target="basis"):
    """First-order Taylor importance ``(g * s)^2``, averaged over minibatches.

    Basis mode scores the entries of each ``s``. Channel mode scores output
    channels of every conv or basis-scaling layer through the gamma of the BN
    that directly follows it, or, when there is none, through an implicit
    unit gate on the layer output (``sum(a * dL/da)``). The graph is run in
    inference mode and left unchanged.
    """
    batches = _batches(eval_data, batch_size)
    if target == "basis":
        layers = {n.id: (n.id, "s") for n in g if n.kind == "basis_scaling_conv"}
        gates = {}
    else:
        layers, gates = {}, {}
        for pid in channel_producers(g):
            bn = scaling_bn(g, pid)
            if bn is not None:
                layers[pid] = (bn, "gamma")
            else:
                gates[pid] = pid
    sums = {lid: 0.0 for lid in list(layers) + list(gates)}
    for xb, yb in batches:
        if gates:
            _, _, grads, acts, dacts = loss_and_grads(g, xb, yb, mode="infer",
                                                      collect=tuple(gates.values()))
        else:
            _, _, grads = loss_and_grads(g, xb, yb, mode="infer")
        for lid, (nid, pname) in layers.items():
            value = g[nid].params[pname].astype(np.float64)
            sums[lid] = sums[lid] + (grads[(nid, pname)] * value) ** 2
        for lid, nid in gates.items():
            gate = np.einsum("bhwc,bhwc->c", acts[nid], dacts[nid])
            sums[lid] = sums[lid] + gate ** 2
    raw = {lid: np.asarray(total, dtype=np.float64) / len(batches) for lid, total in sums.items()}
    raw = {lid: raw[lid] for lid in _order(g, raw)}
    return ImportanceTable("taylor_fo", target, raw, protected=_protected(g, target))


def l1_scores(g):
    """Channel-mode L1 norm of each output filter.

    For a decomposed pair the filter is the effective kernel ``U S Vbar^T``.
    """
    raw = {}
    for pid in channel_producers(g):
        node = g[pid]
        if node.kind == "conv":
            kernel = node.params["kernel"].astype(np.float64)
        else:
            kernel = fused_kernel(g[node.attrs["pair"]], node)
        raw[pid] = np.abs(kernel).sum(axis=(0, 1, 2))
    return ImportanceTable("l1", "channel", raw, protected=_protected(g, "channel"))


def numerical_rank(maps, rel_tol=1e-6):
    """Rank of each trailing (h, w) matrix; singular values above max(h, w) * s_max * rel_tol."""
    maps = np.asarray(maps, dtype=np.float64)
    sv = np.linalg.svd(maps, compute_uv=False)
    top = sv[..., :1]
    threshold = max(maps.shape[-2:]) * top * rel_tol
    return ((sv > threshold) & (sv > 0)).sum(axis=-1)


def hrank_scores(g, eval_data, batch_size=64):
    """Average numerical rank of each channel's feature map over the images."""
    batches = _batches(eval_data, batch_size)
    sources = {pid: source_activation(g, pid) for pid in channel_producers(g)}
    totals = {pid: 0.0 for pid in sources}
    count = 0
    for xb, _ in batches:
        _, acts = forward(g, xb, "infer", collect=tuple(set(sources.values())))
        for pid, nid in sources.items():
            maps = np.moveaxis(acts[nid], -1, 1)  # (b, c, h, w)
            totals[pid] = totals[pid] + numerical_rank(maps).sum(axis=0)
        count += len(xb)
    raw = {pid: np.asarray(t, dtype=np.float64) / count for pid, t in totals.items()}
    return ImportanceTable("hrank", "channel", raw, protected=_protected(g, "channel"))


def baseline_scores(g, method, seed=0):
    """Data-free basis scores: singular values, their reversal, or random."""
    if method not in ("singular", "random", "reverse"):
        raise ValueError(f"unknown baseline method {method!r}")
    rng = np.random.default_rng(seed)
    raw = {}
    for node in g:
        if node.kind != "basis_scaling_conv":
            continue
        sigma = node.params["sigma"].astype(np.float64)
        if method == "singular":
            raw[node.id] = sigma.copy()
        elif method == "reverse":
            top = sigma.max(initial=0.0)
            raw[node.id] = top - sigma + 1e-6 * max(top, 1e-12)
        else:
            raw[node.id] = rng.uniform(0.0, 1.0, sigma.shape)
    return ImportanceTable(method, "basis", raw)


def score(g, method, eval_data=None, target="basis", seed=0, batch_size=64):
    """Dispatch on method name."""
    if method == "taylor_fo":
        return taylor_fo_scores(g, eval_data, batch_size, target)
    if target == "basis":
        if method not in BASIS_METHODS:
            raise ValueError(f"unknown basis importance method {method!r}")
        return baseline_scores(g, method, seed)
    if method == "l1":
        return l1_scores(g)
    if method == "hrank":
        return hrank_scores(g, eval_data, batch_size)
    raise ValueError(f"unknown channel importance method {method!r}")


def global_threshold(table, remove_fraction):
    """Threshold removing at most ``floor(fraction * N)`` pooled items.

    Scores of every prunable layer are pooled; the threshold is the
    ``(m+1)``-th smallest value and items strictly below it are pruned, so
    ties at the threshold survive. Fraction 0 gives ``-inf``.
    """
    if not 0 <= remove_fraction < 1:
        raise ValueError(f"remove_fraction must be in [0, 1), got {remove_fraction}")
    pooled = [table.normalized[lid] for lid in table.prunable_layers()]
    if not pooled:
        raise ValueError("importance table has no prunable layers")
    pooled = np.sort(np.concatenate(pooled))
    m = math.floor(remove_fraction * pooled.size + 1e-9)
    if m == 0:
        return -math.inf
    return float(pooled[m])


def keep_masks(table, threshold):
    """Per-layer keep vectors: score >= threshold. Protected layers keep all."""
    out = {}
    for lid, norm in table.normalized.items():
        if lid in table.protected:
            out[lid] = np.ones(norm.shape, dtype=bool)
        else:
            out[lid] = norm >= threshold
    return out


def layerwise_keep_masks(table, remove_fraction):
    """Keep vectors removing ``floor(fraction * r)`` lowest scores in every layer."""
    out = {}
    for lid, norm in table.normalized.items():
        keep = np.ones(norm.shape, dtype=bool)
        m = math.floor(remove_fraction * norm.size + 1e-9)
        if lid not in table.protected and m:
            keep[np.argsort(norm, kind="stable")[:m]] = False
        out[lid] = keep
    return out


def _protected(g, target):
    return frozenset(protected_producers(g)) if target == "channel" else frozenset()


def _order(g, scores):
    return [nid for nid in g.nodes if nid in scores]
