"""Classifier head replacement for transfer learning."""
from __future__ import annotations

from .errors import ShapeError
from .graph import LayerNode, NetGraph, init_params

FEATURE_KINDS = ("conv", "basis_scaling_conv", "bn", "relu", "add", "concat")
# kinds a feature map can pass through before it is considered normalized or not
_PASS_THROUGH = ("relu", "maxpool", "avgpool", "concat", "add")

TRAINABLE = {
    "bn": frozenset({"gamma", "beta"}),
    "basis_scaling_conv": frozenset({"s"}),
    "dense": frozenset({"kernel", "bias"}),
}


def _is_producer(node):
    return node.kind == "basis_scaling_conv" or (node.kind == "conv" and not node.is_basis)


def feature_node(g):
    """Last conv-related node: the point where the source classifier is cut off."""
    convs = [n.id for n in g if _is_producer(n)]
    if not convs:
        raise ShapeError("graph has no convolution layer")
    order = list(g.nodes)
    last_conv = order.index(convs[-1])
    tail = [nid for nid in order[last_conv:] if g[nid].kind in FEATURE_KINDS]
    return tail[-1]


def _normalized_downstream(node_id, nodes, consumers):
    stack = list(consumers.get(node_id, ()))
    if not stack:
        return False
    while stack:
        nid = stack.pop()
        kind = nodes[nid].kind
        if kind == "bn":
            continue
        if kind not in _PASS_THROUGH:
            return False
        nxt = consumers.get(nid, ())
        if not nxt:
            return False
        stack.extend(nxt)
    return True


def replace_head(g, num_classes, seed=0):
    """Cut the graph after its last conv block and attach GAP + dense.

    BN is inserted after every convolution whose output reaches another
    parametric layer (or the head) without passing through a BN. Afterwards
    only BN affine terms, basis scaling vectors and the new classifier are
    trainable.
    """
    feat = feature_node(g)
    keep = g.ancestors(feat)
    nodes = {nid: LayerNode(n.id, n.kind, n.inputs, dict(n.attrs),
                           {k: v.copy() for k, v in n.params.items()}, n.trainable)
             for nid, n in g.nodes.items() if nid in keep}
    consumers = {nid: [] for nid in nodes}
    for n in nodes.values():
        for src in n.inputs:
            consumers[src].append(n.id)

    ordered = []
    inserted = []
    rename = {}
    for nid, node in nodes.items():
        node.inputs = tuple(rename.get(i, i) for i in node.inputs)
        ordered.append(node)
        if _is_producer(node) and not _normalized_downstream(nid, nodes, consumers):
            bn_id = f"{nid}_bn"
            ordered.append(LayerNode(bn_id, "bn", (nid,)))
            inserted.append(bn_id)
            rename[nid] = bn_id
    feat = rename.get(feat, feat)

    for node in ordered:
        node.trainable = TRAINABLE.get(node.kind, frozenset())
    ordered.append(LayerNode("head_gap", "global_avg_pool", (feat,)))
    ordered.append(LayerNode("head_dense", "dense", ("head_gap",), {"units": int(num_classes)},
                             trainable=TRAINABLE["dense"]))
    out = NetGraph(ordered, g.input_shape, name=g.name)
    out.infer_shapes()
    if g.materialized:
        init_params(out, seed=seed, only=set(inserted) | {"head_dense"})
    return out
