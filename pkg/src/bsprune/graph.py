"""Network graphs: typed layer nodes in topological order.

A graph may be *structural* (attributes only, no weight arrays), which is
enough for shape inference and cost accounting on the full-size templates,
or *materialized* with float32 parameter arrays for execution.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .engine import output_extent
from .errors import ShapeError

KINDS = (
    "input", "conv", "basis_scaling_conv", "bn", "relu", "maxpool", "avgpool",
    "global_avg_pool", "add", "concat", "dense",
)
PRODUCERS = ("conv", "basis_scaling_conv")
# kinds whose output channel i is a function of input channel i only
CHANNELWISE = ("bn", "relu", "maxpool", "avgpool", "global_avg_pool")

FORMAT_VERSION = 1


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    trainable: frozenset = frozenset()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"node {self.id!r}: unknown kind {self.kind!r}")
        self.inputs = tuple(self.inputs)
        self.trainable = frozenset(self.trainable)

    @property
    def is_basis(self):
        """True for the U-convolution half of a decomposed pair."""
        return self.kind == "conv" and self.attrs.get("role") == "basis"

    def to_dict(self):
        return {
            "id": self.id,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "attrs": dict(self.attrs),
            "trainable": sorted(self.trainable),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["kind"], tuple(d.get("inputs", ())), dict(d.get("attrs", {})),
                   {}, frozenset(d.get("trainable", ())))


def param_shapes(node, in_shapes):
    """Shapes of every array a node owns, given its input shapes."""
    a = node.attrs
    if node.kind == "conv":
        kh, kw = a["kernel_size"]
        shapes = {"kernel": (kh, kw, in_shapes[0][-1], a["filters"])}
        if a.get("use_bias", True):
            shapes["bias"] = (a["filters"],)
        return shapes
    if node.kind == "basis_scaling_conv":
        r, co = a["rank"], a["filters"]
        shapes = {"s": (r,), "vbar_t": (r, co), "sigma": (r,)}
        if a.get("use_bias", True):
            shapes["bias"] = (co,)
        return shapes
    if node.kind == "bn":
        c = in_shapes[0][-1]
        return {name: (c,) for name in ("gamma", "beta", "moving_mean", "moving_var")}
    if node.kind == "dense":
        return {"kernel": (in_shapes[0][-1], a["units"]), "bias": (a["units"],)}
    return {}


# params that count toward model size (sigma is bookkeeping for the baselines)
COUNTED = {
    "conv": ("kernel", "bias"),
    "basis_scaling_conv": ("vbar_t", "s", "bias"),
    "bn": ("gamma", "beta", "moving_mean", "moving_var"),
    "dense": ("kernel", "bias"),
}


class NetGraph:
    """A DAG of :class:`LayerNode` with a single image input and one output."""

    def __init__(self, nodes, input_shape, output=None, name="graph"):
        self.nodes = {}
        for node in nodes:
            if node.id in self.nodes:
                raise ShapeError(f"duplicate node id {node.id!r}")
            for src in node.inputs:
                if src not in self.nodes:
                    raise ShapeError(
                        f"node {node.id!r} reads {src!r}, which is not defined before it")
            self.nodes[node.id] = node
        inputs = [n.id for n in self.nodes.values() if n.kind == "input"]
        if len(inputs) != 1:
            raise ShapeError(f"graph needs exactly one input node, found {len(inputs)}")
        self.input_id = inputs[0]
        self.output_id = output or next(reversed(self.nodes))
        if self.output_id not in self.nodes:
            raise ShapeError(f"output node {self.output_id!r} not in graph")
        self.input_shape = tuple(int(v) for v in input_shape)
        self.name = name
        self._check_reachable()

    def _check_reachable(self):
        seen = {self.input_id}
        for node in self.nodes.values():
            if node.kind != "input" and not node.inputs:
                raise ShapeError(f"node {node.id!r} has no inputs")
            if node.inputs and all(i in seen for i in node.inputs):
                seen.add(node.id)
            elif node.inputs:
                raise ShapeError(f"node {node.id!r} is not reachable from the input")

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes.values())

    def __getitem__(self, node_id):
        return self.nodes[node_id]

    def __repr__(self):
        return f"NetGraph({self.name!r}, {len(self.nodes)} nodes, input={self.input_shape})"

    @property
    def materialized(self):
        return any(n.params for n in self)

    def copy(self):
        return copy.deepcopy(self)

    def with_input_shape(self, input_shape):
        g = NetGraph(self.nodes.values(), input_shape, self.output_id, self.name)
        return copy.deepcopy(g)

    def consumers(self):
        out = {nid: [] for nid in self.nodes}
        for node in self:
            for src in node.inputs:
                out[src].append(node.id)
        return out

    def ancestors(self, node_id):
        keep, stack = set(), [node_id]
        while stack:
            nid = stack.pop()
            if nid not in keep:
                keep.add(nid)
                stack.extend(self.nodes[nid].inputs)
        return keep

    def of_kind(self, *kinds):
        return [n for n in self if n.kind in kinds]

    def conv_layers(self):
        """Original convolution layers: plain convs and decomposed pairs, counted once."""
        return [n for n in self if n.kind == "basis_scaling_conv"
                or (n.kind == "conv" and not n.is_basis)]

    def infer_shapes(self):
        """Per-node output shapes: ``(h, w, c)`` for maps, ``(c,)`` after pooling."""
        shapes = {}
        for node in self:
            ins = [shapes[i] for i in node.inputs]
            try:
                shapes[node.id] = _infer(node, ins, self.input_shape)
            except ShapeError as exc:
                raise ShapeError(f"node {node.id!r} ({node.kind}): {exc}") from None
        return shapes

    def trainable_set(self):
        return [(n.id, p) for n in self for p in sorted(n.trainable)]

    def to_dict(self):
        return {
            "format": FORMAT_VERSION,
            "name": self.name,
            "input": list(self.input_shape),
            "output": self.output_id,
            "nodes": [n.to_dict() for n in self],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format", FORMAT_VERSION) != FORMAT_VERSION:
            raise ShapeError(f"unsupported graph format {d.get('format')!r}")
        nodes = [LayerNode.from_dict(n) for n in d["nodes"]]
        for n in nodes:
            _normalize_attrs(n.attrs)
        return cls(nodes, d["input"], d.get("output"), d.get("name", "graph"))


def _normalize_attrs(attrs):
    for key in ("kernel_size",):
        if key in attrs:
            attrs[key] = tuple(attrs[key])


def _infer(node, ins, input_shape):
    a = node.attrs
    k = node.kind
    if k == "input":
        return tuple(input_shape)
    x = ins[0]
    if k in ("conv", "maxpool", "avgpool"):
        if len(x) != 3:
            raise ShapeError(f"expects a feature map, got {x}")
        if k == "conv":
            kh, kw = a["kernel_size"]
        else:
            kh = kw = a["pool_size"]
        stride = a.get("strides", 1 if k == "conv" else (kh))
        oh, _ = output_extent(x[0], kh, stride, a.get("padding", "same" if k == "conv" else "valid"))
        ow, _ = output_extent(x[1], kw, stride, a.get("padding", "same" if k == "conv" else "valid"))
        if k == "conv":
            _check_params(node, {"kernel": (kh, kw, x[2], a["filters"])})
            return (oh, ow, a["filters"])
        return (oh, ow, x[2])
    if k == "basis_scaling_conv":
        if x[-1] != a["rank"]:
            raise ShapeError(f"rank {a['rank']} but input has {x[-1]} channels")
        _check_params(node, {"vbar_t": (a["rank"], a["filters"])})
        return x[:-1] + (a["filters"],)
    if k == "bn":
        _check_params(node, {"gamma": (x[-1],)})
        return x
    if k == "relu":
        return x
    if k == "global_avg_pool":
        if len(x) != 3:
            raise ShapeError(f"expects a feature map, got {x}")
        return (x[2],)
    if k == "add":
        if any(s != x for s in ins):
            raise ShapeError(f"add inputs differ in shape: {ins}")
        return x
    if k == "concat":
        if any(len(s) != len(x) or s[:-1] != x[:-1] for s in ins):
            raise ShapeError(f"concat inputs differ in spatial extent: {ins}")
        return x[:-1] + (sum(s[-1] for s in ins),)
    if k == "dense":
        if len(x) != 1:
            raise ShapeError(f"dense expects a vector, got {x}")
        _check_params(node, {"kernel": (x[0], a["units"])})
        return (a["units"],)
    raise ShapeError(f"unknown kind {k!r}")


def _check_params(node, expected):
    for name, shape in expected.items():
        arr = node.params.get(name)
        if arr is not None and tuple(arr.shape) != tuple(shape):
            raise ShapeError(f"param {name} has shape {tuple(arr.shape)}, expected {tuple(shape)}")


# --- initialization --------------------------------------------------------

def init_params(graph, seed=0, only=None):
    """Materialize missing parameters in place (He-normal kernels, zero biases).

    ``only`` restricts initialization to the given node ids.
    """
    rng = np.random.default_rng(seed)
    shapes = graph.infer_shapes()
    for node in graph:
        if only is not None and node.id not in only:
            continue
        ins = [shapes[i] for i in node.inputs]
        for name, shape in param_shapes(node, ins).items():
            if name in node.params:
                continue
            node.params[name] = _initial_value(node, name, shape, rng)
    return graph


def _initial_value(node, name, shape, rng):
    if node.kind == "conv" and name == "kernel":
        fan_in = shape[0] * shape[1] * shape[2]
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    if node.kind == "dense" and name == "kernel":
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, shape).astype(np.float32)
    if name in ("gamma", "moving_var"):
        return np.ones(shape, dtype=np.float32)
    if name == "s":
        return np.full(shape, 0.5, dtype=np.float32)
    return np.zeros(shape, dtype=np.float32)
