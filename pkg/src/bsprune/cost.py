"""Parameter and FLOP accounting.

FLOPs are multiply-accumulates (1 MAC = 1 FLOP). Only convolutions,
basis-scaling 1x1 convolutions and dense layers contribute; BN, ReLU and
pooling count as zero. Counts come from layer attributes and inferred shapes,
so structural graphs without weights are counted exactly like materialized ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

from .graph import COUNTED, param_shapes


@dataclass
class CostReport:
    params: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    trainable: int = 0
    input_shape: tuple = ()

    @property
    def total_params(self):
        return sum(self.params.values())

    @property
    def total_flops(self):
        return sum(self.flops.values())


def _in_shapes(g, shapes, node):
    return [shapes[i] for i in node.inputs]


def layer_params(node, in_shapes):
    shapes = param_shapes(node, in_shapes)
    return sum(prod(shapes[name]) for name in COUNTED.get(node.kind, ()) if name in shapes)


def layer_flops(node, in_shapes, out_shape):
    if node.kind == "conv":
        kh, kw = node.attrs["kernel_size"]
        return out_shape[0] * out_shape[1] * kh * kw * in_shapes[0][-1] * out_shape[-1]
    if node.kind == "basis_scaling_conv":
        return prod(out_shape[:-1]) * node.attrs["rank"] * out_shape[-1]
    if node.kind == "dense":
        return in_shapes[0][-1] * out_shape[-1]
    return 0


def cost_report(g, input_shape=None):
    if input_shape is not None and tuple(input_shape) != g.input_shape:
        g = g.with_input_shape(input_shape)
    shapes = g.infer_shapes()
    report = CostReport(input_shape=g.input_shape)
    for node in g:
        ins = _in_shapes(g, shapes, node)
        p = layer_params(node, ins)
        f = layer_flops(node, ins, shapes[node.id])
        if p or node.kind in COUNTED:
            report.params[node.id] = p
        if f or node.kind in COUNTED:
            report.flops[node.id] = f
        report.trainable += sum(prod(s) for name, s in param_shapes(node, ins).items()
                                if name in node.trainable)
    return report


def count_params(g):
    return cost_report(g)


def count_flops(g, input_shape=None):
    return cost_report(g, input_shape)


def trainable_param_count(g):
    return cost_report(g).trainable


def conv_layer_count(g):
    return len(g.conv_layers())
