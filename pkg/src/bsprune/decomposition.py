"""Splitting convolutions into a basis convolution and a basis-scaling layer.

A conv with kernel ``W`` (reshaped to k x co) and bias ``b`` becomes

* a conv whose kernel is ``U`` (k x r, orthonormal columns), no bias, and
* a ``basis_scaling_conv`` holding ``s`` (length r, trainable, >= 0),
  ``vbar_t = diag(sigma) V^T`` (r x co) and ``b``.

With ``s = 1`` the pair computes exactly the original layer.
"""
from __future__ import annotations

import numpy as np

from .engine import basis_scaling_forward
from .errors import DecompositionError
from .factorization import compact_svd, reshape_weights, unreshape_weights
from .graph import LayerNode, NetGraph

S_INIT = 0.5


def decompose_conv(node, in_channels, s_init=S_INIT):
    """Return ``(u_conv, scaling)`` nodes replacing ``node``.

    ``in_channels`` is needed for structural nodes, where only the rank
    ``min(k, co)`` is derived.
    """
    if node.kind != "conv" or node.is_basis:
        raise DecompositionError(f"{node.id!r} is not an undecomposed convolution")
    a = node.attrs
    kh, kw = a["kernel_size"]
    co = a["filters"]
    k = kh * kw * in_channels
    r = min(k, co)
    u_id, s_id = f"{node.id}_basis", f"{node.id}_scaling"
    u_attrs = dict(a, filters=r, use_bias=False, role="basis", pair=s_id)
    s_attrs = {"rank": r, "filters": co, "use_bias": a.get("use_bias", True), "pair": u_id}
    u_params, s_params = {}, {}
    kernel = node.params.get("kernel")
    if kernel is not None:
        w = reshape_weights(kernel)
        if not np.any(w):
            raise DecompositionError(f"degenerate weight: kernel of {node.id!r} is all zeros")
        f = compact_svd(w)
        u_params["kernel"] = unreshape_weights(f.U, (kh, kw, in_channels, r)).astype(np.float32)
        s_params["s"] = np.full(r, s_init, dtype=np.float32)
        s_params["vbar_t"] = (f.sigma[:, None] * f.V.T).astype(np.float32)
        s_params["sigma"] = f.sigma.astype(np.float32)
        if "bias" in node.params:
            s_params["bias"] = node.params["bias"].copy()
    u_node = LayerNode(u_id, "conv", node.inputs, u_attrs, u_params)
    s_node = LayerNode(s_id, "basis_scaling_conv", (u_id,), s_attrs, s_params,
                       trainable=frozenset({"s"}))
    return u_node, s_node


def decompose_all(g, s_init=S_INIT):
    """Decompose every convolution of ``g`` (including 1x1s and shortcuts)."""
    shapes = g.infer_shapes()
    out, rename = [], {}
    for original in g:
        node = LayerNode(original.id, original.kind, tuple(rename.get(i, i) for i in original.inputs),
                         dict(original.attrs), {k: v.copy() for k, v in original.params.items()},
                         original.trainable)
        if node.kind == "conv" and not node.is_basis:
            u_node, s_node = decompose_conv(node, shapes[original.inputs[0]][-1], s_init)
            out += [u_node, s_node]
            rename[node.id] = s_node.id
        else:
            out.append(node)
    result = NetGraph(out, g.input_shape, rename.get(g.output_id, g.output_id), g.name)
    result.infer_shapes()
    return result


def pairs(g):
    """(u_conv, scaling) node pairs in topological order."""
    return [(g[n.attrs["pair"]], n) for n in g if n.kind == "basis_scaling_conv"]


def fused_kernel(u_node, s_node):
    u = u_node.params["kernel"].astype(np.float64)
    kh, kw, ci, r = u.shape
    m = reshape_weights(u) * s_node.params["s"].astype(np.float64) @ s_node.params["vbar_t"].astype(np.float64)
    return unreshape_weights(m, (kh, kw, ci, m.shape[1]))


def fuse_pair(u_node, s_node):
    """Collapse a decomposed pair back into one convolution (``U S Vbar^T``)."""
    if u_node.attrs.get("pair") != s_node.id or s_node.attrs.get("pair") != u_node.id:
        raise DecompositionError(f"{u_node.id!r} and {s_node.id!r} are not a decomposed pair")
    attrs = {k: v for k, v in u_node.attrs.items() if k not in ("role", "pair")}
    attrs.update(filters=s_node.attrs["filters"], use_bias=s_node.attrs.get("use_bias", True))
    params = {}
    if "kernel" in u_node.params:
        params["kernel"] = fused_kernel(u_node, s_node).astype(np.float32)
        if "bias" in s_node.params:
            params["bias"] = s_node.params["bias"].copy()
    base_id = s_node.id[: -len("_scaling")] if s_node.id.endswith("_scaling") else s_node.id
    return LayerNode(base_id, "conv", u_node.inputs, attrs, params)


def fuse_all(g):
    """Inverse of :func:`decompose_all`, for export and verification."""
    out, rename = [], {}
    for node in g:
        if node.is_basis:
            continue
        inputs = tuple(rename.get(i, i) for i in node.inputs)
        if node.kind == "basis_scaling_conv":
            fused = fuse_pair(g[node.attrs["pair"]], node)
            fused.inputs = tuple(rename.get(i, i) for i in fused.inputs)
            rename[node.id] = fused.id
            out.append(fused)
        else:
            out.append(LayerNode(node.id, node.kind, inputs, dict(node.attrs),
                                 {k: v.copy() for k, v in node.params.items()}, node.trainable))
    return NetGraph(out, g.input_shape, rename.get(g.output_id, g.output_id), g.name)


def scaling_output(z, node):
    """Forward pass of one basis-scaling layer on basis responses ``z``."""
    return basis_scaling_forward(z, node.params["s"], node.params["vbar_t"], node.params.get("bias"))
