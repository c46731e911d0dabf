"""Architecture templates and the architecture config format.

The full-size templates follow the Keras application layouts (convolution
biases in VGG-16 and ResNet-50, none in DenseNet-121) so that parameter
counts line up with published numbers. The ``tiny_*`` templates keep the
same topological features (plain chain, residual adds, dense concatenations)
at a size that trains on a laptop CPU in seconds.
"""
from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError, ShapeError
from .graph import FORMAT_VERSION, LayerNode, NetGraph, init_params

TEMPLATES = ("vgg16", "resnet50", "densenet121", "tiny_vgg", "tiny_resnet", "tiny_densenet")


class _Builder:
    def __init__(self):
        self.nodes = [LayerNode("input", "input")]
        self.last = "input"

    def add(self, kind, node_id, inputs=None, **attrs):
        if inputs is None:
            inputs = (self.last,)
        if "kernel_size" in attrs and isinstance(attrs["kernel_size"], int):
            attrs["kernel_size"] = (attrs["kernel_size"],) * 2
        self.nodes.append(LayerNode(node_id, kind, tuple(inputs), attrs))
        self.last = node_id
        return node_id

    def conv(self, node_id, filters, kernel=3, strides=1, use_bias=True, inputs=None):
        return self.add("conv", node_id, inputs, filters=filters, kernel_size=kernel,
                        strides=strides, padding="same", use_bias=use_bias)


def _vgg16(b):
    for block, (n, width) in enumerate([(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)], 1):
        for i in range(1, n + 1):
            b.conv(f"block{block}_conv{i}", width)
            b.add("relu", f"block{block}_conv{i}_relu")
        b.add("maxpool", f"block{block}_pool", pool_size=2, strides=2, padding="valid")


def _bottleneck(b, name, filters, stride, shortcut_conv):
    f1, f2, f3 = filters
    entry = b.last
    if shortcut_conv:
        b.conv(f"{name}_0_conv", f3, kernel=1, strides=stride, inputs=(entry,))
        short = b.add("bn", f"{name}_0_bn")
    else:
        short = entry
    b.conv(f"{name}_1_conv", f1, kernel=1, strides=stride, inputs=(entry,))
    b.add("bn", f"{name}_1_bn")
    b.add("relu", f"{name}_1_relu")
    b.conv(f"{name}_2_conv", f2, kernel=3)
    b.add("bn", f"{name}_2_bn")
    b.add("relu", f"{name}_2_relu")
    b.conv(f"{name}_3_conv", f3, kernel=1)
    main = b.add("bn", f"{name}_3_bn")
    b.add("add", f"{name}_add", inputs=(short, main))
    b.add("relu", f"{name}_out")


def _resnet50(b):
    b.conv("conv1_conv", 64, kernel=7, strides=2)
    b.add("bn", "conv1_bn")
    b.add("relu", "conv1_relu")
    b.add("maxpool", "pool1_pool", pool_size=3, strides=2, padding="same")
    stages = [((64, 64, 256), 3), ((128, 128, 512), 4), ((256, 256, 1024), 6), ((512, 512, 2048), 3)]
    for stage, (filters, blocks) in enumerate(stages, 2):
        for i in range(1, blocks + 1):
            stride = 2 if (i == 1 and stage > 2) else 1
            _bottleneck(b, f"conv{stage}_block{i}", filters, stride, shortcut_conv=(i == 1))


def _dense_block(b, name, layers, growth, bottleneck):
    for i in range(1, layers + 1):
        entry = b.last
        p = f"{name}_block{i}"
        b.add("bn", f"{p}_0_bn")
        b.add("relu", f"{p}_0_relu")
        b.conv(f"{p}_1_conv", bottleneck, kernel=1, use_bias=False)
        b.add("bn", f"{p}_1_bn")
        b.add("relu", f"{p}_1_relu")
        new = b.conv(f"{p}_2_conv", growth, kernel=3, use_bias=False)
        b.add("concat", f"{p}_concat", inputs=(entry, new))


def _transition(b, name, channels):
    b.add("bn", f"{name}_bn")
    b.add("relu", f"{name}_relu")
    b.conv(f"{name}_conv", channels, kernel=1, use_bias=False)
    b.add("avgpool", f"{name}_pool", pool_size=2, strides=2, padding="valid")


def _densenet121(b):
    b.conv("conv1/conv", 64, kernel=7, strides=2, use_bias=False)
    b.add("bn", "conv1/bn")
    b.add("relu", "conv1/relu")
    b.add("maxpool", "pool1", pool_size=3, strides=2, padding="same")
    channels = 64
    for stage, layers in enumerate([6, 12, 24, 16], 2):
        _dense_block(b, f"conv{stage}", layers, growth=32, bottleneck=128)
        channels += 32 * layers
        if stage < 5:
            channels //= 2
            _transition(b, f"pool{stage}", channels)
    b.add("bn", "bn")
    b.add("relu", "relu")


def _tiny_vgg(b):
    for i, width in enumerate([8, 8, "M", 16, 16, "M", 32], 1):
        if width == "M":
            b.add("maxpool", f"pool{i}", pool_size=2, strides=2, padding="valid")
            continue
        b.conv(f"conv{i}", width)
        b.add("relu", f"conv{i}_relu")


def _tiny_resnet(b):
    b.conv("conv1", 8)
    b.add("bn", "conv1_bn")
    b.add("relu", "conv1_relu")
    for name, stride, shortcut in (("block1", 2, True), ("block2", 1, False)):
        entry = b.last
        if shortcut:
            b.conv(f"{name}_0_conv", 16, kernel=1, strides=stride, inputs=(entry,))
            short = b.add("bn", f"{name}_0_bn")
        else:
            short = entry
        b.conv(f"{name}_1_conv", 16, strides=stride, inputs=(entry,))
        b.add("bn", f"{name}_1_bn")
        b.add("relu", f"{name}_1_relu")
        b.conv(f"{name}_2_conv", 16)
        main = b.add("bn", f"{name}_2_bn")
        b.add("add", f"{name}_add", inputs=(short, main))
        b.add("relu", f"{name}_out")


def _tiny_densenet(b):
    b.conv("conv1", 16, use_bias=False)
    b.add("bn", "conv1_bn")
    b.add("relu", "conv1_relu")
    _dense_block(b, "dense1", 3, growth=8, bottleneck=16)
    _transition(b, "trans1", 20)
    _dense_block(b, "dense2", 2, growth=8, bottleneck=16)
    b.add("bn", "final_bn")
    b.add("relu", "final_relu")


_BUILDERS = {
    "vgg16": _vgg16,
    "resnet50": _resnet50,
    "densenet121": _densenet121,
    "tiny_vgg": _tiny_vgg,
    "tiny_resnet": _tiny_resnet,
    "tiny_densenet": _tiny_densenet,
}

DEFAULT_INPUT = {
    "vgg16": (128, 128, 3),
    "resnet50": (128, 128, 3),
    "densenet121": (128, 128, 3),
    "tiny_vgg": (16, 16, 1),
    "tiny_resnet": (16, 16, 1),
    "tiny_densenet": (16, 16, 1),
}


def _explicit(b, layers):
    for i, spec in enumerate(layers):
        spec = dict(spec)
        kind = spec.pop("kind", None)
        if kind is None:
            raise ConfigError(f"layer #{i} has no 'kind'")
        node_id = spec.pop("id", f"{kind}{i}")
        inputs = spec.pop("inputs", None)
        try:
            if kind == "conv":
                b.conv(node_id, spec.pop("filters"), kernel=spec.pop("kernel_size", 3),
                       strides=spec.pop("strides", 1), use_bias=spec.pop("use_bias", True),
                       inputs=inputs)
                if "padding" in spec:
                    b.nodes[-1].attrs["padding"] = spec.pop("padding")
            else:
                b.add(kind, node_id, inputs, **spec)
        except KeyError as exc:
            raise ConfigError(f"layer {node_id!r} is missing field {exc}") from None
        except ShapeError as exc:
            raise ConfigError(str(exc)) from None


def build_architecture(config, *, materialize=True, seed=0):
    """Build a graph from a template name or an architecture config.

    ``config`` is a template name or a dict with ``template`` or ``layers``,
    plus optional ``input`` ([h, w, c]) and ``num_classes``. When
    ``num_classes`` is given the source model gets a global-average-pool and
    dense classifier. With ``materialize=False`` only the structure is built.
    """
    if isinstance(config, str):
        config = {"template": config}
    config = dict(config)
    fmt = config.get("format", FORMAT_VERSION)
    if fmt != FORMAT_VERSION:
        raise ConfigError(f"architecture format {fmt!r} not supported (expected {FORMAT_VERSION})")
    b = _Builder()
    template = config.get("template")
    if template is not None:
        if template not in _BUILDERS:
            raise ConfigError(f"unknown template {template!r}; choose from {', '.join(TEMPLATES)}")
        _BUILDERS[template](b)
        input_shape = config.get("input") or DEFAULT_INPUT[template]
    elif "layers" in config:
        _explicit(b, config["layers"])
        if "input" not in config:
            raise ConfigError("explicit architectures need an 'input' extent")
        input_shape = config["input"]
    else:
        raise ConfigError("architecture config needs 'template' or 'layers'")
    if len(input_shape) != 3:
        raise ConfigError(f"input extent must be [h, w, c], got {input_shape}")
    if config.get("num_classes"):
        b.add("global_avg_pool", "gap")
        b.add("dense", "predictions", units=int(config["num_classes"]))
    try:
        g = NetGraph(b.nodes, input_shape, name=template or config.get("name", "custom"))
        g.infer_shapes()
    except ShapeError as exc:
        raise ConfigError(f"inconsistent architecture: {exc}") from None
    if materialize:
        init_params(g, seed=seed)
    return g


def load_architecture_config(path):
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if "format" not in config:
        raise ConfigError(f"{path}: missing 'format' field")
    return config


def resolve_architecture(arch):
    """Accept a template name, a config dict, or a path to a config file."""
    if isinstance(arch, dict):
        return arch
    if arch in _BUILDERS:
        return {"template": arch}
    if Path(arch).exists():
        return load_architecture_config(arch)
    raise ConfigError(f"unknown architecture {arch!r}; choose from {', '.join(TEMPLATES)} or give a config path")
