"""The end-to-end procedure: head replacement, decomposition, training,
basis pruning and double pruning, with checkpoints and a report."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import save_checkpoint
from .cost import cost_report
from .data import load_mnist_idx, synth_dataset, train_val_split
from .decomposition import S_INIT, decompose_all
from .errors import BsPruneError, CheckpointError, ConfigError
from .graph import FORMAT_VERSION
from .head import replace_head
from .importance import BASIS_METHODS, CHANNEL_METHODS, global_threshold, score
from .pruner import basis_prune, double_prune, pruning_ratio
from .templates import build_architecture, resolve_architecture
from .training import TrainConfig, evaluate, recompute_bn_stats, train_stage

STAGES = ("train", "basis", "double")
REPORT_COLUMNS = ("stage", "accuracy", "params", "flops", "param_pr", "flop_pr")


@dataclass
class RunConfig:
    architecture: object = "tiny_vgg"
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "n": 1000})
    epochs: dict = field(default_factory=lambda: {"train": 10, "basis": 5, "double": 5})
    remove_fraction: dict = field(default_factory=lambda: {"basis": 0.5, "double": 0.3})
    importance: dict = field(default_factory=lambda: {"basis": "taylor_fo", "double": "taylor_fo"})
    iterations: dict = field(default_factory=lambda: {"basis": 1, "double": 1})
    seed: int = 0
    momentum: float = 0.9
    lr_min: float = 1e-4
    lr_max: float = 1e-1
    batch_size: int = 32
    importance_batch_size: int = 64
    recompute_bn: bool = True
    augment: bool = False
    dropout: float = 0.0
    s_init: float = S_INIT
    output_dir: str = "run"
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        defaults = RunConfig.__dataclass_fields__
        for name in ("epochs", "remove_fraction", "importance", "iterations"):
            value = getattr(self, name)
            base = defaults[name].default_factory()
            if not isinstance(value, dict):
                value = {k: value for k in base}
            unknown = set(value) - set(base)
            if unknown:
                raise ConfigError(f"{name}: unknown stage(s) {sorted(unknown)}")
            setattr(self, name, {**base, **value})
        self.validate()

    def validate(self):
        for stage, f in self.remove_fraction.items():
            if not 0 <= f < 1:
                raise ConfigError(f"remove_fraction[{stage}] must be in [0, 1), got {f}")
        for stage, n in {**self.epochs, **self.iterations}.items():
            if not isinstance(n, int) or n < 0:
                raise ConfigError(f"epochs and iterations must be non-negative integers ({stage}: {n!r})")
        if self.importance["basis"] not in BASIS_METHODS:
            raise ConfigError(f"basis importance must be one of {BASIS_METHODS}")
        if self.importance["double"] not in CHANNEL_METHODS:
            raise ConfigError(f"channel importance must be one of {CHANNEL_METHODS}")
        if self.batch_size <= 0 or self.importance_batch_size <= 0:
            raise ConfigError("batch sizes must be positive")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.dataset.get("kind") not in ("synthetic", "mnist", "memory"):
            raise ConfigError("dataset.kind must be 'synthetic', 'mnist' or 'memory'")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        fmt = d.pop("format", None)
        if fmt != FORMAT_VERSION:
            raise ConfigError(f"config format {fmt!r} not supported (expected {FORMAT_VERSION})")
        names = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**d, base_dir=str(base_dir))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d, Path(path).parent)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "base_dir"}
        return {"format": FORMAT_VERSION, **d}

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def train_config(self, stage):
        return TrainConfig(epochs=self.epochs[stage], batch_size=self.batch_size,
                           lr_min=self.lr_min, lr_max=self.lr_max, momentum=self.momentum,
                           augment=self.augment, seed=self.seed + STAGES.index(stage))


def load_dataset(cfg):
    """Training and validation sets (seeded 90/10 split) plus an optional test set."""
    d = dict(cfg.dataset)
    kind = d.pop("kind")
    if kind == "memory":
        raise ConfigError("dataset kind 'memory' needs the data passed in directly")
    test = None
    try:
        if kind == "synthetic":
            full = synth_dataset(d.get("n", 1000), d.get("h", 16), d.get("w", 16), d.get("c", 1),
                                 d.get("num_classes", 2), d.get("seed", cfg.seed),
                                 d.get("noise", 1.0), d.get("amplitude", 1.0))
        else:
            up = d.get("upsample", 1)
            full = load_mnist_idx(cfg.path(d["train_images"]), cfg.path(d["train_labels"]), up)
            if "limit" in d:
                full = full.subset(slice(0, int(d["limit"])))
            if "test_images" in d:
                test = load_mnist_idx(cfg.path(d["test_images"]), cfg.path(d["test_labels"]), up,
                                      split="test")
    except KeyError as exc:
        raise ConfigError(f"dataset is missing field {exc}") from None
    train, val = train_val_split(full, d.get("val_fraction", 0.1), cfg.seed)
    return train, val, test


def _architecture(cfg, input_shape):
    arch = cfg.architecture
    if isinstance(arch, str) and not os.path.isabs(arch) and cfg.path(arch).exists():
        arch = str(cfg.path(arch))
    arch = dict(resolve_architecture(arch))
    arch["input"] = list(input_shape)
    arch.setdefault("format", FORMAT_VERSION)
    return arch


class _Stage:
    """Attach the stage name to any failure inside a ``with`` block."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, BsPruneError) and not getattr(exc, "stage", None):
            exc.stage = self.name
            exc.args = (f"stage {self.name}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        return False


def prepare_model(cfg, num_classes, input_shape):
    """Source model, new classifier head and decomposition."""
    source = build_architecture(_architecture(cfg, input_shape), seed=cfg.seed)
    g = replace_head(source, num_classes, seed=cfg.seed)
    if cfg.dropout:
        g[g.output_id].attrs["dropout"] = cfg.dropout
    return source, decompose_all(g, cfg.s_init)


def run_procedure(cfg, out_dir=None, stages=STAGES, start=None, data=None):
    """Run the configured stages and return the report dict.

    ``start`` may supply an already trained decomposed graph (for pruning
    only); otherwise it is built from the configured architecture. ``data`` may supply
    ``(train, val, test)`` datasets instead of the configured source.
    Checkpoints for every stage are written under ``out_dir`` when given.
    """
    train, val, test = data if data is not None else load_dataset(cfg)
    num_classes = train.num_classes
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    rows, tables, histories = [], {}, {}
    report = {"config": cfg.to_dict(), "rows": rows, "histories": histories}

    def record(stage, g):
        cost = cost_report(g)
        ref = rows[0] if rows else {"params": cost.total_params, "flops": cost.total_flops}
        row = {
            "stage": stage,
            "accuracy": evaluate(g, val),
            "params": cost.total_params,
            "flops": cost.total_flops,
            "param_pr": pruning_ratio(ref["params"], cost.total_params),
            "flop_pr": pruning_ratio(ref["flops"], cost.total_flops),
            "trainable": cost.trainable,
        }
        if test is not None:
            row["test_accuracy"] = evaluate(g, test)
        rows.append(row)
        if ckpt_dir:
            save_checkpoint(g, ckpt_dir / f"{stage}.bsp")

    if start is None:
        with _Stage("decompose"):
            source, g = prepare_model(cfg, num_classes, train.image_shape)
            src_cost = cost_report(source)
            report["source"] = {"params": src_cost.total_params, "flops": src_cost.total_flops}
            record("baseline", g)
    else:
        g = start
        record("baseline", g)

    if "train" in stages:
        with _Stage("train"):
            g, histories["train"] = _train(g, train, val, cfg, "train")
            record("trained", g)

    for stage in ("basis", "double"):
        if stage not in stages or cfg.remove_fraction[stage] == 0:
            continue
        for it in range(cfg.iterations[stage]):
            name = f"{stage}_pruned_{it + 1}"
            with _Stage(name):
                g, table, mask = _prune_once(g, stage, cfg, val)
                tables[name] = table
                if ckpt_dir:
                    (ckpt_dir / f"{name}.mask.json").write_text(mask.to_json())
                if cfg.recompute_bn:
                    g = recompute_bn_stats(g, train, cfg.importance_batch_size)
                g, histories[name] = _train(g, train, val, cfg, stage)
                record(name, g)

    report["importance"] = tables
    report["graph"] = g
    return report


def _train(g, train, val, cfg, stage):
    g, history = train_stage(g, train, cfg.train_config(stage), val)
    if cfg.recompute_bn and history:
        # moving averages lag far behind after a short desk-scale stage
        g = recompute_bn_stats(g, train, cfg.importance_batch_size)
        history[-1]["val_accuracy_recomputed_bn"] = evaluate(g, val)
    return g, history


def _prune_once(g, stage, cfg, val):
    # gradients and feature maps for importance come from the validation split
    target = "basis" if stage == "basis" else "channel"
    table = score(g, cfg.importance[stage], val.as_tuple(), target=target, seed=cfg.seed,
                  batch_size=cfg.importance_batch_size)
    threshold = global_threshold(table, cfg.remove_fraction[stage])
    if stage == "basis":
        g, mask = basis_prune(g, table, threshold, seed=cfg.seed)
    else:
        g, mask = double_prune(g, table, threshold)
    mask.provenance["fraction"] = cfg.remove_fraction[stage]
    return g, table, mask


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def emit_report(report, out_dir):
    """Write report.csv, report.json, config.json and importance/<stage>.csv."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        lines = [",".join(REPORT_COLUMNS)]
        lines += [",".join(_fmt(row[c]) for c in REPORT_COLUMNS) for row in report["rows"]]
        (out / "report.csv").write_text("\n".join(lines) + "\n")
        (out / "config.json").write_text(json.dumps(report["config"], indent=2, sort_keys=True) + "\n")
        summary = {k: report[k] for k in ("rows", "histories", "source") if k in report}
        (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        imp = out / "importance"
        imp.mkdir(exist_ok=True)
        for name, table in report.get("importance", {}).items():
            (imp / f"{name}.csv").write_text(table.to_text())
    except OSError as exc:
        raise CheckpointError(f"cannot write report to {out}: {exc}") from exc
    return out / "report.csv"


def accounting(arch, input_shape=None, num_classes=10):
    """Parameter/FLOP accounting of a template before and after decomposition.

    Uses structural graphs: the source network with a ``num_classes`` head
    (BN inserted as in head replacement), then the decomposed network with
    every conv at rank ``min(k, co)``.
    """
    config = dict(resolve_architecture(arch))
    if input_shape is not None:
        config["input"] = list(input_shape)
    source = build_architecture(config, materialize=False)
    g = replace_head(source, num_classes)
    d = decompose_all(g)
    orig, dec = cost_report(g), cost_report(d)
    return {
        "architecture": source.name,
        "input": list(g.input_shape),
        "conv_layers": len(g.conv_layers()),
        "params": orig.total_params,
        "flops": orig.total_flops,
        "trainable": orig.trainable,
        "decomposed_params": dec.total_params,
        "decomposed_flops": dec.total_flops,
        "decomposed_trainable": dec.trainable,
        "growth": dec.total_params / orig.total_params,
    }
