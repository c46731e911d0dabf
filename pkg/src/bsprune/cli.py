"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .decomposition import decompose_all
from .errors import BsPruneError, ConfigError
from .head import replace_head
from .pipeline import RunConfig, accounting, emit_report, run_procedure
from .pruner import prune_report
from .templates import build_architecture, resolve_architecture
from .validation import parse_extent


def _count(args):
    info = accounting(args.arch, args.input, args.classes)
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return
    h, w, c = info["input"]
    print(f"architecture        {info['architecture']} ({h}x{w}x{c}, {args.classes} classes)")
    print(f"conv layers         {info['conv_layers']}")
    print(f"params              {info['params']:,} ({info['params'] / 1e6:.2f}M)")
    print(f"flops               {info['flops']:,} ({info['flops'] / 1e9:.2f}G)")
    print(f"decomposed params   {info['decomposed_params']:,} ({info['decomposed_params'] / 1e6:.2f}M)")
    print(f"decomposed flops    {info['decomposed_flops']:,} ({info['decomposed_flops'] / 1e9:.2f}G)")
    print(f"trainable           {info['decomposed_trainable']:,}")
    print(f"growth              {100 * (info['growth'] - 1):.1f}%")


def _decompose(args):
    config = dict(resolve_architecture(args.arch))
    if args.input:
        config["input"] = list(args.input)
    source = build_architecture(config, materialize=not args.structure_only, seed=args.seed)
    g = decompose_all(replace_head(source, args.classes, seed=args.seed))
    save_checkpoint(g, args.out)
    print(f"wrote {args.out} ({len(g)} nodes)")


def _out_dir(cfg, args):
    return Path(args.out) if args.out else cfg.path(cfg.output_dir)


def _finish(report, out):
    path = emit_report(report, out)
    print(path.read_text(), end="")


def _train(args):
    cfg = RunConfig.load(args.config)
    out = _out_dir(cfg, args)
    _finish(run_procedure(cfg, out, stages=("train",)), out)


def _prune(args):
    cfg = RunConfig.load(args.config)
    out = _out_dir(cfg, args)
    start = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "trained.bsp"
    g = load_checkpoint(start)
    _finish(run_procedure(cfg, out, stages=("basis", "double"), start=g), out)


def _run(args):
    cfg = RunConfig.load(args.config)
    out = _out_dir(cfg, args)
    _finish(run_procedure(cfg, out), out)


def _report(args):
    before, after = load_checkpoint(args.before), load_checkpoint(args.after)
    rep = prune_report(before, after, args.input)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return
    print(f"{'layer':<32}{'params':>12}{'->':>4}{'':>12}{'flops':>14}{'->':>4}")
    for lid, row in rep["layers"].items():
        print(f"{lid:<32}{row['params_before']:>12,}  -> {row['params_after']:<12,}"
              f"{row['flops_before']:>14,}  -> {row['flops_after']:,}")
    print(f"params  {rep['params_before']:,} -> {rep['params_after']:,}  (PR {100 * rep['param_pr']:.2f}%)")
    print(f"flops   {rep['flops_before']:,} -> {rep['flops_after']:,}  (PR {100 * rep['flop_pr']:.2f}%)")


def _extent(text):
    try:
        return parse_extent(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = argparse.ArgumentParser(prog="bsprune", description="Basis scaling decomposition and pruning")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("count", help="parameter and FLOP accounting of an architecture")
    c.add_argument("arch", help="template name or architecture config path")
    c.add_argument("--input", type=_extent, help="input extent HxWxC")
    c.add_argument("--classes", type=int, default=10)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=_count)

    d = sub.add_parser("decompose", help="replace the head, decompose every conv, save a checkpoint")
    d.add_argument("arch")
    d.add_argument("out", help="checkpoint path to write")
    d.add_argument("--input", type=_extent)
    d.add_argument("--classes", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--structure-only", action="store_true", help="skip weights (topology only)")
    d.set_defaults(func=_decompose)

    for name, func, text in (("train", _train, "new head, decomposition and training"),
                             ("prune", _prune, "basis and channel pruning of a trained checkpoint"),
                             ("run", _run, "the full procedure")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("--out", help="output directory (default: output_dir from the config)")
        if name == "prune":
            s.add_argument("--checkpoint", help="trained checkpoint (default: <out>/checkpoints/trained.bsp)")
        s.set_defaults(func=func)

    r = sub.add_parser("report", help="compare two checkpoints")
    r.add_argument("before")
    r.add_argument("after")
    r.add_argument("--input", type=_extent)
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=_report)
    return p


def _thread_limit():
    value = os.environ.get("BSPRUNE_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"BSPRUNE_THREADS must be a positive integer, got {value!r}") from None
    if n <= 0:
        raise ConfigError(f"BSPRUNE_THREADS must be a positive integer, got {value!r}")
    return n


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        with threadpool_limits(limits=_thread_limit()):
            args.func(args)
    except BsPruneError as exc:
        print(f"bsprune: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"bsprune: error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
