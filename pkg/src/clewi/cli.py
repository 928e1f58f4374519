"""Command-line entry point: ``clewi <command> --config PATH [...]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataFormatError
from .experiment import (INTERP_GRID, REFERENCE_PARAM_COUNTS, build_stream, interp_plot_run, memory_budget,
                         run, sweep_alpha, width_sweep)
from .methods import DivergenceError
from .metrics import evaluate
from .models import ModelArch, build_model, param_count

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clewi", description="Rehearsal training with post-task weight merging")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", type=Path, help="output directory (overrides experiment.out_dir)")
    common.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="train the stream for every seed")
    sa = sub.add_parser("sweep-alpha", parents=[common], help="one run per interpolation coefficient")
    sa.add_argument("--alphas", type=_floats, default=[0.1, 0.2, 0.3, 0.4, 0.5])
    ip = sub.add_parser("interp-plot", parents=[common], help="accuracy along the interpolation path")
    ip.add_argument("--alphas", type=_floats, default=list(INTERP_GRID))
    ws = sub.add_parser("width-sweep", parents=[common], help="one run per width multiplier")
    ws.add_argument("--widths", type=_ints, default=[1, 2, 4])
    mb = sub.add_parser("memory-budget", parents=[common], help="weights expressed as extra buffer images")
    mb.add_argument("--params", type=int, help="parameter count")
    mb.add_argument("--reference", choices=sorted(REFERENCE_PARAM_COUNTS), help="use a reference network size")
    mb.add_argument("--dataset", default="cifar100")
    mb.add_argument("--buffer", type=int, default=0, help="images already in the buffer")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the config's test sets")
    ev.add_argument("checkpoint", type=Path)
    return p


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(experiment__seeds=(args.seed,))
    return cfg


def _memory(args) -> dict:
    if args.params is not None:
        n = args.params
    elif args.reference is not None:
        n = REFERENCE_PARAM_COUNTS[args.reference]
    else:
        cfg = _config(args)
        stream = build_stream(cfg, cfg.experiment.seeds[0])
        arch = ModelArch(cfg.model.arch, stream[0].train.input_shape, stream.num_classes, cfg.model.width)
        n = param_count(build_model(arch, 0))
    return memory_budget(n, args.dataset, args.buffer)


def _dispatch(args) -> object:
    if args.command == "memory-budget":
        return _memory(args)
    cfg = _config(args)
    out = args.out
    if args.command == "run":
        res = run(cfg, out)
        return {"out_dir": str(res.out_dir), "metrics": res.summary}
    if args.command == "sweep-alpha":
        return sweep_alpha(cfg, args.alphas, out)
    if args.command == "width-sweep":
        return width_sweep(cfg, args.widths, out)
    if args.command == "interp-plot":
        rows = interp_plot_run(cfg, args.alphas, out)
        return {"rows": len(rows), "out_dir": str(out or cfg.experiment.out_dir)}
    try:
        params = load_checkpoint(args.checkpoint.read_bytes())
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint: {exc}") from exc
    stream = build_stream(cfg, cfg.experiment.seeds[0])
    return {"task_accuracy": [float(a) for a in evaluate(params, [t.test for t in stream])]}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if not args.quiet:
        print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
