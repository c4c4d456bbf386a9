"""Command-line interface: ``opamp <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .circuit import ResistorNetwork, gains_from_resistors
from .evaluation import evaluate
from .experiment import (
    EVAL_OFFSET,
    Cell,
    ExperimentConfig,
    ExperimentError,
    adapt,
    pretrain_base,
    run_experiment,
    trace_rows,
    write_csv,
)
from .model import ConfigError
from .task import TaskError, generate_dataset, generate_example, write_dataset
from .tracing import trace_attention
from .train import InvariantError, TrainingHyperparams, finetune

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed (sweeps: run this single seed)")
    p.add_argument("--config", type=Path, default=d, help="experiment config (JSON)")
    p.add_argument("--out-dir", type=Path, default=d, help="output directory")
    p.add_argument("--precision", choices=("f32", "f64"), default=d, help="floating-point precision")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opamp", description="OpAmp attention adaptation: desk-scale experiments")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train the base model")
    p.add_argument("--steps", type=int, help="lookup-phase steps (default: from config)")
    p.add_argument("--copy-steps", type=int, help="copy-sequence phase steps (default: from config)")
    p.add_argument("--output", type=Path, help="checkpoint path (default: <out-dir>/base.ckpt)")

    p = sub.add_parser("finetune", parents=[common], help="adapt a base model and fine-tune it")
    p.add_argument("--base", type=Path, help="base checkpoint (default: <out-dir>/base.ckpt)")
    p.add_argument("--method", choices=("opamp", "lowrank-baseline"), default="opamp")
    p.add_argument("--cmrr", type=float, default=10.0)
    p.add_argument("--noise-ratio", type=float, default=0.9)
    p.add_argument("--steps", type=int, help="fine-tuning steps (default: from config)")
    p.add_argument("--output", type=Path, help="checkpoint path (default: <out-dir>/finetuned.ckpt)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out examples")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--noise-ratio", type=float, default=0.9)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--multiple-choice", action="store_true")

    p = sub.add_parser("trace", parents=[common], help="per-document attention of one example")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--noise-ratio", type=float, default=0.9)
    p.add_argument("--index", type=int, default=0, help="example index in the generated stream")
    p.add_argument("--golden-index", type=int, help="place the golden document at this position")
    p.add_argument("--layer", type=int, help="trace one layer instead of averaging all")

    p = sub.add_parser("sweep-cmrr", parents=[common], help="EM against the CMRR grid")
    p.add_argument("--cmrr", type=_floats, default=[1.0, 5.0, 10.0, 20.0])
    p.add_argument("--noise-ratio", type=float, default=0.9)
    _sweep_flags(p)

    p = sub.add_parser("sweep-noise", parents=[common], help="EM against the noise-ratio grid")
    p.add_argument("--noise-ratios", type=_floats, default=[0.0, 0.8, 0.9])
    p.add_argument("--cmrr", type=_floats, default=[10.0])
    _sweep_flags(p)

    p = sub.add_parser("run", parents=[common], help="run the experiment grid of a config file")
    _sweep_flags(p)

    p = sub.add_parser("circuit", parents=[common], help="amplifier gains of a resistor network")
    for name in ("r1", "r2", "r3", "r4"):
        p.add_argument(name, type=float)

    p = sub.add_parser("gen-data", parents=[common], help="write a JSONL dataset of task examples")
    p.add_argument("--noise-ratio", type=float, default=0.9)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--golden-index", type=int)
    p.add_argument("--output", type=Path, help="dataset path (default: <out-dir>/data.jsonl)")
    return parser


def _sweep_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seeds", type=_ints, help="comma-separated seed list")
    p.add_argument("--base", type=Path, help="reuse this base checkpoint instead of pre-training")
    p.add_argument("--workers", type=int, help="worker processes for independent cells")
    p.add_argument("--eval-only", action="store_true", help="re-evaluate saved checkpoints; write no checkpoints")


# -- helpers ----------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.out_dir is not None:
        changes["output_dir"] = str(args.out_dir)
    if args.precision is not None:
        changes["model"] = {**asdict(cfg.model), "precision": args.precision}
    if getattr(args, "base", None) is not None and args.command in ("sweep-cmrr", "sweep-noise", "run"):
        changes["base_checkpoint"] = str(args.base)
        changes["reuse_base"] = True
    seeds = getattr(args, "seeds", None)
    if seeds:
        changes["seeds"] = seeds
    elif args.seed is not None and args.command in ("sweep-cmrr", "sweep-noise", "run"):
        changes["seeds"] = [args.seed]
    if getattr(args, "workers", None):
        changes["workers"] = args.workers
    return ExperimentConfig.from_dict({**_shallow(cfg), **changes}) if changes else cfg


def _shallow(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    for key in ("task", "model", "pretrain", "finetune"):
        d[key] = asdict(getattr(cfg, key))
    return d


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _task(cfg: ExperimentConfig, args, noise_ratio: float, golden_index=None):
    changes = {"noise_ratio": noise_ratio}
    if args.seed is not None:
        changes["seed"] = args.seed
    if golden_index is not None:
        changes.update(golden_policy="fixed", golden_index=golden_index)
    return cfg.task.replace(**changes)


def _print_rows(rows) -> None:
    for r in rows:
        if r["seed"] == "mean":
            k = f" K={r['K']}" if r["K"] else ""
            print(f"{r['method']}{k} rho={r['noise_ratio']}: EM={r['em']} PM={r['pm']} golden_up={r['golden_up_frac']}")


# -- commands ---------------------------------------------------------------


def cmd_circuit(args, _cfg) -> int:
    try:
        net = ResistorNetwork(args.r1, args.r2, args.r3, args.r4)
    except ValueError as exc:
        raise UsageError(str(exc))
    g = gains_from_resistors(net)
    print(f"A_d={g.differential:.6g}")
    print(f"A_c={g.common_mode:.6g}")
    print(f"K={g.cmrr:.6g}")
    return EXIT_OK


def cmd_gen_data(args, cfg) -> int:
    task = _task(cfg, args, args.noise_ratio, args.golden_index)
    path = args.output or _out(cfg) / "data.jsonl"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, generate_dataset(task, 0, args.count))
    print(f"wrote {args.count} examples to {path}")
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, steps=args.steps))
    if args.copy_steps is not None:
        cfg = replace(cfg, pretrain_copy_steps=args.copy_steps)
    model = pretrain_base(cfg)
    path = args.output or _out(cfg) / "base.ckpt"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    print(f"saved base model to {path}")
    return EXIT_OK


def cmd_finetune(args, cfg) -> int:
    base = load_checkpoint(args.base or Path(cfg.output_dir) / "base.ckpt")
    seed = 0 if args.seed is None else args.seed
    cell = Cell(args.method, args.cmrr if args.method == "opamp" else None, args.noise_ratio, seed)
    model = adapt(base, cfg, cell)
    task = cfg.task.replace(noise_ratio=args.noise_ratio, seed=cfg.task.seed + 101 * seed)
    hp = TrainingHyperparams(**{**asdict(cfg.finetune), "seed": seed})
    if args.steps is not None:
        hp.steps = args.steps
    log = finetune(model, generate_dataset(task, 0, cfg.train_count), hp)
    path = args.output or _out(cfg) / "finetuned.ckpt"
    save_checkpoint(model, path)
    tail = np.mean(log.losses[-20:]) if log.losses else float("nan")
    print(f"fine-tuned {cell.name} for {log.steps} steps (final loss {tail:.4f}); saved to {path}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    data = generate_dataset(_task(cfg, args, args.noise_ratio), EVAL_OFFSET, args.count)
    res = evaluate(model, data, multiple_choice=args.multiple_choice)
    line = f"EM={res.em:.6f} PM={res.pm:.6f}"
    if res.acc is not None:
        line += f" Acc={res.acc:.6f}"
    print(line)
    return EXIT_OK


def cmd_trace(args, cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    ex = generate_example(_task(cfg, args, args.noise_ratio, args.golden_index), args.index)
    tr = trace_attention(model, ex, args.layer)
    path = _out(cfg) / f"trace_{args.index}.csv"
    write_csv(path, trace_rows(tr.scores, ex.golden_index), ("document", "score", "golden"))
    for i, s in enumerate(tr.scores):
        mark = " <- golden" if i == ex.golden_index else ""
        print(f"doc {i}: {s:.6f}{mark}")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    if args.command == "sweep-cmrr":
        cfg = replace(cfg, cmrr_values=args.cmrr, noise_ratios=[args.noise_ratio])
    elif args.command == "sweep-noise":
        cfg = replace(cfg, cmrr_values=args.cmrr, noise_ratios=args.noise_ratios)
    cfg = ExperimentConfig.from_dict(_shallow(cfg))  # re-validate the overridden grid
    rows = run_experiment(cfg, eval_only=args.eval_only)
    _print_rows(rows)
    print(f"wrote {Path(cfg.output_dir) / 'metrics.csv'}")
    return EXIT_OK


COMMANDS = {
    "circuit": cmd_circuit,
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "sweep-cmrr": cmd_sweep,
    "sweep-noise": cmd_sweep,
    "run": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"opamp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ExperimentError, TaskError, ConfigError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
