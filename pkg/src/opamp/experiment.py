"""Config-driven experiment grid: pre-train (or load) a base, adapt, fine-tune, evaluate.

Each *cell* of the grid is one ``(method, K, noise_ratio, seed)`` combination.
All cells of an experiment share one frozen base model. Within a seed, every
method sees the same fine-tuning and evaluation examples, so methods are
compared on paired data.

Outputs in ``output_dir``:

* ``metrics.csv``: one row per cell plus ``mean`` / ``std`` rows per
  ``(method, K, noise_ratio)``;
* ``doc_scores.csv``: per-document attention of the first evaluation example,
  before and after fine-tuning, for every cell of the first seed;
* ``em_vs_cmrr.svg``, ``em_vs_noise.svg``, ``attention_rho<r>.svg``;
* ``base.ckpt`` and ``checkpoints/<cell>.ckpt`` (skipped with ``eval_only``).

Given the same config, every file is reproduced byte for byte, whether or not
worker processes are used.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .attention import OpAmpAttentionLayer
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import evaluate
from .model import Model, ModelConfig, attach_lowrank_baseline, attach_opamp_adapters, build_base_model
from .svg import bar_chart, line_chart, write_svg
from .task import TaskConfig, assemble_tokens, copy_corpus, generate_dataset, lookup_corpus
from .tracing import batch_document_scores
from .train import TrainingHyperparams, finetune, pretrain

METHODS = ("lowrank-baseline", "opamp")
EVAL_OFFSET = 1_000_000  # evaluation examples are drawn from a disjoint index range
CSV_COLUMNS = (
    "method", "K", "noise_ratio", "seed", "em", "pm", "acc",
    "golden_init", "golden_final", "golden_up_frac", "final_loss",
)


class ExperimentError(ValueError):
    """Invalid experiment configuration or missing inputs."""


def _default_pretrain() -> TrainingHyperparams:
    return TrainingHyperparams(steps=1000, batch_size=32, learning_rate=1e-3, seed=0)


def _default_finetune() -> TrainingHyperparams:
    return TrainingHyperparams(steps=300, batch_size=16, learning_rate=1e-3)


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainingHyperparams = field(default_factory=_default_pretrain)
    finetune: TrainingHyperparams = field(default_factory=_default_finetune)
    cmrr_values: list[float] = field(default_factory=lambda: [1.0, 5.0, 10.0, 20.0])
    noise_ratios: list[float] = field(default_factory=lambda: [0.9])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    output_dir: str = "runs/default"
    base_checkpoint: str | None = None
    reuse_base: bool = False
    base_seed: int = 0
    pretrain_count: int = 20000
    pretrain_noise_ratios: list[float] = field(default_factory=lambda: [0.0, 0.5])
    pretrain_copy_steps: int = 3000
    pretrain_copy_count: int = 30000
    pretrain_copy_length: int = 96
    pretrain_copy_fraction: float = 0.3
    train_count: int = 1000
    eval_count: int = 200
    trace_count: int = 100
    multiple_choice: bool = False
    check_row_sums: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("cmrr_values", "noise_ratios", "seeds", "methods"):
            if not getattr(self, name):
                raise ExperimentError(f"{name} must be a nonempty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise ExperimentError(f"seeds must be distinct, got {self.seeds}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ExperimentError(f"unknown methods {bad}; choose from {METHODS}")
        if any(not k > 0 or not math.isfinite(k) for k in self.cmrr_values):
            raise ExperimentError(f"CMRR values must be positive and finite, got {self.cmrr_values}")
        if min(self.train_count, self.eval_count) < 1 or self.trace_count < 0 or self.workers < 1:
            raise ExperimentError("train_count and eval_count must be >= 1, trace_count >= 0, workers >= 1")
        if self.pretrain_copy_steps < 0 or self.pretrain_copy_count < 1 or not 0 <= self.pretrain_copy_fraction < 1:
            raise ExperimentError("copy pre-training needs steps >= 0, count >= 1 and a fraction in [0, 1)")
        if not 16 <= self.pretrain_copy_length <= self.model.max_sequence_length:
            raise ExperimentError(f"copy sequence length {self.pretrain_copy_length} outside 16..max_sequence_length")
        if self.reuse_base and not self.base_checkpoint:
            raise ExperimentError("reuse_base requires base_checkpoint")
        for r in self.noise_ratios:
            if self.task.replace(noise_ratio=r).max_length > self.model.max_sequence_length:
                raise ExperimentError(f"noise ratio {r} produces sequences longer than the model allows")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ExperimentError(f"unknown config keys: {unknown}")
        nested = {"task": TaskConfig, "model": ModelConfig, "pretrain": TrainingHyperparams, "finetune": TrainingHyperparams}
        kw = dict(raw)
        try:
            for key, kind in nested.items():
                if key in kw:
                    base = asdict(getattr(cls(), key)) if key in ("pretrain", "finetune") else {}
                    kw[key] = kind(**{**base, **kw[key]})
            return cls(**kw)
        except TypeError as exc:
            raise ExperimentError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ExperimentError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ExperimentError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ExperimentError("config must be a JSON object")
        return cls.from_dict(raw)


@dataclass(frozen=True)
class Cell:
    method: str
    cmrr: float | None
    noise_ratio: float
    seed: int

    @property
    def name(self) -> str:
        k = "" if self.cmrr is None else f"_K{_num(self.cmrr)}"
        return f"{self.method}{k}_rho{_num(self.noise_ratio)}_seed{self.seed}"

    @property
    def label(self) -> str:
        return "low-rank" if self.cmrr is None else f"K={_num(self.cmrr)}"


def _num(x: float) -> str:
    """Shortest round-trip text for a config number (``10.0`` -> ``10``)."""
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def cells(cfg: ExperimentConfig) -> list[Cell]:
    """Grid in output order: method, then K, then noise ratio, then seed."""
    out = []
    for method in METHODS:
        if method not in cfg.methods:
            continue
        ks = [None] if method == "lowrank-baseline" else sorted(cfg.cmrr_values)
        for k in ks:
            for r in cfg.noise_ratios:
                for s in cfg.seeds:
                    out.append(Cell(method, k, r, s))
    return out


# -- base model -------------------------------------------------------------


def pretrain_base(cfg: ExperimentConfig) -> Model:
    """Deterministic base model, trained in two phases.

    1. ``pretrain_copy_steps`` steps on copy sequences (a random segment
       repeated at a random offset), which grows the induction circuit that
       retrieval builds on.
    2. ``cfg.pretrain`` steps on multi-query lookup sequences over
       ``pretrain_noise_ratios``, with a ``pretrain_copy_fraction`` share of
       copy sequences mixed in so the copying skill is not forgotten.
    """
    model = build_base_model(cfg.model, cfg.base_seed)
    vocab = cfg.model.vocab_size
    copies = copy_corpus(cfg.base_seed + 3, cfg.pretrain_copy_count, cfg.pretrain_copy_length, vocab)
    if cfg.pretrain_copy_steps > 0:
        pretrain(model, copies, replace(cfg.pretrain, steps=cfg.pretrain_copy_steps, seed=cfg.pretrain.seed))
    if cfg.pretrain.steps is None or cfg.pretrain.steps > 0:
        lookups = lookup_corpus(cfg.task.replace(seed=cfg.base_seed + 7), cfg.pretrain_count, cfg.pretrain_noise_ratios)
        n_mix = round(cfg.pretrain_copy_fraction * len(lookups) / (1 - cfg.pretrain_copy_fraction))
        mix = copy_corpus(cfg.base_seed + 5, n_mix, cfg.pretrain_copy_length, vocab) if n_mix else []
        pretrain(model, lookups + mix, replace(cfg.pretrain, seed=cfg.pretrain.seed + 1))
    return model


def obtain_base(cfg: ExperimentConfig, eval_only: bool = False) -> Model:
    """Load the base checkpoint if asked to reuse it, otherwise pre-train (and save unless ``eval_only``)."""
    ckpt = Path(cfg.base_checkpoint) if cfg.base_checkpoint else Path(cfg.output_dir) / "base.ckpt"
    if cfg.reuse_base or eval_only:
        if not ckpt.exists():
            raise ExperimentError(f"base checkpoint {ckpt} not found")
        base = load_checkpoint(ckpt)
        if base.config.attention_kind != "standard":
            raise ExperimentError(f"{ckpt} is an adapted model, not a base model")
        return base
    base = pretrain_base(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(base, ckpt)
    return base


# -- one cell ---------------------------------------------------------------


def _datasets(cfg: ExperimentConfig, cell: Cell):
    task = cfg.task.replace(noise_ratio=cell.noise_ratio, seed=cfg.task.seed + 101 * cell.seed)
    train = generate_dataset(task, 0, cfg.train_count)
    held_out = generate_dataset(task, EVAL_OFFSET, cfg.eval_count)
    return train, held_out


def adapt(base: Model, cfg: ExperimentConfig, cell: Cell) -> Model:
    hp = cfg.finetune
    if cell.method == "opamp":
        return attach_opamp_adapters(
            base, cell.cmrr, hp.adapter_dim, seed=cell.seed,
            joint_lowrank=hp.joint_lowrank, lowrank_r=hp.lowrank_r, lowrank_alpha=hp.lowrank_alpha,
        )
    return attach_lowrank_baseline(base, hp.lowrank_r, hp.lowrank_alpha, seed=cell.seed)


def zeroed(model: Model) -> Model:
    """Copy of an adapted model with its adapters reset to the identity (the init state)."""
    clone = copy.deepcopy(model)
    for block in clone.blocks:
        if isinstance(block.attn, OpAmpAttentionLayer):
            for ad in block.attn.adapters.values():
                ad.w2.assign(np.zeros_like(ad.w2.data))
        for lr in (block.attn.lowrank or {}).values():
            lr.b.assign(np.zeros_like(lr.b.data))
    return clone


def _golden(model: Model, examples) -> tuple[np.ndarray, list[np.ndarray]]:
    scores = batch_document_scores(model, examples) if examples else []
    return np.array([s[ex.golden_index] for s, ex in zip(scores, examples)]), scores


def run_cell(base: Model | None, cfg: ExperimentConfig, cell: Cell, eval_only: bool = False) -> dict[str, Any]:
    train, held_out = _datasets(cfg, cell)
    ckpt = Path(cfg.output_dir) / "checkpoints" / f"{cell.name}.ckpt"
    final_loss = float("nan")
    if eval_only:
        if not ckpt.exists():
            raise ExperimentError(f"--eval-only: checkpoint {ckpt} not found")
        model = load_checkpoint(ckpt)
        initial = zeroed(model)
    else:
        model = adapt(base, cfg, cell)
        initial = zeroed(model)
        hp = TrainingHyperparams(**{**asdict(cfg.finetune), "seed": cell.seed})
        probe = None
        if cfg.check_row_sums and cell.method == "opamp":
            probe = assemble_tokens(train[0]).tokens[None, :]
        log = finetune(model, train, hp, probe=probe)
        final_loss = float(np.mean(log.losses[-20:])) if log.losses else float("nan")
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt)
    result = evaluate(model, held_out, multiple_choice=cfg.multiple_choice)
    traced = held_out[: cfg.trace_count]
    g0, s0 = _golden(initial, traced)
    g1, s1 = _golden(model, traced)
    return {
        "cell": cell,
        "em": result.em,
        "pm": result.pm,
        "acc": result.acc,
        "golden_init": float(g0.mean()) if len(g0) else float("nan"),
        "golden_final": float(g1.mean()) if len(g1) else float("nan"),
        "golden_up_frac": float(np.mean(g1 > g0)) if len(g0) else float("nan"),
        "golden_up": (g1 > g0).tolist(),
        "golden_pairs": list(zip(g0.tolist(), g1.tolist())),
        "final_loss": final_loss,
        "doc_scores": (s0[0].tolist(), s1[0].tolist()) if s0 else None,
    }


_WORKER_STATE: dict[str, Any] = {}


def _init_worker(base, cfg, eval_only):
    _WORKER_STATE.update(base=base, cfg=cfg, eval_only=eval_only)


def _work(cell: Cell) -> dict[str, Any]:
    st = _WORKER_STATE
    return run_cell(st["base"], st["cfg"], cell, st["eval_only"])


# -- output -----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def metrics_rows(results: Sequence[dict[str, Any]]) -> list[dict[str, str]]:
    """Per-cell rows followed, per ``(method, K, noise_ratio)`` group, by ``mean`` and ``std`` rows."""
    rows: list[dict[str, str]] = []
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for r in results:
        c = r["cell"]
        groups.setdefault((c.method, c.cmrr, c.noise_ratio), []).append(r)
    metrics = CSV_COLUMNS[4:]
    for (method, k, rho), members in groups.items():
        key = {"method": method, "K": "" if k is None else _num(k), "noise_ratio": _num(rho)}
        for r in members:
            rows.append({**key, "seed": str(r["cell"].seed), **{m: _fmt(r[m]) for m in metrics}})
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            agg = {}
            for m in metrics:
                vals = [r[m] for r in members]
                agg[m] = "" if any(v is None for v in vals) else _fmt(float(fn(np.array(vals, dtype=np.float64))))
            rows.append({**key, "seed": stat, **agg})
    return rows


def write_csv(path: str | Path, rows: Sequence[dict[str, str]], columns: Sequence[str] = CSV_COLUMNS) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summary(rows: Sequence[dict[str, str]], metric: str = "em") -> dict[tuple[str, str, str], float]:
    """``(method, K, noise_ratio) -> mean metric`` from the aggregate rows of a metrics table."""
    return {(r["method"], r["K"], r["noise_ratio"]): float(r[metric]) for r in rows if r["seed"] == "mean"}


def _plots(cfg: ExperimentConfig, results: Sequence[dict[str, Any]], out: Path) -> None:
    means = summary(metrics_rows(results))
    ks = sorted(cfg.cmrr_values)
    series = {}
    for rho in cfg.noise_ratios:
        pts = [(k, means[("opamp", _num(k), _num(rho))]) for k in ks if ("opamp", _num(k), _num(rho)) in means]
        if pts:
            series[f"OpAmp, rho={_num(rho)}"] = pts
        if ("lowrank-baseline", "", _num(rho)) in means:
            series[f"low-rank, rho={_num(rho)}"] = [(k, means[("lowrank-baseline", "", _num(rho))]) for k in ks]
    write_svg(out / "em_vs_cmrr.svg", line_chart(series, "Exact match vs CMRR", "K", "EM", categorical_x=True))

    labels = [("lowrank-baseline", "")] * ("lowrank-baseline" in cfg.methods)
    labels += [("opamp", _num(k)) for k in ks] * ("opamp" in cfg.methods)
    series = {}
    for method, k in labels:
        name = "low-rank" if method == "lowrank-baseline" else f"K={k}"
        series[name] = [(r, means[(method, k, _num(r))]) for r in sorted(cfg.noise_ratios)]
    write_svg(out / "em_vs_noise.svg", line_chart(series, "Exact match vs noise ratio", "noise ratio", "EM"))

    first_seed = cfg.seeds[0]
    for rho in cfg.noise_ratios:
        picked = [r for r in results if r["cell"].noise_ratio == rho and r["cell"].seed == first_seed and r["doc_scores"]]
        if not picked:
            continue
        n_docs = len(picked[0]["doc_scores"][0])
        bars = {"init": picked[0]["doc_scores"][0]}
        for r in picked:
            bars[r["cell"].label] = r["doc_scores"][1]
        write_svg(
            out / f"attention_rho{_num(rho)}.svg",
            bar_chart([f"d{i + 1}" for i in range(n_docs)], bars, f"Per-document attention, rho={_num(rho)}",
                      "document", "normalized score"),
        )


def _doc_score_rows(results) -> list[dict[str, str]]:
    rows = []
    for r in results:
        if not r["doc_scores"]:
            continue
        c = r["cell"]
        for stage, scores in zip(("init", "final"), r["doc_scores"]):
            for i, s in enumerate(scores):
                rows.append({
                    "method": c.method, "K": "" if c.cmrr is None else _num(c.cmrr), "noise_ratio": _num(c.noise_ratio),
                    "seed": str(c.seed), "stage": stage, "document": str(i), "score": _fmt(float(s)),
                })
    return rows


GOLDEN_COLUMNS = ("method", "K", "noise_ratio", "seed", "example", "golden_init", "golden_final")


def _golden_rows(results) -> list[dict[str, str]]:
    """Per held-out example: golden-document score with adapters at init and after fine-tuning."""
    rows = []
    for res in results:
        c = res["cell"]
        key = {"method": c.method, "K": "" if c.cmrr is None else _num(c.cmrr),
               "noise_ratio": _num(c.noise_ratio), "seed": str(c.seed)}
        for i, (g0, g1) in enumerate(res["golden_pairs"]):
            rows.append({**key, "example": str(i), "golden_init": _fmt(g0), "golden_final": _fmt(g1)})
    return rows


def run_experiment(cfg: ExperimentConfig | str | Path, eval_only: bool = False) -> list[dict[str, str]]:
    """Run (or, with ``eval_only``, re-evaluate) the whole grid; returns the metrics rows."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.load(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = None if eval_only else obtain_base(cfg)
    grid = cells(cfg)
    if cfg.workers > 1 and len(grid) > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(base, cfg, eval_only)) as pool:
            results = list(pool.map(_work, grid))  # map preserves grid order
    else:
        results = [run_cell(base, cfg, c, eval_only) for c in grid]
    rows = metrics_rows(results)
    write_csv(out / "metrics.csv", rows)
    write_csv(out / "doc_scores.csv", _doc_score_rows(results),
              ("method", "K", "noise_ratio", "seed", "stage", "document", "score"))
    write_csv(out / "golden_scores.csv", _golden_rows(results), GOLDEN_COLUMNS)
    _plots(cfg, results, out)
    return rows


def golden_up_flags(cfg: ExperimentConfig, method: str = "opamp", cmrr: float | None = None) -> list[bool]:
    """Re-evaluate finished checkpoints and pool the per-example "golden score rose" flags."""
    flags: list[bool] = []
    for cell in cells(cfg):
        if cell.method == method and (cmrr is None or cell.cmrr == cmrr):
            flags += run_cell(None, cfg, cell, eval_only=True)["golden_up"]
    return flags


def trace_rows(scores: np.ndarray, golden_index: int) -> list[dict[str, str]]:
    return [
        {"document": str(i), "score": _fmt(float(s)), "golden": str(int(i == golden_index))}
        for i, s in enumerate(scores)
    ]


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))

