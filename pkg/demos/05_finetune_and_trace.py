"""
Fine-tuning OpAmp adapters and watching attention move to the golden document
============================================================================

The committed base model (artifacts/base.ckpt) was pre-trained to look up
values by key, but with ten documents in context (noise ratio 0.9) it is
easily distracted. This script:

  1. attaches OpAmp adapters at K = 10 and a low-rank baseline to that base,
  2. fine-tunes only the adapters on noisy examples (base weights stay frozen),
  3. compares exact match on held-out examples, and
  4. traces the per-document attention share at the answer position, before
     and after fine-tuning, for one example.

It takes a couple of minutes on one CPU core.

Run:  python demos/05_finetune_and_trace.py
"""

from pathlib import Path

import numpy as np

from opamp.checkpoint import load_checkpoint
from opamp.evaluation import evaluate
from opamp.experiment import zeroed
from opamp.model import attach_lowrank_baseline, attach_opamp_adapters
from opamp.task import TaskConfig, generate_dataset
from opamp.tracing import batch_document_scores
from opamp.train import TrainingHyperparams, finetune

ROOT = Path(__file__).resolve().parents[1]
base = load_checkpoint(ROOT / "artifacts" / "base.ckpt")
print(f"base model: d={base.config.d}, layers={base.config.layers}, "
      f"{sum(t.data.size for t in base.parameters().values())} parameters")

task = TaskConfig(noise_ratio=0.9, seed=2024)
train = generate_dataset(task, 0, 1000)
held_out = generate_dataset(task, 1_000_000, 200)
print(f"base model EM at rho=0.9: {evaluate(base, held_out).em:.3f}")

# ---------------------------------------------------------------------------
# Attach adapters. Both variants have 16384 trainable parameters.
# ---------------------------------------------------------------------------
models = {
    "OpAmp K=10": attach_opamp_adapters(base, cmrr=10, adapter_dim=16, seed=0),
    "low-rank r=32": attach_lowrank_baseline(base, r=32, alpha=8, seed=0),
}
hp = TrainingHyperparams(steps=300, batch_size=16, learning_rate=1e-3)
for name, model in models.items():
    n = sum(t.data.size for t in model.trainable().values())
    log = finetune(model, train, hp)
    print(f"{name:14s} trainable={n}  loss {np.mean(log.losses[:10]):.3f} -> {np.mean(log.losses[-10:]):.3f}  "
          f"held-out EM {evaluate(model, held_out).em:.3f}")

# ---------------------------------------------------------------------------
# Per-document attention share at the answer position, before and after.
# ---------------------------------------------------------------------------
opamp = models["OpAmp K=10"]
ex = held_out[0]
before = batch_document_scores(zeroed(opamp), [ex])[0]
after = batch_document_scores(opamp, [ex])[0]
print(f"\nexample 0: golden document is #{ex.golden_index}")
for i, (b, a) in enumerate(zip(before, after)):
    mark = "  <- golden" if i == ex.golden_index else ""
    print(f"  doc {i}: {b:.3f} -> {a:.3f}  {'#' * int(40 * a)}{mark}")

g0 = np.array([s[e.golden_index] for s, e in zip(batch_document_scores(zeroed(opamp), held_out[:100]), held_out)])
g1 = np.array([s[e.golden_index] for s, e in zip(batch_document_scores(opamp, held_out[:100]), held_out)])
print(f"\ngolden share rose on {np.mean(g1 > g0):.0%} of 100 held-out examples "
      f"(mean {g0.mean():.3f} -> {g1.mean():.3f})")
