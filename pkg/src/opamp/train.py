"""Pre-training and adapter fine-tuning loops (AdamW, linear warm-up)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import OpAmpAttentionLayer
from .model import Model
from .task import PAD, NoisyContextExample, assemble_tokens


class InvariantError(RuntimeError):
    """An algebraic or freezing invariant failed during training."""


@dataclass
class TrainingHyperparams:
    learning_rate: float = 3e-3
    warmup_ratio: float = 0.03
    epochs: int = 1
    batch_size: int = 16
    steps: int | None = None  # overrides epochs when set
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    adapter_dim: int = 16
    lowrank_r: int = 32
    lowrank_alpha: float = 8.0
    joint_lowrank: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError(f"warmup ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def total_steps(self, n_examples: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_examples / self.batch_size)


PRESETS = {
    # values reported for the large-model runs; kept for reference
    "paper": TrainingHyperparams(learning_rate=2e-4, epochs=1, adapter_dim=512, lowrank_r=64, lowrank_alpha=16.0),
    "desk": TrainingHyperparams(),
}


@dataclass
class TrainingLog:
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses)


class AdamW:
    """Adam with decoupled weight decay over a fixed name -> tensor mapping."""

    def __init__(self, params: dict[str, T.Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if lr == 0:
                continue
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.assign(p.data - lr * update)


def clip_grad_norm(params: Sequence[T.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


def warmup_lr(step: int, total: int, hp: TrainingHyperparams) -> float:
    """Linear ramp over the first ``ceil(warmup_ratio * total)`` steps, then constant."""
    warm = math.ceil(hp.warmup_ratio * total)
    if warm == 0:
        return hp.learning_rate
    return hp.learning_rate * min(1.0, (step + 1) / warm)


def make_batch(seqs: Sequence[np.ndarray], loss_masks: Sequence[np.ndarray]):
    """Right-pad to a common length; returns inputs, next-token targets and the loss mask.

    ``loss_masks[i][t]`` marks token ``t`` as something to predict, so the
    logit at position ``t - 1`` is scored. Causal attention means padding
    never influences real positions.
    """
    n = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), n), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, (s, m) in enumerate(zip(seqs, loss_masks)):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = m
    return tokens[:, :-1], tokens[:, 1:], mask[:, 1:]


def _batches(n: int, total: int, batch_size: int, seed: int):
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for _ in range(total):
        while len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def _run(
    model: Model,
    seqs: list[np.ndarray],
    masks: list[np.ndarray],
    hp: TrainingHyperparams,
    after_step: Callable[[Model, int], None] | None = None,
) -> TrainingLog:
    params = model.trainable()
    opt = AdamW(params, hp.betas, hp.eps, hp.weight_decay)
    log = TrainingLog()
    total = hp.total_steps(len(seqs))
    for step, idx in enumerate(_batches(len(seqs), total, min(hp.batch_size, len(seqs)), hp.seed)):
        inputs, targets, mask = make_batch([seqs[i] for i in idx], [masks[i] for i in idx])
        opt.zero_grad()
        loss = T.cross_entropy(model.forward(inputs), targets, mask)
        T.backward(loss)
        if hp.grad_clip:
            clip_grad_norm(list(params.values()), hp.grad_clip)
        lr = warmup_lr(step, total, hp)
        opt.step(lr)
        log.losses.append(float(loss.data))
        log.learning_rates.append(lr)
        if after_step is not None:
            after_step(model, step)
    opt.zero_grad()
    return log


def _as_sequence(item) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(item, NoisyContextExample):
        tokens = assemble_tokens(item).tokens
        return tokens, np.ones(len(tokens), dtype=bool)
    if isinstance(item, tuple):
        tokens, mask = (np.asarray(item[0], dtype=np.int64), np.asarray(item[1], dtype=bool))
        if tokens.shape != mask.shape:
            raise ValueError(f"pretrain: token/mask shapes differ {tokens.shape} vs {mask.shape}")
        return tokens, mask
    tokens = np.asarray(item, dtype=np.int64)
    return tokens, np.ones(len(tokens), dtype=bool)


def pretrain(model: Model, corpus: Sequence, hp: TrainingHyperparams) -> TrainingLog:
    """Next-token training of every parameter on ``corpus``.

    Items are examples (loss on every token), token arrays (likewise) or
    ``(tokens, loss_mask)`` pairs.
    """
    if len(corpus) == 0:
        raise ValueError("pretrain: corpus is empty")
    seqs, masks = zip(*(_as_sequence(c) for c in corpus))
    return _run(model, list(seqs), list(masks), hp)


def row_sum_error(model: Model, ids: np.ndarray) -> float:
    """Largest deviation of an OpAmp ``M_bar`` row sum from ``A_c`` (0 for other layers)."""
    with T.no_grad():
        _, traces = model.forward(ids, trace=True)
    worst = 0.0
    for block, tr in zip(model.blocks, traces):
        if isinstance(block.attn, OpAmpAttentionLayer):
            sums = tr["bar"].astype(np.float64).sum(axis=-1)
            worst = max(worst, float(np.abs(sums - block.attn.gains.common_mode_gain).max()))
    return worst


def finetune(
    model: Model,
    dataset: Sequence[NoisyContextExample],
    hp: TrainingHyperparams,
    probe: np.ndarray | None = None,
    row_sum_tol: float | None = None,
) -> TrainingLog:
    """Train the adapter parameters on answer tokens only.

    When ``probe`` token ids are given, the ``M_bar`` row-sum law is checked on
    them after every optimizer step. The default tolerance is
    ``1e-6 * max(10, A_d)``: rounding in ``M+`` and ``M-`` is amplified by the
    differential gain, so the attainable float32 error grows with ``A_d``.
    Frozen tensors are compared bit-for-bit before and after; either violation
    raises :class:`InvariantError`.
    """
    if model.config.attention_kind == "standard" or not model.trainable():
        raise ValueError("finetune: expects an adapted model (attach adapters first)")
    if not dataset:
        raise ValueError("finetune: dataset is empty")
    seqs, masks = [], []
    for ex in dataset:
        if not ex.answer:
            raise ValueError("finetune: example without an answer span")
        a = assemble_tokens(ex)
        seqs.append(a.tokens)
        masks.append(a.answer_mask)
    declared = {k for k in model.parameters() if ".opamp." in k or ".lowrank." in k}
    if set(model.trainable()) != declared:
        extra = sorted(set(model.trainable()) ^ declared)
        raise InvariantError(f"trainable set differs from the declared adapter set: {extra[:5]}")
    frozen = {k: t.data.copy() for k, t in model.frozen().items()}

    gain = max((b.attn.gains.differential_gain for b in model.blocks if isinstance(b.attn, OpAmpAttentionLayer)), default=0.0)
    tol = row_sum_tol if row_sum_tol is not None else 1e-6 * max(10.0, gain)

    def check(m: Model, step: int) -> None:
        err = row_sum_error(m, probe)
        if err > tol:
            raise InvariantError(f"row-sum law violated after step {step}: max error {err:.3g}")

    log = _run(model, seqs, masks, hp, check if probe is not None else None)
    for k, t in model.frozen().items():
        if not np.array_equal(frozen[k], t.data):
            raise InvariantError(f"frozen tensor {k} changed during fine-tuning")
    return log
