"""Greedy decoding and EM / PM / multiple-choice scoring on noisy-context examples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Model
from .task import PAD, NoisyContextExample, accuracy, candidate_answers, exact_match, partial_match, prompt_tokens


def _pad(seqs: Sequence[np.ndarray]) -> np.ndarray:
    out = np.full((len(seqs), max(len(s) for s in seqs)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def greedy_decode(model: Model, prompts: Sequence[np.ndarray], length: int, batch_size: int = 64) -> list[list[int]]:
    """Append ``length`` argmax tokens to each prompt (no caching; causal masking makes padding inert)."""
    results: list[list[int]] = []
    for lo in range(0, len(prompts), batch_size):
        seqs = [np.asarray(p, dtype=np.int64) for p in prompts[lo: lo + batch_size]]
        generated: list[list[int]] = [[] for _ in seqs]
        for _ in range(length):
            logits = model.logits(_pad(seqs))
            for i, s in enumerate(seqs):
                tok = int(np.argmax(logits[i, len(s) - 1]))
                generated[i].append(tok)
                seqs[i] = np.append(s, tok)
        results.extend(generated)
    return results


def choose_answer(model: Model, ex: NoisyContextExample) -> tuple[int, int]:
    """Multiple-choice variant: pick the candidate value with the highest log-likelihood.

    Returns ``(predicted_choice, gold_choice)`` as indices into
    :func:`candidate_answers`.
    """
    cands = candidate_answers(ex)
    prompt = prompt_tokens(ex)
    seqs = [np.concatenate([prompt, c]) for c in cands]
    logits = model.logits(_pad(seqs)).astype(np.float64)
    logp = logits - logits.max(-1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(-1, keepdims=True))
    n = len(prompt)
    scores = [sum(logp[i, n - 1 + j, t] for j, t in enumerate(c)) for i, c in enumerate(cands)]
    gold = cands.index(ex.answer)
    return int(np.argmax(scores)), gold


@dataclass
class EvalResult:
    em: float
    pm: float
    acc: float | None
    predictions: list[list[int]] = field(default_factory=list)
    em_per_example: list[int] = field(default_factory=list)


def evaluate(model: Model, examples: Sequence[NoisyContextExample], multiple_choice: bool = False) -> EvalResult:
    length = len(examples[0].answer)
    preds = greedy_decode(model, [prompt_tokens(ex) for ex in examples], length)
    ems = [exact_match(p, ex.answer) for p, ex in zip(preds, examples)]
    pms = [partial_match(p, ex.answer) for p, ex in zip(preds, examples)]
    acc = None
    if multiple_choice:
        acc = float(np.mean([accuracy(*choose_answer(model, ex)) for ex in examples]))
    return EvalResult(float(np.mean(ems)), float(np.mean(pms)), acc, preds, ems)
