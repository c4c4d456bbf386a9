"""Per-document attention tracing at the answer-generation position."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .model import Model
from .task import PAD, NoisyContextExample, prompt_tokens
from .tensor import no_grad


@dataclass
class AttentionTrace:
    """Attention of one example.

    ``layers[l]`` maps ``"bar"``, ``"plus"``, ``"minus"`` to ``(h, N, N)``
    matrices; ``scores`` is the normalized per-document share at the last
    prompt position.
    """

    layers: list[dict[str, np.ndarray]]
    spans: list[tuple[int, int]]
    position: int
    scores: np.ndarray
    selected_layers: tuple[int, ...]


def document_scores(rows: np.ndarray, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Normalize attention mass per document.

    ``rows`` is ``(L, h, N)``: the ``M_bar`` row at the query position for each
    selected layer and head. Mass is summed over each span, averaged over
    layers and heads, clamped at zero and normalized to sum to one. If every
    document clamps to zero the result is uniform.
    """
    per_doc = np.array([rows[..., a:b].sum(axis=-1).mean() for a, b in spans], dtype=np.float64)
    per_doc = np.clip(per_doc, 0.0, None)
    total = per_doc.sum()
    if total <= 0:
        return np.full(len(spans), 1.0 / len(spans))
    return per_doc / total


def _spans(ex: NoisyContextExample) -> list[tuple[int, int]]:
    spans, pos = [], 0
    for doc in ex.documents:
        spans.append((pos, pos + len(doc)))
        pos += len(doc)
    return spans


def _select(n_layers: int, layers: Sequence[int] | int | None) -> tuple[int, ...]:
    if layers is None:
        return tuple(range(n_layers))
    if isinstance(layers, int):
        layers = (layers,)
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise ValueError(f"layer {layer} outside 0..{n_layers - 1}")
    return tuple(layers)


def trace_attention(
    model: Model, example: NoisyContextExample, layers: Sequence[int] | int | None = None
) -> AttentionTrace:
    prompt = prompt_tokens(example)
    spans = _spans(example)
    if spans[-1][1] > len(prompt):
        raise ValueError("document spans extend past the prompt")
    with no_grad():
        _, traces = model.forward(prompt, trace=True)
    selected = _select(len(traces), layers)
    pos = len(prompt) - 1
    rows = np.stack([traces[i]["bar"][:, pos, :] for i in selected])
    return AttentionTrace(traces, spans, pos, document_scores(rows, spans), selected)


def batch_document_scores(
    model: Model,
    examples: Sequence[NoisyContextExample],
    layers: Sequence[int] | int | None = None,
    batch_size: int = 32,
) -> list[np.ndarray]:
    """:func:`trace_attention` scores for many examples, batched with right padding."""
    out: list[np.ndarray] = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo: lo + batch_size]
        prompts = [prompt_tokens(ex) for ex in chunk]
        ids = np.full((len(chunk), max(len(p) for p in prompts)), PAD, dtype=np.int64)
        for i, p in enumerate(prompts):
            ids[i, : len(p)] = p
        with no_grad():
            _, traces = model.forward(ids, trace=True)
        selected = _select(len(traces), layers)
        for i, (ex, p) in enumerate(zip(chunk, prompts)):
            rows = np.stack([traces[l]["bar"][i, :, len(p) - 1, :] for l in selected])
            out.append(document_scores(rows, _spans(ex)))
    return out


def golden_scores(model: Model, examples: Sequence[NoisyContextExample], **kw) -> np.ndarray:
    scores = batch_document_scores(model, examples, **kw)
    return np.array([s[ex.golden_index] for s, ex in zip(scores, examples)])


def is_increasing(scores: np.ndarray) -> bool:
    """Positive rank correlation between document position and score."""
    if len(scores) < 2:
        return False
    rho = spearmanr(np.arange(len(scores)), scores).statistic
    return bool(rho > 0)
