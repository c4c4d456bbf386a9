"""Synthetic noisy-context lookup task and its metrics.

Each example is a set of documents, exactly one of which (the golden one)
holds the key named in the query. A document looks like::

    [DOC] key v_1 .. v_a [SEP] filler ...

Noise documents are either keyed with a different key ("relevant" noise) or
pure filler ("irrelevant" noise). The model reads the documents, then
``[Q] key`` and must emit ``v_1 .. v_a``.

Noise ratio is a document fraction: ``D = round(1 / (1 - rho))`` documents, one
golden.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, DOC, SEP, QUERY = 0, 1, 2, 3
N_SPECIAL = 4


class TaskError(ValueError):
    """Invalid task configuration or an example that does not fit its budget."""


@dataclass
class TaskConfig:
    vocab_size: int = 64
    n_keys: int = 20
    doc_length: tuple[int, int] = (5, 8)
    answer_length: int = 2
    noise_ratio: float = 0.9
    golden_policy: str = "uniform"  # or "fixed"
    golden_index: int = 0
    count: int = 256
    seed: int = 0
    max_sequence_length: int = 512

    def __post_init__(self):
        self.doc_length = tuple(self.doc_length)
        lo, hi = self.doc_length
        if not 0.0 <= self.noise_ratio < 1.0:
            raise TaskError(f"noise ratio must be in [0, 1), got {self.noise_ratio}")
        if not 1 <= self.answer_length <= 4:
            raise TaskError(f"answer length must be 1..4, got {self.answer_length}")
        if lo < 3 + self.answer_length or hi < lo:
            raise TaskError(f"doc length range {self.doc_length} cannot hold key, separator and answer")
        if self.n_keys < self.n_documents:
            raise TaskError(f"{self.n_keys} keys cannot label {self.n_documents} documents")
        if self.vocab_size - N_SPECIAL - self.n_keys < 2:
            raise TaskError("vocabulary too small for keys plus value tokens")
        if self.golden_policy not in ("uniform", "fixed"):
            raise TaskError(f"unknown golden policy {self.golden_policy!r}")
        if self.golden_policy == "fixed" and not 0 <= self.golden_index < self.n_documents:
            raise TaskError(f"golden index {self.golden_index} outside 0..{self.n_documents - 1}")
        if self.max_length > self.max_sequence_length:
            raise TaskError(
                f"worst-case sequence length {self.max_length} exceeds budget {self.max_sequence_length}"
            )

    @property
    def n_documents(self) -> int:
        return n_documents(self.noise_ratio)

    @property
    def max_length(self) -> int:
        return self.n_documents * self.doc_length[1] + 2 + self.answer_length

    @property
    def key_tokens(self) -> range:
        return range(N_SPECIAL, N_SPECIAL + self.n_keys)

    @property
    def value_tokens(self) -> range:
        return range(N_SPECIAL + self.n_keys, self.vocab_size)

    def replace(self, **changes) -> "TaskConfig":
        return TaskConfig(**{**asdict(self), **changes})


def n_documents(noise_ratio: float) -> int:
    return int(round(1.0 / (1.0 - noise_ratio)))


@dataclass
class NoisyContextExample:
    documents: list[list[int]]
    golden_index: int
    query: list[int]
    answer: list[int]
    noise_ratio: float
    keys: list[int | None] = field(default_factory=list)

    @property
    def golden(self) -> list[int]:
        return self.documents[self.golden_index]

    def to_json(self) -> str:
        return json.dumps(
            {
                "documents": self.documents,
                "golden_index": self.golden_index,
                "query": self.query,
                "answer": self.answer,
                "noise_ratio": self.noise_ratio,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "NoisyContextExample":
        rec = json.loads(line)
        try:
            docs = [list(map(int, d)) for d in rec["documents"]]
            ex = cls(docs, int(rec["golden_index"]), list(map(int, rec["query"])),
                     list(map(int, rec["answer"])), float(rec["noise_ratio"]))
        except (KeyError, TypeError) as exc:
            raise TaskError(f"malformed example record: {exc}") from exc
        ex.keys = [d[1] if SEP in d else None for d in docs]
        return ex


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_example(cfg: TaskConfig, index: int) -> NoisyContextExample:
    """Example ``index`` of the stream defined by ``cfg``; depends on ``(cfg, index)`` only."""
    rng = _rng(cfg.seed, index)
    n_docs = cfg.n_documents
    values = np.asarray(cfg.value_tokens)
    golden = int(rng.integers(n_docs)) if cfg.golden_policy == "uniform" else cfg.golden_index

    n_noise = n_docs - 1
    keyed_noise = np.zeros(n_noise, dtype=bool)
    keyed_noise[: (n_noise + 1) // 2] = True
    rng.shuffle(keyed_noise)
    n_keyed = 1 + int(keyed_noise.sum())
    keys = [int(k) for k in rng.choice(np.asarray(cfg.key_tokens), size=n_keyed, replace=False)]

    documents: list[list[int]] = []
    doc_keys: list[int | None] = []
    answer: list[int] = []
    next_key = 1
    noise_iter = iter(keyed_noise)
    for d in range(n_docs):
        length = int(rng.integers(cfg.doc_length[0], cfg.doc_length[1] + 1))
        is_golden = d == golden
        if is_golden or next(noise_iter):
            key = keys[0] if is_golden else keys[next_key]
            next_key += 0 if is_golden else 1
            value = [int(t) for t in rng.choice(values, size=cfg.answer_length)]
            filler = [int(t) for t in rng.choice(values, size=length - 3 - cfg.answer_length)]
            documents.append([DOC, key, *value, SEP, *filler])
            doc_keys.append(key)
            if is_golden:
                answer = value
        else:
            documents.append([DOC, *(int(t) for t in rng.choice(values, size=length - 1))])
            doc_keys.append(None)
    return NoisyContextExample(documents, golden, [QUERY, keys[0]], answer, cfg.noise_ratio, doc_keys)


def generate_dataset(cfg: TaskConfig, start: int = 0, count: int | None = None) -> list[NoisyContextExample]:
    count = cfg.count if count is None else count
    return [generate_example(cfg, i) for i in range(start, start + count)]


@dataclass
class Assembled:
    tokens: np.ndarray
    answer_mask: np.ndarray
    spans: list[tuple[int, int]]

    @property
    def answer_start(self) -> int:
        return int(np.argmax(self.answer_mask))


def assemble_tokens(ex: NoisyContextExample, max_sequence_length: int | None = None) -> Assembled:
    """Concatenate documents, query and answer; mark answer tokens; record ``[start, end)`` spans."""
    spans, pos = [], 0
    for doc in ex.documents:
        spans.append((pos, pos + len(doc)))
        pos += len(doc)
    tokens = np.array([t for doc in ex.documents for t in doc] + ex.query + ex.answer, dtype=np.int64)
    if max_sequence_length is not None and len(tokens) > max_sequence_length:
        raise TaskError(f"example of length {len(tokens)} exceeds budget {max_sequence_length}")
    mask = np.zeros(len(tokens), dtype=bool)
    mask[len(tokens) - len(ex.answer):] = True
    return Assembled(tokens, mask, spans)


def prompt_tokens(ex: NoisyContextExample) -> np.ndarray:
    """Documents plus query: everything the model sees before answering."""
    return np.array([t for doc in ex.documents for t in doc] + ex.query, dtype=np.int64)


# -- metrics ----------------------------------------------------------------


def _trim(seq: Sequence[int]) -> list[int]:
    return [int(t) for t in seq if int(t) != PAD]


def exact_match(pred: Sequence[int], ref: Sequence[int]) -> int:
    return int(_trim(pred) == _trim(ref))


def partial_match(pred: Sequence[int], ref: Sequence[int]) -> float:
    """Token-level F1 over multisets; two empty sequences score 1."""
    p, r = Counter(_trim(pred)), Counter(_trim(ref))
    if not p and not r:
        return 1.0
    common = sum((p & r).values())
    if common == 0:
        return 0.0
    precision = common / sum(p.values())
    recall = common / sum(r.values())
    return 2 * precision * recall / (precision + recall)


def accuracy(pred_choice: int, gold_choice: int) -> int:
    return int(pred_choice == gold_choice)


def lookup_oracle(ex: NoisyContextExample) -> list[int]:
    """Scan documents for the query key and return the value that follows it."""
    key = ex.query[-1]
    for doc in ex.documents:
        if SEP in doc and doc[1] == key:
            return doc[2: doc.index(SEP)]
    return []


def candidate_answers(ex: NoisyContextExample) -> list[list[int]]:
    """Values of every keyed document, in document order (multiple-choice options)."""
    return [doc[2: doc.index(SEP)] for doc in ex.documents if SEP in doc]


# -- pre-training corpus ----------------------------------------------------


def lookup_sequence(ex: NoisyContextExample, rng: np.random.Generator) -> np.ndarray:
    """Documents followed by a ``[Q] key value`` block for every keyed document, in random order.

    Querying every key (not only the golden one) puts many retrieval targets
    in each sequence, which is what lets a small base model pick up the lookup
    skill from plain next-token training.
    """
    tokens = [t for doc in ex.documents for t in doc]
    keyed = [doc for doc in ex.documents if SEP in doc]
    for j in rng.permutation(len(keyed)):
        doc = keyed[j]
        tokens += [QUERY, doc[1], *doc[2: doc.index(SEP)]]
    return np.array(tokens, dtype=np.int64)


def query_block_mask(tokens: np.ndarray) -> np.ndarray:
    """Loss mask for a lookup sequence: every token after the first ``[Q]``, except ``[Q]`` markers.

    Document tokens are random and carry no learnable signal; leaving them out
    of the loss keeps the gradient focused on retrieval.
    """
    tokens = np.asarray(tokens)
    mask = np.zeros(len(tokens), dtype=bool)
    queries = np.flatnonzero(tokens == QUERY)
    if len(queries):
        mask[queries[0] + 1:] = True
        mask[queries] = False
    return mask


def lookup_corpus(cfg: TaskConfig, count: int, noise_ratios: Sequence[float]) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` (tokens, loss mask) lookup sequences cycling through ``noise_ratios``; seeded by ``cfg.seed``."""
    if count < 1 or not noise_ratios:
        raise TaskError("lookup corpus needs a positive count and at least one noise ratio")
    cfgs = [cfg.replace(noise_ratio=r) for r in noise_ratios]
    out = []
    for i in range(count):
        ex = generate_example(cfgs[i % len(cfgs)], i)
        tokens = lookup_sequence(ex, np.random.default_rng([cfg.seed, i, 1]))
        out.append((tokens, query_block_mask(tokens)))
    return out


def copy_sequence(rng: np.random.Generator, length: int, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Random tokens with one segment repeated verbatim at a random offset.

    The segment (8 to ``length // 2`` tokens) appears after a random prefix and
    is immediately repeated; the loss mask covers the repeat, the only part
    predictable from context. Training on these teaches a small model to copy
    "what followed this token last time" -- the skill lookup relies on.
    """
    if length < 16:
        raise TaskError(f"copy sequences need length >= 16, got {length}")
    n = int(rng.integers(8, length // 2 + 1))
    segment = rng.integers(N_SPECIAL, vocab_size, size=n)
    prefix = rng.integers(N_SPECIAL, vocab_size, size=int(rng.integers(0, length - 2 * n + 1)))
    tail = rng.integers(N_SPECIAL, vocab_size, size=length - 2 * n - len(prefix))
    tokens = np.concatenate([prefix, segment, segment, tail]).astype(np.int64)
    mask = np.zeros(length, dtype=bool)
    mask[len(prefix) + n + 1: len(prefix) + 2 * n] = True  # the repeat's first token is not yet predictable
    return tokens, mask


def copy_corpus(seed: int, count: int, length: int, vocab_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if count < 1:
        raise TaskError("copy corpus needs a positive count")
    return [copy_sequence(np.random.default_rng([seed, i, 2]), length, vocab_size) for i in range(count)]


# -- dataset files ----------------------------------------------------------


def write_dataset(path: str | Path, examples: Iterable[NoisyContextExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_dataset(path: str | Path) -> list[NoisyContextExample]:
    with open(path, encoding="utf-8") as fh:
        return [NoisyContextExample.from_json(line) for line in fh if line.strip()]
