"""
The synthetic noisy-context lookup task
=======================================

Every example is a handful of short token "documents" followed by a query.
Exactly one document -- the golden one -- carries the answer:

    [DOC] key v1 .. va [SEP] filler ...

The query is [Q] key, and the model must emit v1 .. va. The other documents
are noise: half of them carry a different key with its own value ("relevant"
distractors), the rest are pure filler ("irrelevant"). The noise ratio rho sets
the document count D = round(1 / (1 - rho)), so rho = 0.9 means ten documents
with one useful one.

This script prints a few examples, shows the lookup oracle solving them, and
exercises the metrics (exact match, partial match, multiple-choice accuracy).

Run:  python demos/03_noisy_context_task.py
"""

from opamp.task import (
    DOC, PAD, QUERY, SEP,
    TaskConfig, assemble_tokens, candidate_answers, exact_match, generate_dataset, generate_example,
    lookup_oracle, n_documents, partial_match,
)

NAMES = {PAD: "PAD", DOC: "DOC", SEP: "SEP", QUERY: "Q"}


def show_tokens(tokens) -> str:
    return " ".join(NAMES.get(t, str(t)) for t in tokens)


# ---------------------------------------------------------------------------
# 1. Document count as a function of the noise ratio.
# ---------------------------------------------------------------------------
for rho in [0.0, 0.5, 0.67, 0.8, 0.9]:
    print(f"rho={rho:<5} -> {n_documents(rho):2d} documents")

# ---------------------------------------------------------------------------
# 2. One example at rho = 0.8.
# ---------------------------------------------------------------------------
cfg = TaskConfig(noise_ratio=0.8, seed=0)
ex = generate_example(cfg, index=0)
print(f"\nexample 0 at rho=0.8 (golden document #{ex.golden_index}):")
for i, doc in enumerate(ex.documents):
    role = "golden" if i == ex.golden_index else ("relevant" if ex.keys[i] is not None else "irrelevant")
    print(f"  [{i}] {role:10s} {show_tokens(doc)}")
print(f"  query   {show_tokens(ex.query)}")
print(f"  answer  {ex.answer}")

seq = assemble_tokens(ex)
print(f"\nassembled training sequence ({len(seq.tokens)} tokens, loss on the last {len(ex.answer)}):")
print(" ", show_tokens(seq.tokens))

# ---------------------------------------------------------------------------
# 3. Generation is a pure function of (config, index).
# ---------------------------------------------------------------------------
again = generate_example(cfg, index=0)
print("\nregenerated example identical:", again == ex)

# ---------------------------------------------------------------------------
# 4. The oracle finds the document whose key matches the query.
# ---------------------------------------------------------------------------
for rho in [0.0, 0.8, 0.9]:
    data = generate_dataset(TaskConfig(noise_ratio=rho, seed=1), count=1000)
    em = sum(exact_match(lookup_oracle(e), e.answer) for e in data) / len(data)
    print(f"oracle exact match at rho={rho}: {em:.3f}")

# ---------------------------------------------------------------------------
# 5. Metrics on deliberately wrong predictions.
# ---------------------------------------------------------------------------
gold = ex.answer
print("\nmetrics against", gold)
for pred in [gold, gold[:1], gold[::-1], [PAD] * len(gold)]:
    print(f"  pred {str(pred):12s} EM={exact_match(pred, gold)}  PM={partial_match(pred, gold):.2f}")
print("multiple-choice candidates:", candidate_answers(ex))
