"""
OpAmp attention, step by step
=============================

Standard attention produces one row-stochastic matrix M = softmax(QK^T/sqrt(d_h)).
OpAmp attention builds two of them from adapted queries and keys,

    M+ = softmax(E_q1(Q) E_k1(K)^T / sqrt(d_h))
    M- = softmax(E_q2(Q) E_k2(K)^T / sqrt(d_h))

and mixes them the way a difference amplifier mixes its inputs:

    M_bar = A_d (M+ - M-) + A_c (M+ + M-) / 2,      A_c = 1, A_d = K.

Each adapter is a small residual MLP, E(x) = act(x W1) W2 + x. W2 starts at
zero, so every E is the identity, M+ == M-, and M_bar == M. Plugging the
adapters into a pretrained model therefore changes nothing until training
moves W2.

This script walks through those facts numerically on one attention layer.

Run:  python demos/02_opamp_attention.py
"""

import numpy as np

from opamp.attention import OpAmpAttentionLayer, OpAmpConfig, opamp_attention
from opamp.model import ModelConfig, build_base_model
from opamp.tensor import Tensor

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# 1. Borrow an attention layer from a freshly built toy model.
# ---------------------------------------------------------------------------
cfg = ModelConfig(d=16, heads=2, layers=1, ffn_width=32, max_sequence_length=32, precision="f64")
base = build_base_model(cfg, seed=0).blocks[0].attn
for w in (base.wq, base.wk):  # sharper than the 0.02 init, so the patterns are visible
    w.assign(rng.normal(0, 0.5, size=w.shape))
x = Tensor(rng.normal(size=(6, cfg.d)))

y_std, t_std = base.forward(x)
print("standard attention, head 0 (causal):")
print(t_std["bar"].data[0])

# ---------------------------------------------------------------------------
# 2. Wrap it with OpAmp adapters at several CMRR values: output is unchanged.
# ---------------------------------------------------------------------------
print("\nzero-initialised adapters reproduce the base output exactly:")
for K in [1, 5, 10, 20]:
    layer = OpAmpAttentionLayer.from_base(base, cmrr=K, adapter_dim=4, seed=K)
    y, _ = opamp_attention(x, layer)
    print(f"  K={K:2d}  max |y_opamp - y_std| = {np.abs(y.data - y_std.data).max():.2e}")

# ---------------------------------------------------------------------------
# 3. Perturb W2 so the two branches disagree.
# ---------------------------------------------------------------------------
layer = OpAmpAttentionLayer.from_base(base, cmrr=10, adapter_dim=4, seed=1)
for slot, p in layer.adapters.items():
    p.w2.assign(rng.normal(0, 1.0, size=p.w2.shape))
_, tr = opamp_attention(x, layer)
m_plus, m_minus, m_bar = (tr[k].data[0] for k in ("plus", "minus", "bar"))

print("\nafter perturbing W2 (K=10), head 0:")
print("M+ =\n", m_plus)
print("M- =\n", m_minus)
print("M_bar =\n", m_bar)

# ---------------------------------------------------------------------------
# 4. Row sums: the differential part sums to zero, so each row sums to A_c.
#    Entries may go negative -- M_bar is no longer a probability matrix.
# ---------------------------------------------------------------------------
print("\nrow sums of M_bar:", m_bar.sum(-1))
print("most negative entry:", m_bar.min())

# ---------------------------------------------------------------------------
# 5. Gains act linearly: scaling (A_d, A_c) by c scales M_bar by c.
# ---------------------------------------------------------------------------
for gains in [OpAmpConfig.from_gains(10, 1), OpAmpConfig.from_gains(20, 2), OpAmpConfig.from_gains(0, 2)]:
    layer.gains = gains
    _, tr = opamp_attention(x, layer)
    print(f"A_d={gains.differential_gain:4g} A_c={gains.common_mode_gain:g}: "
          f"row sums {np.unique(np.round(tr['bar'].data.sum(-1), 12))}, "
          f"|M_bar|max {np.abs(tr['bar'].data).max():.3f}")
print("(A_d=0, A_c=2 gives M+ + M-: the plain sum of both branches)")
