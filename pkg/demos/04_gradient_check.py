"""
Checking backprop through OpAmp attention with finite differences
=================================================================

The autodiff engine records every operation on a tape and replays it
backwards. To see that the replay is correct, compare each analytic gradient
with a central difference,

    dL/dx_i  ~  (L(x + h e_i) - L(x - h e_i)) / 2h,

computed in float64 with h = 1e-4. The worst elementwise relative error per
adapter tensor should sit far below 1e-4.

The check runs on a tiny adapted model (d = 8, one layer). Adapter W2 starts
at zero, where half of the chain rule is trivially zero, so the script first
nudges every adapter weight away from its initial value.

Run:  python demos/04_gradient_check.py
"""

import numpy as np

from opamp import tensor as T
from opamp.gradcheck import check_gradients
from opamp.model import ModelConfig, attach_opamp_adapters, build_base_model
from opamp.train import make_batch

cfg = ModelConfig(vocab_size=16, d=8, heads=2, layers=1, ffn_width=16, max_sequence_length=16, precision="f64")
rng = np.random.default_rng(0)

model = attach_opamp_adapters(build_base_model(cfg, seed=0), cmrr=10, adapter_dim=4, seed=0)
for t in model.trainable().values():
    t.assign(t.data + rng.normal(0, 0.3, size=t.shape))

# A batch of three random sequences; loss on every next-token prediction.
seqs = [rng.integers(0, cfg.vocab_size, size=7) for _ in range(3)]
inputs, targets, mask = make_batch(seqs, [np.ones(7, bool)] * 3)


def loss():
    return T.cross_entropy(model.forward(inputs), targets, mask)


params = model.trainable()  # the adapter tensors: four slots x (W1, W2)
print(f"loss = {float(loss().data):.6f}\n")
report = check_gradients(loss, list(params.values()))
for name, err in zip(params, report.values()):
    flag = "ok" if err <= 1e-4 else "FAIL"
    print(f"  {name:32s} {err:9.2e}  {flag}")
print(f"\nworst relative error: {max(report.values()):.2e}")
