"""
Differential amplifier gains from a four-resistor network
=========================================================

A difference amplifier built from R1..R4 responds to its two inputs as

    V_out = c+ * V+  -  c- * V-

with c+ = R4/(R3+R4) * (R1+R2)/R1 and c- = R2/R1. Rewriting the same output
in terms of the difference and the average of the inputs gives the
differential gain A_d and the common-mode gain A_c:

    V_out = A_d * (V+ - V-) + A_c * (V+ + V-) / 2

When the network is matched (R2/R1 == R4/R3) the common-mode gain vanishes
and the common-mode rejection ratio K = A_d / A_c is infinite. Any mismatch
lets some of the shared signal through. In the attention analogue, K is the
knob that trades noise cancellation against keeping the shared signal.

Run:  python demos/01_circuit_gains.py
"""

import numpy as np

from opamp.circuit import ResistorNetwork, gains_from_resistors, opamp_output, resistor_output


def show(r: ResistorNetwork) -> None:
    g = gains_from_resistors(r)
    print(f"R = ({r.r1:g}, {r.r2:g}, {r.r3:g}, {r.r4:g})  ->  A_d = {g.differential:.6g}, "
          f"A_c = {g.common_mode:.6g}, K = {g.cmrr:.6g}")


print("A matched network rejects the common mode completely:")
show(ResistorNetwork(1000, 10000, 1000, 10000))

print("\nA deliberately mismatched one does not:")
show(ResistorNetwork(1, 2, 1, 3))

# ---------------------------------------------------------------------------
# Both output forms agree: feed the same inputs through each.
# ---------------------------------------------------------------------------
r = ResistorNetwork(1, 2, 1, 3)
g = gains_from_resistors(r)
for vp, vm in [(1.0, 1.0), (1.0, 0.0), (2.5, -0.5)]:
    print(f"V+={vp:5.2f} V-={vm:5.2f}: gain form {opamp_output(vp, vm, g):8.4f}, "
          f"resistor form {resistor_output(vp, vm, r):8.4f}")

# ---------------------------------------------------------------------------
# CMRR as a function of resistor tolerance.
# A 10x amplifier whose R4 drifts by a fraction eps: K falls roughly like 1/eps.
# ---------------------------------------------------------------------------
print("\nCMRR of a 10x amplifier as R4 drifts:")
for eps in [1e-4, 1e-3, 1e-2, 5e-2]:
    g = gains_from_resistors(ResistorNetwork(1e3, 1e4, 1e3, 1e4 * (1 + eps)))
    print(f"  mismatch {eps:7.1e}: K = {g.cmrr:12.1f}  ({20 * np.log10(g.cmrr):5.1f} dB)")
