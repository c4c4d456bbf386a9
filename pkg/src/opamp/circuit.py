"""Scalar differential / operational amplifier algebra.

Used as an independent check on the gain arithmetic that OpAmp attention
borrows: a four-resistor difference amplifier has output

    V_out = V+ * (R4 / (R3 + R4)) * ((R1 + R2) / R1) - V- * (R2 / R1)
          = A_d (V+ - V-) + (A_c / 2) (V+ + V-)
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ResistorNetwork:
    r1: float
    r2: float
    r3: float
    r4: float

    def __post_init__(self):
        for name in ("r1", "r2", "r3", "r4"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name.upper()} must be a positive resistance, got {value}")

    @property
    def positive_coefficient(self) -> float:
        """Gain applied to V+ (non-inverting path)."""
        return (self.r4 / (self.r3 + self.r4)) * ((self.r1 + self.r2) / self.r1)

    @property
    def negative_coefficient(self) -> float:
        """Gain applied to V- (inverting path)."""
        return self.r2 / self.r1


@dataclass(frozen=True)
class AmplifierGains:
    differential: float
    common_mode: float

    @property
    def cmrr(self) -> float:
        """``A_d / A_c``; ``inf`` for an ideal (``A_c == 0``) amplifier."""
        if self.common_mode == 0:
            return math.inf
        return self.differential / self.common_mode


def gains_from_resistors(r: ResistorNetwork) -> AmplifierGains:
    """Equate coefficients of V+ and V- between the two forms of the output.

    ``c+ = A_d + A_c/2`` and ``c- = A_d - A_c/2`` give
    ``A_d = (c+ + c-)/2`` and ``A_c = c+ - c-``.
    """
    cp, cm = r.positive_coefficient, r.negative_coefficient
    if r.r2 * r.r3 == r.r1 * r.r4:
        # matched bridge: c+ == c- analytically, avoid rounding residue
        return AmplifierGains(cm, 0.0)
    return AmplifierGains((cp + cm) / 2, cp - cm)


def opamp_output(v_plus: float, v_minus: float, g: AmplifierGains) -> float:
    return g.differential * (v_plus - v_minus) + g.common_mode / 2 * (v_plus + v_minus)


def diff_output(v_plus: float, v_minus: float, a_d: float) -> float:
    """Ideal difference amplifier."""
    return a_d * (v_plus - v_minus)


def resistor_output(v_plus: float, v_minus: float, r: ResistorNetwork) -> float:
    """Output evaluated directly from the resistor network."""
    return v_plus * r.positive_coefficient - v_minus * r.negative_coefficient
