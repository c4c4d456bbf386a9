"""Multi-head attention, residual adapters and OpAmp (differential/common-mode) attention.

OpAmp attention runs two attention branches over adapter-perturbed queries and
keys and mixes them like an operational amplifier::

    M_bar = A_d * (M_plus - M_minus) + (A_c / 2) * (M_plus + M_minus)

With ``A_c = 1`` and the adapters' output matrices at zero, both branches equal
the base attention matrix and ``M_bar`` collapses to it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ADAPTER_SLOTS = ("q1", "q2", "k1", "k2")


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(B, N, d)`` -> ``(B, h, N, d/h)``."""
    b, n, d = x.shape
    return T.permute(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """``(B, h, N, d_h)`` -> ``(B, N, h * d_h)``."""
    b, h, n, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dh))


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (N, d) or (B, N, d) input, got {x.shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


def attention_matrix(q: Tensor, k: Tensor, heads: int, causal: bool = True) -> Tensor:
    """Per-head ``softmax(Q K^T / sqrt(d_h))`` for batched ``(B, N, d)`` inputs."""
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    scores = T.matmul(split_heads(q, heads), T.transpose(split_heads(k, heads)))
    scores = T.scale(scores, 1.0 / math.sqrt(d // heads))
    mask = causal_mask(q.shape[1]) if causal else None
    return T.softmax_rows(scores, mask)


def standard_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int = 1, causal: bool = True
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention split over ``heads``.

    Inputs are ``(N, d)`` or ``(B, N, d)``. Returns the concatenated head
    outputs (same shape as ``v``) and the attention matrices ``(h, N, N)``
    (``(B, h, N, N)`` for batched input).
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention: Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    (qb, squeeze), (kb, _), (vb, _) = _as_batch(q), _as_batch(k), _as_batch(v)
    m = attention_matrix(qb, kb, heads, causal)
    out = merge_heads(T.matmul(m, split_heads(vb, heads)))
    return _unbatch(out, squeeze), _unbatch(m, squeeze)


# -- adapters ---------------------------------------------------------------


@dataclass
class AdapterParams:
    """Bottleneck adapter ``phi(h W1) W2 + h`` with ``W1: d1 x d2`` and ``W2: d2 x d1``."""

    w1: Tensor
    w2: Tensor
    activation: str = "gelu"

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w2.shape != self.w1.shape[::-1]:
            raise ShapeError(f"adapter: W1 {self.w1.shape} and W2 {self.w2.shape} are not transposed shapes")
        if self.d2 < 1:
            raise ValueError("adapter hidden width must be >= 1")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d1(self) -> int:
        return self.w1.shape[0]

    @property
    def d2(self) -> int:
        return self.w1.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2]


def adapter_forward(h: Tensor, p: AdapterParams) -> Tensor:
    if h.shape[-1] != p.d1:
        raise ShapeError(f"adapter: input width {h.shape[-1]} != adapter width {p.d1}")
    return T.add(T.matmul(T.activation(T.matmul(h, p.w1), p.activation), p.w2), h)


@dataclass
class OpAmpConfig:
    """Fixed amplifier gains. ``cmrr`` is K; the differential gain is ``K * A_c``."""

    cmrr: float
    common_mode_gain: float = 1.0

    def __post_init__(self):
        if not self.common_mode_gain > 0:
            raise ValueError(f"common-mode gain must be > 0, got {self.common_mode_gain}")
        if not self.cmrr >= 0 or not math.isfinite(self.cmrr):
            raise ValueError(f"CMRR must be finite and >= 0, got {self.cmrr}")

    @classmethod
    def from_gains(cls, differential_gain: float, common_mode_gain: float) -> "OpAmpConfig":
        return cls(differential_gain / common_mode_gain, common_mode_gain)

    @property
    def differential_gain(self) -> float:
        return self.cmrr * self.common_mode_gain

    def scaled(self, c: float) -> "OpAmpConfig":
        return OpAmpConfig(self.cmrr, self.common_mode_gain * c)


def combine(m_plus: Tensor, m_minus: Tensor, gains: OpAmpConfig) -> Tensor:
    """Differential plus common-mode mix of two attention matrices."""
    diff = T.scale(T.sub(m_plus, m_minus), gains.differential_gain)
    common = T.scale(T.add(m_plus, m_minus), gains.common_mode_gain / 2)
    return T.add(diff, common)


# -- layers -----------------------------------------------------------------


@dataclass
class LowRankAdapterParams:
    """Additive low-rank delta ``x A B (alpha / r)`` on one projection; ``B`` starts at zero."""

    a: Tensor
    b: Tensor
    alpha: float

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        return T.scale(T.matmul(T.matmul(x, self.a), self.b), self.scaling)

    def parameters(self) -> list[Tensor]:
        return [self.a, self.b]


@dataclass
class AttentionLayer:
    """Base attention block weights: ``Wq, Wk, Wv, Wo`` are ``d x d``.

    ``lowrank`` optionally holds additive low-rank deltas keyed ``"q"``/``"k"``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    lowrank: dict[str, LowRankAdapterParams] | None = None

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    def base_parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]

    def adapter_parameters(self) -> list[Tensor]:
        if not self.lowrank:
            return []
        return [t for slot in ("q", "k") for t in self.lowrank[slot].parameters()]

    def project_qk(self, x: Tensor) -> tuple[Tensor, Tensor]:
        q, k = T.matmul(x, self.wq), T.matmul(x, self.wk)
        if self.lowrank:
            q = T.add(q, self.lowrank["q"].delta(x))
            k = T.add(k, self.lowrank["k"].delta(x))
        return q, k

    def forward(self, x: Tensor, causal: bool = True) -> tuple[Tensor, dict[str, Tensor]]:
        q, k = self.project_qk(x)
        out, m = standard_attention(q, k, T.matmul(x, self.wv), self.heads, causal)
        return T.matmul(out, self.wo), {"bar": m, "plus": m, "minus": m}


@dataclass
class OpAmpAttentionLayer(AttentionLayer):
    """Attention whose Q/K paths go through four adapters ``E^i_j``, mixed by ``gains``."""

    adapters: dict[str, AdapterParams] = field(default_factory=dict)
    gains: OpAmpConfig = field(default_factory=lambda: OpAmpConfig(1.0))

    def __post_init__(self):
        if self.adapters and set(self.adapters) != set(ADAPTER_SLOTS):
            raise ValueError(f"OpAmp layer needs adapters {ADAPTER_SLOTS}, got {sorted(self.adapters)}")

    @classmethod
    def from_base(
        cls,
        base: AttentionLayer,
        cmrr: float,
        adapter_dim: int,
        seed: int,
        activation: str = "gelu",
    ) -> "OpAmpAttentionLayer":
        if adapter_dim < 1:
            raise ValueError(f"adapter dim must be >= 1, got {adapter_dim}")
        d, dtype = base.width, base.wq.dtype
        adapters = {
            slot: AdapterParams(
                Tensor(np.zeros((d, adapter_dim), dtype), requires_grad=True),
                Tensor(np.zeros((adapter_dim, d), dtype), requires_grad=True),
                activation,
            )
            for slot in ADAPTER_SLOTS
        }
        layer = cls(base.wq, base.wk, base.wv, base.wo, base.heads, base.lowrank, adapters)
        zero_init(layer, cmrr, seed)
        return layer

    def adapter_parameters(self) -> list[Tensor]:
        own = [t for slot in ADAPTER_SLOTS for t in self.adapters[slot].parameters()]
        return own + super().adapter_parameters()

    def forward(self, x: Tensor, causal: bool = True) -> tuple[Tensor, dict[str, Tensor]]:
        return opamp_attention(x, self, causal)


def zero_init(layer: OpAmpAttentionLayer, cmrr: float, seed: int) -> None:
    """Reset adapters so each is the identity and set ``A_c = 1``, ``A_d = K``.

    ``W1`` is drawn uniformly from ``[-1/sqrt(d1), 1/sqrt(d1)]`` (slots in the
    fixed order q1, q2, k1, k2); every ``W2`` becomes exactly zero.
    """
    if not cmrr > 0:
        raise ValueError(f"CMRR must be > 0, got {cmrr}")
    rng = np.random.default_rng(seed)
    for slot in ADAPTER_SLOTS:
        p = layer.adapters[slot]
        bound = 1.0 / math.sqrt(p.d1)
        p.w1.assign(rng.uniform(-bound, bound, size=p.w1.shape))
        p.w2.assign(np.zeros(p.w2.shape))
        p.w1.zero_grad()
        p.w2.zero_grad()
    layer.gains = OpAmpConfig(float(cmrr), 1.0)


def opamp_attention(
    x: Tensor, layer: OpAmpAttentionLayer, causal: bool = True
) -> tuple[Tensor, dict[str, Tensor]]:
    """OpAmp attention over ``x`` (``(N, d)`` or ``(B, N, d)``).

    Returns the projected output and a trace with keys ``"bar"``, ``"plus"``
    and ``"minus"`` holding per-head matrices.
    """
    if x.shape[-1] != layer.width:
        raise ShapeError(f"opamp_attention: input width {x.shape[-1]} != layer width {layer.width}")
    xb, squeeze = _as_batch(x)
    q, k = layer.project_qk(xb)
    ad = layer.adapters
    m_plus = attention_matrix(adapter_forward(q, ad["q1"]), adapter_forward(k, ad["k1"]), layer.heads, causal)
    m_minus = attention_matrix(adapter_forward(q, ad["q2"]), adapter_forward(k, ad["k2"]), layer.heads, causal)
    m_bar = combine(m_plus, m_minus, layer.gains)
    v = split_heads(T.matmul(xb, layer.wv), layer.heads)
    out = T.matmul(merge_heads(T.matmul(m_bar, v)), layer.wo)
    trace = {"bar": m_bar, "plus": m_plus, "minus": m_minus}
    return _unbatch(out, squeeze), {key: _unbatch(m, squeeze) for key, m in trace.items()}
