"""Toy decoder-only transformer with swappable attention adaptation.

The base model is a pre-norm stack::

    x = tok_emb[ids] + pos_emb[:N]
    x = x + Attn(LN1(x));  x = x + FFN(LN2(x))     (per block)
    logits = LN_f(x) @ head

Adaptation freezes every base tensor and adds trainable parameters only in the
attention Q/K paths: four OpAmp adapters per layer, or low-rank deltas on
``Wq``/``Wk`` (the baseline), or both.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionLayer, LowRankAdapterParams, OpAmpAttentionLayer, OpAmpConfig
from .tensor import Tensor

ATTENTION_KINDS = ("standard", "opamp", "lowrank-baseline")
DTYPES = {"f32": np.float32, "f64": np.float64}


class ConfigError(ValueError):
    """Invalid model or adaptation configuration."""


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn_width: int = 256
    max_sequence_length: int = 512
    attention_kind: str = "standard"
    precision: str = "f32"

    def __post_init__(self):
        for name in ("vocab_size", "d", "heads", "layers", "ffn_width", "max_sequence_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def parameter_count(self) -> int:
        """Closed-form size of the base (unadapted) model."""
        d, f, v = self.d, self.ffn_width, self.vocab_size
        per_block = 4 * d * d + 2 * 2 * d + d * f + f + f * d + d
        return v * d + self.max_sequence_length * d + self.layers * per_block + 2 * d + d * v


@dataclass
class AdaptationConfig:
    kind: str = "standard"
    cmrr: float = 0.0
    adapter_dim: int = 0
    activation: str = "gelu"
    lowrank_r: int = 0
    lowrank_alpha: float = 0.0
    joint_lowrank: bool = False
    seed: int = 0


@dataclass
class Block:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionLayer
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def forward(self, x: Tensor, causal: bool = True):
        a, trace = self.attn.forward(T.layer_norm(x, self.ln1_gamma, self.ln1_beta), causal)
        x = T.add(x, a)
        h = T.layer_norm(x, self.ln2_gamma, self.ln2_beta)
        h = T.add_bias(T.matmul(T.gelu(T.add_bias(T.matmul(h, self.ffn_w1), self.ffn_b1)), self.ffn_w2), self.ffn_b2)
        return T.add(x, h), trace


@dataclass
class Model:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[Block]
    lnf_gamma: Tensor
    lnf_beta: Tensor
    head: Tensor
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            yield p + "ln1.gamma", b.ln1_gamma
            yield p + "ln1.beta", b.ln1_beta
            for name, t in zip(("wq", "wk", "wv", "wo"), b.attn.base_parameters()):
                yield p + "attn." + name, t
            yield p + "ln2.gamma", b.ln2_gamma
            yield p + "ln2.beta", b.ln2_beta
            yield p + "ffn.w1", b.ffn_w1
            yield p + "ffn.b1", b.ffn_b1
            yield p + "ffn.w2", b.ffn_w2
            yield p + "ffn.b2", b.ffn_b2
            if isinstance(b.attn, OpAmpAttentionLayer):
                for slot, ad in b.attn.adapters.items():
                    yield f"{p}attn.opamp.{slot}.w1", ad.w1
                    yield f"{p}attn.opamp.{slot}.w2", ad.w2
            if b.attn.lowrank:
                for slot, lr in b.attn.lowrank.items():
                    yield f"{p}attn.lowrank.{slot}.a", lr.a
                    yield f"{p}attn.lowrank.{slot}.b", lr.b
        yield "ln_f.gamma", self.lnf_gamma
        yield "ln_f.beta", self.lnf_beta
        yield "head", self.head

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters() if t.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters() if not t.requires_grad}

    def gains(self) -> OpAmpConfig | None:
        attn = self.blocks[0].attn
        return attn.gains if isinstance(attn, OpAmpAttentionLayer) else None

    def forward(self, ids, causal: bool = True, trace: bool = False):
        """Logits ``(B, N, V)`` for token ids ``(B, N)`` (or ``(N, V)`` for ``(N,)``).

        With ``trace=True`` also returns one dict per layer holding numpy
        copies of the ``"bar"``, ``"plus"`` and ``"minus"`` attention matrices.
        """
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        n = ids.shape[1]
        if n > self.config.max_sequence_length:
            raise ValueError(f"sequence length {n} exceeds max_sequence_length {self.config.max_sequence_length}")
        pos = T.embedding(self.pos_emb, np.broadcast_to(np.arange(n), ids.shape))
        x = T.add(T.embedding(self.tok_emb, ids), pos)
        traces = []
        for block in self.blocks:
            x, tr = block.forward(x, causal)
            if trace:
                traces.append({k: m.data.copy() for k, m in tr.items()})
        logits = T.matmul(T.layer_norm(x, self.lnf_gamma, self.lnf_beta), self.head)
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
            traces = [{k: m[0] for k, m in tr.items()} for tr in traces]
        return (logits, traces) if trace else logits

    def logits(self, ids) -> np.ndarray:
        with T.no_grad():
            return self.forward(ids).data


def build_base_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Standard-attention model with GPT-style N(0, 0.02) init; residual outputs shrunk by ``sqrt(2L)``."""
    if cfg.attention_kind != "standard":
        cfg = ModelConfig(**{**asdict(cfg), "attention_kind": "standard"})
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    d, f = cfg.d, cfg.ffn_width
    resid_std = 0.02 / np.sqrt(2 * cfg.layers)

    def normal(shape, std=0.02):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def const(value, shape):
        return Tensor(np.full(shape, value, dtype=dt), requires_grad=True)

    tok = normal((cfg.vocab_size, d))
    pos = normal((cfg.max_sequence_length, d))
    blocks = []
    for _ in range(cfg.layers):
        attn = AttentionLayer(normal((d, d)), normal((d, d)), normal((d, d)), normal((d, d), resid_std), cfg.heads)
        blocks.append(
            Block(
                const(1.0, d), const(0.0, d), attn, const(1.0, d), const(0.0, d),
                normal((d, f)), const(0.0, f), normal((f, d), resid_std), const(0.0, d),
            )
        )
    return Model(cfg, tok, pos, blocks, const(1.0, d), const(0.0, d), normal((d, cfg.vocab_size)))


def _frozen_copy(model: Model) -> Model:
    clone = copy.deepcopy(model)
    for _, t in clone.named_parameters():
        t.requires_grad = False
        t.grad = None
    return clone


def _lowrank(d: int, r: int, alpha: float, dtype, rng: np.random.Generator) -> dict[str, LowRankAdapterParams]:
    bound = 1.0 / np.sqrt(d)
    return {
        slot: LowRankAdapterParams(
            Tensor(rng.uniform(-bound, bound, size=(d, r)).astype(dtype), requires_grad=True),
            Tensor(np.zeros((r, d), dtype=dtype), requires_grad=True),
            float(alpha),
        )
        for slot in ("q", "k")
    }


def attach_opamp_adapters(
    model: Model,
    cmrr: float,
    adapter_dim: int,
    seed: int = 0,
    activation: str = "gelu",
    joint_lowrank: bool = False,
    lowrank_r: int = 32,
    lowrank_alpha: float = 8.0,
) -> Model:
    """Frozen copy of ``model`` with every attention layer turned into OpAmp attention.

    Adapters are zero-initialised, so the result computes exactly the base
    model's logits until trained. ``joint_lowrank`` additionally attaches the
    low-rank Q/K deltas and trains both.
    """
    if model.config.attention_kind != "standard":
        raise ConfigError("OpAmp adapters attach to a standard-attention model")
    if not cmrr > 0:
        raise ConfigError(f"CMRR must be > 0, got {cmrr}")
    if adapter_dim < 1:
        raise ConfigError(f"adapter dim must be >= 1, got {adapter_dim}")
    if joint_lowrank and lowrank_r < 1:
        raise ConfigError(f"low-rank r must be >= 1, got {lowrank_r}")
    adapted = _frozen_copy(model)
    lr_rng = np.random.default_rng([seed, 1])
    for i, block in enumerate(adapted.blocks):
        if joint_lowrank:
            block.attn.lowrank = _lowrank(block.attn.width, lowrank_r, lowrank_alpha, model.config.dtype, lr_rng)
        block.attn = OpAmpAttentionLayer.from_base(block.attn, cmrr, adapter_dim, [seed, 0, i], activation)
    adapted.config = ModelConfig(**{**asdict(model.config), "attention_kind": "opamp"})
    adapted.adaptation = AdaptationConfig(
        "opamp", float(cmrr), adapter_dim, activation,
        lowrank_r if joint_lowrank else 0, lowrank_alpha if joint_lowrank else 0.0, joint_lowrank, seed,
    )
    return adapted


def attach_lowrank_baseline(model: Model, r: int, alpha: float, seed: int = 0) -> Model:
    """Frozen copy of ``model`` with trainable low-rank deltas on ``Wq`` and ``Wk``."""
    if model.config.attention_kind != "standard":
        raise ConfigError("low-rank baseline attaches to a standard-attention model")
    if r < 1:
        raise ConfigError(f"low-rank r must be >= 1, got {r}")
    adapted = _frozen_copy(model)
    rng = np.random.default_rng([seed, 1])
    for block in adapted.blocks:
        block.attn.lowrank = _lowrank(block.attn.width, r, alpha, model.config.dtype, rng)
    adapted.config = ModelConfig(**{**asdict(model.config), "attention_kind": "lowrank-baseline"})
    adapted.adaptation = AdaptationConfig("lowrank-baseline", 0.0, 0, "gelu", r, float(alpha), False, seed)
    return adapted


def set_gains(model: Model, gains: OpAmpConfig) -> None:
    """Reconfigure the shared amplifier gains of every OpAmp layer."""
    for block in model.blocks:
        if not isinstance(block.attn, OpAmpAttentionLayer):
            raise ConfigError("model has no OpAmp attention layers")
        block.attn.gains = gains
    model.adaptation.cmrr = gains.cmrr
