"""Binary checkpoint format.

Layout::

    OPAMPCKPT\\n
    version=1\\n
    <key>=<json scalar>\\n        config.*, adaptation.*, gains.*
    tensor=<name> <dtype> <d0,d1,...> <offset> <nbytes>\\n   one per tensor
    end\\n
    <payload>                     row-major little-endian floats, concatenated
    <sha256 of everything above>  32 raw bytes

``dtype`` is ``f4`` for 32-bit models and ``f8`` for 64-bit ones. Offsets are
relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .attention import OpAmpConfig
from .model import (
    AdaptationConfig,
    Model,
    ModelConfig,
    attach_lowrank_baseline,
    attach_opamp_adapters,
    build_base_model,
    set_gains,
)

MAGIC = b"OPAMPCKPT"
VERSION = 1
_DIGEST = 32


class CheckpointError(IOError):
    """Unreadable, corrupted or incompatible checkpoint."""


def _header(model: Model) -> list[str]:
    lines = [MAGIC.decode(), f"version={VERSION}"]
    cfg = asdict(model.config)
    lines += [f"config.{k}={json.dumps(v)}" for k, v in cfg.items()]
    lines += [f"adaptation.{k}={json.dumps(v)}" for k, v in asdict(model.adaptation).items()]
    gains = model.gains()
    if gains is not None:
        lines += [f"gains.cmrr={json.dumps(gains.cmrr)}", f"gains.common_mode_gain={json.dumps(gains.common_mode_gain)}"]
    return lines


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Write ``model`` atomically (temp file + rename)."""
    code = "f4" if model.config.precision == "f32" else "f8"
    blobs, lines, offset = [], _header(model), 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<" + code).tobytes()
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"tensor={name} {code} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end")
    body = ("\n".join(lines) + "\n").encode() + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def _parse_header(body: bytes) -> tuple[dict[str, object], list[tuple[str, str, tuple[int, ...], int, int]], int]:
    try:
        end = body.index(b"\nend\n") + len(b"\nend\n")
        text = body[:end].decode()
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError("checkpoint header is unterminated or not text") from exc
    lines = text.splitlines()
    if lines[0] != MAGIC.decode():
        raise CheckpointError("not an OpAmp checkpoint (bad magic)")
    values: dict[str, object] = {}
    tensors = []
    for line in lines[1:-1]:
        key, _, value = line.partition("=")
        if key == "tensor":
            name, code, shape, off, nbytes = value.split(" ")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            tensors.append((name, code, dims, int(off), int(nbytes)))
        else:
            values[key] = json.loads(value)
    if values.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {values.get('version')!r} (expected {VERSION})")
    return values, tensors, end


def load_checkpoint(path: str | Path) -> Model:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an OpAmp checkpoint (bad magic)")
    if len(raw) <= len(MAGIC) + _DIGEST:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    values, tensors, start = _parse_header(body)

    cfg = ModelConfig(**{f.name: _field(values, "config." + f.name) for f in fields(ModelConfig)})
    ad = AdaptationConfig(**{f.name: _field(values, "adaptation." + f.name) for f in fields(AdaptationConfig)})
    model = build_base_model(ModelConfig(**{**asdict(cfg), "attention_kind": "standard"}))
    if ad.kind == "opamp":
        model = attach_opamp_adapters(
            model, ad.cmrr, ad.adapter_dim, ad.seed, ad.activation, ad.joint_lowrank, ad.lowrank_r, ad.lowrank_alpha
        )
        set_gains(model, OpAmpConfig(values["gains.cmrr"], values["gains.common_mode_gain"]))
    elif ad.kind == "lowrank-baseline":
        model = attach_lowrank_baseline(model, ad.lowrank_r, ad.lowrank_alpha, ad.seed)

    params = model.parameters()
    payload = body[start:]
    if {t[0] for t in tensors} != set(params):
        raise CheckpointError(f"{path}: tensor directory does not match the declared architecture")
    for name, code, dims, off, nbytes in tensors:
        if code not in ("f4", "f8") or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: bad directory entry for {name}")
        arr = np.frombuffer(payload, dtype="<" + code, count=nbytes // int(code[1]), offset=off)
        if arr.size != int(np.prod(dims)) or dims != params[name].shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {dims}, expected {params[name].shape}")
        params[name].assign(arr.reshape(dims).astype(cfg.dtype))
    return model


def _field(values: dict[str, object], key: str):
    if key not in values:
        raise CheckpointError(f"checkpoint header lacks {key}")
    v = values[key]
    return tuple(v) if isinstance(v, list) else v
