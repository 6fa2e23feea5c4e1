"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TCKP"  u32 version
    u32 n    n bytes of UTF-8 JSON metadata (model config, input widths, extras)
    b"PARM"  named-tensor table
    b"OPTM"  u32 n, n bytes of JSON (optimizer kind and step), named-tensor table

A named-tensor table is ``u32 count`` followed by, per tensor, ``u16`` name
length, UTF-8 name, ``u8`` rank, ``u32`` extents and the f32 payload.
Every parameter appears exactly once, so tensors shared between model paths
(the shared encoder) are stored once and come back as one object.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .config import ModelConfig
from .model import TCAN, parameter_shapes
from .tensor import Tensor

MAGIC = b"TCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    input_dims: dict
    params: dict                       # name -> float32 array
    optimizer: Optional[dict] = None   # {"kind", "step", "tensors"}
    meta: dict = field(default_factory=dict)

    def build_model(self) -> TCAN:
        model = TCAN(self.config, self.input_dims, seed=0)
        load_params_into(model, self.params)
        return model


def _pack_table(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_table(buf: bytes, off: int) -> tuple:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape) \
            .astype(np.float32)
        off += 4 * size
    return out, off


def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(model: TCAN, optimizer=None, extra: Optional[dict] = None) -> bytes:
    meta = {"model_config": model.config.to_dict(), "input_dims": model.input_dims,
            "extra": extra or {}}
    state = optimizer.state_dict() if optimizer is not None else {"kind": "none", "step": 0,
                                                                   "tensors": {}}
    return b"".join([
        MAGIC, struct.pack("<I", VERSION), _json_block(meta),
        b"PARM", _pack_table({n: p.data for n, p in model.params.items()}),
        b"OPTM", _json_block({"kind": state["kind"], "step": state["step"]}),
        _pack_table(state["tensors"]),
    ])


def save_checkpoint(path, model: TCAN, optimizer=None, extra: Optional[dict] = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, optimizer, extra))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 8
        (n,) = struct.unpack_from("<I", buf, off)
        meta = json.loads(buf[off + 4:off + 4 + n])
        off += 4 + n
        if buf[off:off + 4] != b"PARM":
            raise CheckpointError(f"{path}: missing parameter section")
        params, off = _unpack_table(buf, off + 4)
        optim = None
        if buf[off:off + 4] == b"OPTM":
            (n,) = struct.unpack_from("<I", buf, off + 4)
            head = json.loads(buf[off + 8:off + 8 + n])
            tensors, off = _unpack_table(buf, off + 8 + n)
            if head["kind"] != "none":
                optim = {"kind": head["kind"], "step": head["step"], "tensors": tensors}
    except (struct.error, ValueError, KeyError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    config = ModelConfig.from_dict(meta["model_config"])
    return Checkpoint(config, {k: int(v) for k, v in meta["input_dims"].items()}, params, optim,
                      meta.get("extra", {}))


def check_names(expected: Mapping[str, tuple], found: Mapping[str, np.ndarray]) -> None:
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    wrong = sorted(n for n in set(expected) & set(found) if tuple(found[n].shape) != expected[n])
    if missing or extra or wrong:
        msg = []
        if missing:
            msg.append("missing: " + ", ".join(missing))
        if extra:
            msg.append("unexpected: " + ", ".join(extra))
        if wrong:
            msg.append("shape mismatch: " + ", ".join(
                f"{n} {tuple(found[n].shape)} vs {expected[n]}" for n in wrong))
        raise CheckpointError("checkpoint does not match model; " + "; ".join(msg))


def load_params_into(model: TCAN, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy arrays into the model's existing tensors (object identity is kept)."""
    shapes = {n: spec[0] for n, spec in parameter_shapes(model.config, model.input_dims).items()}
    check_names(shapes, arrays)
    for n, arr in arrays.items():
        model.params[n].data[...] = arr


def params_from_arrays(arrays: Mapping[str, np.ndarray]) -> dict:
    return {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in arrays.items()}
