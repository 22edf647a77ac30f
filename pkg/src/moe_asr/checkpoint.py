"""Binary checkpoint format: versioned header, JSON metadata (config echo,
training step, RNG state), then every parameter tensor by canonical name
with little-endian float64 data. save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig
from .errors import DataFormatError
from .model import Model

_MAGIC = b"MOEK"
_VERSION = 1


def save_checkpoint(path, model: Model, step: int = 0,
                    rng: np.random.Generator | None = None) -> None:
    meta = {
        "config": model.config.to_dict(),
        "step": step,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
    params = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<Q", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            f.write(struct.pack("<II", len(nb), p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(nb)
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, step, rng-or-None). The model is rebuilt from the
    config echo and its parameters overwritten with the stored tensors."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack_from("<IQ", raw, 4)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version "
                              f"{version}")
    off = 16
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (n_params,) = struct.unpack_from("<Q", raw, off)
    off += 8
    config = ModelConfig.from_dict(meta["config"])
    model = Model(config)
    expected = list(model.named_parameters())
    if n_params != len(expected):
        raise DataFormatError(
            f"{path}: {n_params} tensors stored but the config builds "
            f"{len(expected)}")
    try:
        for name, p in expected:
            name_len, ndim = struct.unpack_from("<II", raw, off)
            off += 8
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            stored_name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            if stored_name != name or tuple(shape) != p.shape:
                raise DataFormatError(
                    f"{path}: tensor mismatch, expected {name}{p.shape}, "
                    f"found {stored_name}{tuple(shape)}")
            count = int(np.prod(shape)) if ndim else 1
            p[...] = np.frombuffer(raw, dtype="<f8", count=count,
                                   offset=off).reshape(shape)
            off += 8 * count
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    rng = None
    if meta.get("rng_state") is not None:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = meta["rng_state"]
    return model, meta["step"], rng
