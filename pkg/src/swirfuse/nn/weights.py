"""
Binary weight files.

Layout (all integers u32 little-endian)::

    b"TFUS1"
    channels, hidden, num_classes, n_branches, arity * n_branches
    n_tensors
    per tensor: name_len, name (utf-8), rank, dims * rank, float32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Optional, Tuple, Union

import numpy as np

from .model import DUAL_BAND, TRIMODAL, ModelConfig, ModelParams

MAGIC = b"TFUS1"
PathLike = Union[str, Path]

# branch layouts are recovered from their arity signature
_LAYOUTS = {(3, 1, 1): TRIMODAL, (3, 1): DUAL_BAND}


class WeightFormatError(ValueError):
    pass


def _u32(f: BinaryIO, count: int = 1) -> Tuple[int, ...]:
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise WeightFormatError("truncated weight file")
    return struct.unpack(f"<{count}I", raw)


def save_weights(params: ModelParams, path: PathLike) -> None:
    cfg = params.config
    params.check_shapes()
    arities = cfg.arities()
    out = bytearray(MAGIC)
    out += struct.pack("<4I", cfg.channels, cfg.hidden, cfg.num_classes, len(arities))
    out += struct.pack(f"<{len(arities)}I", *arities)
    out += struct.pack("<I", len(params.tensors))
    for name in params.names():
        arr = params[name]
        key = name.encode("utf-8")
        out += struct.pack("<I", len(key)) + key
        out += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_weights(path: PathLike, expect: Optional[ModelConfig] = None) -> ModelParams:
    """Read a weight file; with ``expect`` set, a different architecture is rejected."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise WeightFormatError(f"{path}: bad magic")
        channels, hidden, num_classes, nb = _u32(f, 4)
        arities = _u32(f, nb) if nb else ()
        branches = _LAYOUTS.get(tuple(arities))
        if branches is None:
            raise WeightFormatError(f"{path}: unsupported branch arities {arities}")
        cfg = ModelConfig(channels=channels, hidden=hidden, branches=branches, num_classes=num_classes)
        if expect is not None and (expect.channels, expect.hidden, expect.arities(), expect.num_classes) != \
                (channels, hidden, tuple(arities), num_classes):
            raise WeightFormatError(
                f"{path}: architecture C={channels} hidden={hidden} arities={arities} "
                f"does not match C={expect.channels} hidden={expect.hidden} arities={expect.arities()}")
        (n,) = _u32(f)
        tensors = {}
        for _ in range(n):
            (nlen,) = _u32(f)
            name = f.read(nlen).decode("utf-8")
            (rank,) = _u32(f)
            dims = _u32(f, rank) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise WeightFormatError("truncated tensor payload")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        if f.read(1):
            raise WeightFormatError(f"{path}: trailing bytes")
    if expect is not None:
        cfg = expect
    params = ModelParams(cfg, tensors)
    try:
        params.check_shapes()
    except ValueError as exc:
        raise WeightFormatError(f"{path}: {exc}") from exc
    return params
