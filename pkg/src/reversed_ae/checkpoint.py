"""``ra-ckpt-v1`` checkpoint container.

Layout::

    b"ra-ckpt-v1\\n"
    uint64 LE   length of the JSON header
    JSON header (architecture, config snapshot, seed, counters, tensor index)
    tensor payload, each entry little-endian, offsets relative to payload start

Model parameters and optimizer moments are stored as float32; the RNG state
is stored as uint8.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .model import Architecture, ReversedAutoEncoder

MAGIC = b"ra-ckpt-v1\n"
_DTYPES = {"float32": "<f4", "uint8": "u1"}


def _pack(tensors: dict[str, tuple[str, np.ndarray]]):
    index, chunks, offset = [], [], 0
    for name, (dtype, arr) in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(path, model: ReversedAutoEncoder, *, config: dict | None = None, seed=None,
                    extra: dict | None = None, extra_tensors: dict | None = None) -> Path:
    tensors = {f"model/{k}": ("float32", v.detach().cpu().float().numpy())
               for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    index, payload = _pack(tensors)
    header = {
        "format": MAGIC.decode().strip(),
        "architecture": model.arch.to_dict(),
        "config": config or {},
        "seed": seed,
        "fitted": bool(model.fitted),
        "extra": extra or {},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Return ``(header, tensors)`` with tensors as numpy arrays keyed by name."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not an {MAGIC.decode().strip()} checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + n])
    payload = memoryview(data)[pos + n:]
    tensors = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise DataError(f"{path}: truncated tensor {t['name']}")
        tensors[t["name"]] = np.frombuffer(chunk, dtype=_DTYPES[t["dtype"]]).reshape(t["shape"]).copy()
    return header, tensors


def load_model(path) -> tuple[ReversedAutoEncoder, dict]:
    header, tensors = read_checkpoint(path)
    model = ReversedAutoEncoder(Architecture.from_dict(header["architecture"]))
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    model.fitted = header.get("fitted", True)
    model.eval()
    return model, header
