"""Single-file checkpoint container.

Layout: magic "S3ED", uint32 format version, uint64 header length, a JSON
header (sorted keys), then raw tensor bytes. Tensor leaves inside section
trees are replaced by {"__tensor__": index} placeholders in the header, and
integer-keyed dicts (optimizer state) by {"__intkeys__": {...}}. The
encoding is fully deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"S3ED"
VERSION = 1

_DTYPES = {
    "float32": np.float32, "float64": np.float64, "int64": np.int64,
    "int32": np.int32, "uint8": np.uint8, "bool": np.bool_,
}


class _Encoder:
    def __init__(self):
        self.tensors: list[np.ndarray] = []
        self.meta: list[dict] = []

    def encode(self, obj):
        if isinstance(obj, torch.Tensor):
            return self._add(obj.detach().cpu().numpy())
        if isinstance(obj, np.ndarray):
            return self._add(obj)
        if isinstance(obj, dict):
            if obj and all(isinstance(k, int) for k in obj):
                return {"__intkeys__": {str(k): self.encode(v)
                                        for k, v in sorted(obj.items())}}
            return {k: self.encode(v) for k, v in sorted(obj.items())}
        if isinstance(obj, (list, tuple)):
            return [self.encode(v) for v in obj]
        if obj is None or isinstance(obj, (bool, int, float, str)):
            return obj
        raise CheckpointError(f"cannot serialize value of type {type(obj).__name__}")

    def _add(self, arr: np.ndarray):
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype.name}")
        idx = len(self.tensors)
        self.tensors.append(arr)  # tobytes() at write time yields C-order bytes
        self.meta.append({"dtype": arr.dtype.name, "shape": list(arr.shape)})
        return {"__tensor__": idx}


def _decode(obj, tensors):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return torch.from_numpy(tensors[obj["__tensor__"]].copy())
        if "__intkeys__" in obj:
            return {int(k): _decode(v, tensors) for k, v in obj["__intkeys__"].items()}
        return {k: _decode(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, tensors) for v in obj]
    return obj


class Checkpoint:
    """Named parameter/optimizer sections plus config echo and seeds."""

    def __init__(self, sections: dict, config: dict | None = None,
                 step: int = 0, seeds: dict | None = None,
                 vocabs: dict | None = None):
        self.sections = sections
        self.config = config or {}
        self.step = step
        self.seeds = seeds or {}
        self.vocabs = vocabs or {}

    def save(self, path) -> None:
        enc = _Encoder()
        header = {
            "config": self.config,
            "sections": {k: enc.encode(v) for k, v in sorted(self.sections.items())},
            "seeds": self.seeds,
            "step": self.step,
            "tensors": enc.meta,
            "vocabs": self.vocabs,
        }
        header_bytes = json.dumps(header, sort_keys=True,
                                  separators=(",", ":")).encode("utf-8")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", VERSION, len(header_bytes)))
            f.write(header_bytes)
            for arr in enc.tensors:
                f.write(arr.tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: bad magic {magic!r}")
            version, header_len = struct.unpack("<IQ", f.read(12))
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            try:
                header = json.loads(f.read(header_len).decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
            tensors = []
            for meta in header["tensors"]:
                dtype = _DTYPES[meta["dtype"]]
                count = int(np.prod(meta["shape"], dtype=np.int64)) if meta["shape"] else 1
                raw = f.read(count * np.dtype(dtype).itemsize)
                tensors.append(np.frombuffer(raw, dtype=dtype).reshape(meta["shape"]))
        sections = {k: _decode(v, tensors) for k, v in header["sections"].items()}
        return cls(sections=sections, config=header.get("config", {}),
                   step=header.get("step", 0), seeds=header.get("seeds", {}),
                   vocabs=header.get("vocabs", {}))
