"""Checkpoint container: named float32 tensors plus config and metadata.

File layout (all integers little-endian):

    bytes  0-7   magic ``b"TOYCKPT1"``
    u32          length of the header JSON
    ...          header JSON: {"config": {...}, "meta": {...}}
    u32          tensor count
    per tensor:  u16 name length, name (utf-8), u8 ndim, ndim * u32 dims,
                 raw float32 data in C order

Tensors are written sorted by name, so serialization is canonical and the
round trip is bit-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError, ShapeError
from .config import ModelConfig
from .network import init_params

MAGIC = b"TOYCKPT1"

# Parameter-path suffixes of the projection weights every quantization plan
# covers by default; embedding and output head are opt-in.
LINEAR_WEIGHT_SUFFIXES = (
    ".attn.q.weight", ".attn.k.weight", ".attn.v.weight", ".attn.o.weight",
    ".mlp.fc_in.weight", ".mlp.fc_out.weight",
)
EMBEDDING_PATHS = ("embed.tok", "head.weight")


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def quantizable_paths(self, include_embeddings: bool = False) -> list:
        """2-D weights eligible for quantization, in forward order.

        The default covers the attention and feed-forward projections; with
        ``include_embeddings`` the token embedding and output head join the
        list. Norm gains/biases and the positional table never quantize.
        """
        paths = [p for p in self.params if p.endswith(LINEAR_WEIGHT_SUFFIXES)]
        paths.sort(key=_forward_order_key)
        if include_embeddings:
            paths = ["embed.tok"] + paths + ["head.weight"]
        for p in paths:
            if self.params[p].ndim != 2:
                raise ShapeError(f"quantizable path {p} is not a 2-D weight")
        return paths

    def n_params(self, path: str) -> int:
        return int(self.params[path].size)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        header = json.dumps({"config": self.config.to_dict(), "meta": self.meta},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<I", len(header)), header,
               struct.pack("<I", len(self.params))]
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype=np.float32)
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes(order="C"))
        return b"".join(out)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        if blob[:8] != MAGIC:
            raise ContractError("not a checkpoint file (bad magic)")
        off = 8
        (hlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            params[name] = np.frombuffer(blob[off:off + size], dtype="<f4").reshape(shape).copy()
            off += size
        return cls(ModelConfig.from_dict(header["config"]), params, header.get("meta", {}))


def _forward_order_key(path: str):
    parts = path.split(".")
    block = int(parts[1]) if parts[0] == "blocks" else -1
    stage = {"q": 0, "k": 1, "v": 2, "o": 3, "fc_in": 4, "fc_out": 5}.get(parts[-2], 0)
    return (block, stage)


def new_checkpoint(config: ModelConfig, seed: int, meta: dict | None = None) -> ModelCheckpoint:
    meta = dict(meta or {})
    meta.setdefault("seed", int(seed))
    return ModelCheckpoint(config, init_params(config, seed), meta)
