"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    magic   b"MADCKPT1"
    u32     metadata length, then that many bytes of JSON (sorted keys)
    u32     block count
    block*  u16 name length, name utf-8,
            u8 ndim, ndim x u32 dims,
            u8 dtype code (0 = float64, 1 = float32),
            raw C-order array bytes

The metadata echoes the encoder configuration, whether a head is bundled,
the adapter configuration (or null), and the input normalisation so a
checkpoint can be evaluated without outside knowledge.  Writing is fully
deterministic: the same model produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import lora as lora_mod
from . import vit as vit_mod
from .errors import FormatError
from .head import ClassifierHead
from .lora import AdaptedBackbone
from .tensor import Tensor
from .vit import VitBackbone, VitConfig

MAGIC = b"MADCKPT1"
FORMAT_NAME = "madkit-checkpoint-v1"
NORMALIZATION = "[-1,1]"

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype(np.float64), 1: np.dtype(np.float32)}


@dataclass
class ModelBundle:
    backbone: VitBackbone | AdaptedBackbone
    head: ClassifierHead | None
    meta: dict


def param_checksum(params: dict[str, Tensor]) -> str:
    """Order-sensitive digest of parameter names and exact bytes."""
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def _collect_blocks(backbone, head):
    blocks: dict[str, np.ndarray] = {}
    if isinstance(backbone, AdaptedBackbone):
        base = backbone.base
        for name, t in backbone.named_adapter_parameters().items():
            blocks["lora/" + name] = t.data
    else:
        base = backbone
    for name, t in base.named_parameters().items():
        blocks["vit/" + name] = t.data
    if head is not None:
        for name, t in head.named_parameters().items():
            blocks[name] = t.data  # already prefixed "head."
    return blocks


def save_model(path, backbone, head=None, extra: dict | None = None) -> None:
    """Write a backbone (plain or adapted), optionally with its head."""
    meta = {
        "format": FORMAT_NAME,
        "vit": asdict(backbone.config),
        "head": head is not None,
        "normalization": NORMALIZATION,
        "lora": None,
        "extra": extra or {},
    }
    if isinstance(backbone, AdaptedBackbone):
        meta["lora"] = {
            "r": backbone.r,
            "alpha": backbone.alpha,
            "dropout_p": backbone.dropout_p,
            "per_head": backbone.per_head,
            "rank_stabilized": backbone.rank_stabilized,
        }
    blocks = _collect_blocks(backbone, head)

    meta_bytes = json.dumps(meta, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise FormatError(f"block {name!r} has unsupported dtype "
                                  f"{arr.dtype}")
            fh.write(struct.pack("<B", code))
            fh.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _read_blocks(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata: {exc}") from exc
    if meta.get("format") != FORMAT_NAME:
        raise FormatError(f"{path}: unknown format {meta.get('format')!r}")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        ndim = reader.u8()
        shape = tuple(reader.u32() for _ in range(ndim))
        code = reader.u8()
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: block {name!r} has unknown dtype "
                              f"code {code}")
        dtype = _CODE_DTYPES[code]
        raw = reader.take(int(np.prod(shape, dtype=np.int64))
                          * dtype.itemsize)
        blocks[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.pos} trailing "
                          "bytes after the last block")
    return meta, blocks


def _apply(params: dict[str, Tensor], blocks: dict[str, np.ndarray],
           prefix: str, path) -> None:
    for name, t in params.items():
        key = prefix + name
        if key not in blocks:
            raise FormatError(f"{path}: missing parameter block {key!r}")
        arr = blocks.pop(key)
        if arr.shape != t.data.shape:
            raise FormatError(
                f"{path}: block {key!r} has shape {arr.shape}, "
                f"expected {t.data.shape}"
            )
        t.data = arr.astype(t.data.dtype, copy=False)


def load_model(path) -> ModelBundle:
    """Rebuild the saved model; every block must match the echoed config."""
    meta, blocks = _read_blocks(path)
    try:
        config = VitConfig(**meta["vit"])
    except (TypeError, KeyError) as exc:
        raise FormatError(f"{path}: bad encoder config: {exc}") from exc

    backbone = vit_mod.init_random(config, seed=0)
    _apply(backbone.named_parameters(), blocks, "vit/", path)

    result: VitBackbone | AdaptedBackbone = backbone
    if meta.get("lora"):
        lc = meta["lora"]
        try:
            result = lora_mod.inject(
                backbone, r=int(lc["r"]), alpha=float(lc["alpha"]),
                dropout_p=float(lc["dropout_p"]), seed=0,
                per_head=bool(lc["per_head"]),
                rank_stabilized=bool(lc.get("rank_stabilized", True)),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: adapter config missing "
                              f"{exc}") from exc
        _apply(result.named_adapter_parameters(), blocks, "lora/", path)

    head = None
    if meta.get("head"):
        head = ClassifierHead.init_random(config.embed_dim, seed=0)
        _apply(head.named_parameters(), blocks, "", path)

    if blocks:
        raise FormatError(f"{path}: unexpected parameter blocks: "
                          f"{sorted(blocks)[:3]}")
    return ModelBundle(result, head, meta)
