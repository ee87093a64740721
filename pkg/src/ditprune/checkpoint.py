"""Binary checkpoint format: magic "TFCK", JSON header, named float64 blobs.

Layout (all integers little-endian):
    magic            4 bytes  b"TFCK"
    version          u32      currently 1
    header_len       u32      followed by that many bytes of UTF-8 JSON
    blob_count       u32
    per blob:        u32 name_len, name bytes, u32 ndim, u32 dims...,
                     u64 element count, count * f64 values

The JSON header carries {config, step, seed, ema_decay, meta}. Blob names are
namespaced: "model/<param>", "ema/<param>", "extra/<name>". Save -> load ->
save round-trips byte-exactly because blob order is preserved.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, ShapeError
from .model import ToyDiTConfig, ToyDiTModel
from .tensor import Tensor

MAGIC = b"TFCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    step: int
    seed: int
    ema_decay: float
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def model(self) -> ToyDiTModel:
        return _build_model(self.config, self.params)

    def ema_model(self) -> ToyDiTModel:
        arrays = self.ema if self.ema else self.params
        return _build_model(self.config, arrays)

    def param_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(serialize(self))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(str(p))
        return deserialize(p.read_bytes())


def _build_model(config: dict, arrays: dict[str, np.ndarray]) -> ToyDiTModel:
    cfg = ToyDiTConfig.from_dict(config)
    params = {name: Tensor(arr.copy(), requires_grad=True)
              for name, arr in arrays.items()}
    return ToyDiTModel(cfg, params)


def from_model(model: ToyDiTModel, step: int, seed: int, ema_decay: float,
               ema: dict[str, np.ndarray] | None = None,
               extra: dict[str, np.ndarray] | None = None,
               meta: dict | None = None) -> Checkpoint:
    return Checkpoint(config=model.config.to_dict(), step=step, seed=seed,
                      ema_decay=ema_decay, params=model.state_arrays(),
                      ema=dict(ema) if ema else {},
                      extra=dict(extra) if extra else {},
                      meta=dict(meta) if meta else {})


def _write_blob(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw_name = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw_name)))
    buf.write(raw_name)
    buf.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(struct.pack("<Q", arr.size))
    buf.write(arr.tobytes())


def serialize(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"config": ckpt.config, "step": ckpt.step, "seed": ckpt.seed,
         "ema_decay": ckpt.ema_decay, "meta": ckpt.meta},
        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    blobs = ([("model/" + k, v) for k, v in ckpt.params.items()]
             + [("ema/" + k, v) for k, v in ckpt.ema.items()]
             + [("extra/" + k, v) for k, v in ckpt.extra.items()])
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        _write_blob(buf, name, arr)
    return buf.getvalue()


def deserialize(raw: bytes) -> Checkpoint:
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise ShapeError("not a TFCK checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(bytes(view[off:off + header_len]).decode("utf-8"))
    off += header_len
    (blob_count,) = struct.unpack_from("<I", view, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for _ in range(blob_count):
        (name_len,) = struct.unpack_from("<I", view, off)
        off += 4
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", view, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", view, off) if ndim else ()
        off += 4 * ndim
        (count,) = struct.unpack_from("<Q", view, off)
        off += 8
        arr = np.frombuffer(view, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        group, _, key = name.partition("/")
        target = {"model": params, "ema": ema, "extra": extra}[group]
        target[key] = arr.copy()
    return Checkpoint(config=header["config"], step=header["step"],
                      seed=header["seed"], ema_decay=header["ema_decay"],
                      params=params, ema=ema, extra=extra,
                      meta=header.get("meta", {}))
