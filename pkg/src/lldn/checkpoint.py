"""Named-tensor checkpoint files.

Layout: magic ``LLDN1`` followed by records of
``[name length u16][name bytes][rank u8][dims u32 x rank][float32 LE data]``,
sorted by name. Non-tensor state (run config text, RNG state, epoch) rides
along as ``meta/*`` records whose float values are the bytes of the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"LLDN1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: Optional[dict] = None
    adam: Optional[dict] = None  # {"t": int, "m": {...}, "v": {...}}
    extra: dict = field(default_factory=dict)


def _bytes_record(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.float32)


def _record_bytes(arr: np.ndarray) -> bytes:
    return arr.astype(np.uint8).tobytes()


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name], dtype="<f4")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_records(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    out = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"truncated record {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    records = {f"param/{k}": v for k, v in ckpt.tensors.items()}
    records["meta/config"] = _bytes_record(ckpt.config_text.encode())
    records["meta/epoch"] = np.array(ckpt.epoch, dtype=np.float32)
    meta = {"rng": ckpt.rng_state, **ckpt.extra}
    records["meta/state"] = _bytes_record(json.dumps(meta, sort_keys=True).encode())
    if ckpt.adam is not None:
        records["adam/t"] = np.array(ckpt.adam["t"], dtype=np.float32)
        for k, v in ckpt.adam["m"].items():
            records[f"adam/m/{k}"] = v
        for k, v in ckpt.adam["v"].items():
            records[f"adam/v/{k}"] = v
    Path(path).write_bytes(encode_records(records))


def load_checkpoint(path) -> Checkpoint:
    records = decode_records(Path(path).read_bytes())
    if "meta/config" not in records:
        raise CheckpointError("checkpoint has no run config")
    tensors = {k[6:]: v for k, v in records.items() if k.startswith("param/")}
    meta = json.loads(_record_bytes(records["meta/state"]).decode()) if "meta/state" in records else {}
    adam = None
    if "adam/t" in records:
        adam = {"t": int(records["adam/t"].item()),
                "m": {k[7:]: v for k, v in records.items() if k.startswith("adam/m/")},
                "v": {k[7:]: v for k, v in records.items() if k.startswith("adam/v/")}}
    rng_state = meta.pop("rng", None)
    return Checkpoint(_record_bytes(records["meta/config"]).decode(), tensors,
                      int(records.get("meta/epoch", np.float32(0)).item()), rng_state, adam, meta)
