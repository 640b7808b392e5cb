"""Binary checkpoint files.

Layout (little-endian)::

    b"CKPT" | u32 version | u32 crc32(payload) | payload
    payload = u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors | tensor*
    tensor  = u32 name_len | name | u32 rank | u32 dims[rank] | f32 values

The JSON metadata carries the model spec, training config, step counters and
the torch RNG state; tensors are stored as float32.
"""

from __future__ import annotations

import base64
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptFile, VersionMismatch

MAGIC = b"CKPT"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def optimizer_state(self) -> dict:
        m = {k[len("optim.m/"):]: v for k, v in self.tensors.items() if k.startswith("optim.m/")}
        v = {k[len("optim.v/"):]: t for k, t in self.tensors.items() if k.startswith("optim.v/")}
        return {"step": self.meta.get("optim_step", 0), "m": m, "v": v}

    def build_model(self):
        from .models import build_model

        spec = self.meta["model"]
        model = build_model(spec["kind"], **spec["config"])
        model.load_state_dict(self.model_state())
        return model


def encode_rng(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode()


def decode_rng(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def make_checkpoint(model, meta: dict | None = None, optimizer: dict | None = None) -> Checkpoint:
    from .models import model_spec

    tensors = {f"model/{k}": v.detach().clone() for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    meta["model"] = model_spec(model)
    if optimizer is not None:
        meta["optim_step"] = optimizer["step"]
        for name, t in optimizer["m"].items():
            tensors[f"optim.m/{name}"] = t.detach().clone()
        for name, t in optimizer["v"].items():
            tensors[f"optim.v/{name}"] = t.detach().clone()
    return Checkpoint(tensors, meta)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    parts = []
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    header = MAGIC + struct.pack("<II", VERSION, zlib.crc32(payload))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    version, crc = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, this build reads {VERSION}")
    payload = data[12:]
    if zlib.crc32(payload) != crc:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or damaged)")
    try:
        pos = 0

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, payload, pos)
            pos += struct.calcsize(fmt)
            return vals

        (meta_len,) = take("<I")
        meta = json.loads(payload[pos:pos + meta_len])
        pos += meta_len
        (count,) = take("<I")
        tensors = {}
        for _ in range(count):
            (name_len,) = take("<I")
            name = payload[pos:pos + name_len].decode()
            pos += name_len
            (rank,) = take("<I")
            dims = take(f"<{rank}I")
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: malformed tensor table ({exc})") from exc
    return Checkpoint(tensors, meta)
