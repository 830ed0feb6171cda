"""Binary checkpoints.

Layout (little-endian)::

    b"CTPCKPT1"  u32 version  u32 section_count
    section*:    u32 name_len  name  u64 payload_len  payload

Sections: ``config`` (UTF-8 JSON), ``model`` and ``optim`` (tensor blocks),
``prng`` (xoshiro256 state words).  A tensor block is ``u32 count`` followed
by ``u32 name_len, name, u32 ndim, u64 dims..., float64 data`` per tensor.
The ``optim`` payload starts with the u64 step count.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, ModelConfig, ModelState
from .optim import OptimConfig, OptimState
from .schedule import ScheduleSpec

MAGIC = b"CTPCKPT1"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    model: ModelState
    optim_config: OptimConfig = field(default_factory=OptimConfig)
    optim: OptimState | None = None
    rng_state: tuple = (1, 0, 0, 0)
    global_step: int = 0
    tokens: int = 0
    schedule: ScheduleSpec | None = None
    schedule_step: int = 0
    phase_tag: str = ""
    cursors: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "model_config": asdict(self.model_config),
            "optim_config": asdict(self.optim_config),
            "global_step": self.global_step,
            "tokens": self.tokens,
            "schedule": None if self.schedule is None else self.schedule.to_json(),
            "schedule_step": self.schedule_step,
            "phase_tag": self.phase_tag,
            "cursors": {k: list(v) for k, v in sorted(self.cursors.items())},
        }

    def to_bytes(self) -> bytes:
        sections = [("config", json.dumps(self.meta(), sort_keys=True).encode("utf-8")),
                    ("model", _pack_tensors(self.model.tensors()))]
        if self.optim is not None:
            payload = struct.pack("<Q", self.optim.t)
            tensors = {f"m.{k}": v for k, v in self.optim.m.tensors().items()}
            tensors.update({f"v.{k}": v for k, v in self.optim.v.tensors().items()})
            sections.append(("optim", payload + _pack_tensors(tensors)))
        sections.append(("prng", struct.pack("<I", 1) + struct.pack("<4Q", *self.rng_state)))
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(sections)))
        for name, payload in sections:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<Q", len(payload)))
            buf.write(payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        r = _Reader(blob)
        if r.take(8) != MAGIC:
            raise CheckpointFormatError("not a checkpoint (bad magic)")
        version, count = r.unpack("<II")
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        sections = {}
        for _ in range(count):
            (n,) = r.unpack("<I")
            name = r.take(n).decode("utf-8")
            (size,) = r.unpack("<Q")
            sections[name] = r.take(size)
        if r.remaining():
            raise CheckpointFormatError("trailing bytes after last section")
        for required in ("config", "model", "prng"):
            if required not in sections:
                raise CheckpointFormatError(f"missing section {required!r}")
        meta = json.loads(sections["config"].decode("utf-8"))
        model_config = ModelConfig(**meta["model_config"])
        tensors = _unpack_tensors(sections["model"])
        model = ModelState(**{k: tensors[k] for k in PARAM_NAMES})
        optim = None
        if "optim" in sections:
            (t,) = struct.unpack_from("<Q", sections["optim"])
            ot = _unpack_tensors(sections["optim"][8:])
            optim = OptimState(ModelState(**{k: ot[f"m.{k}"] for k in PARAM_NAMES}),
                               ModelState(**{k: ot[f"v.{k}"] for k in PARAM_NAMES}), t)
        pr = _Reader(sections["prng"])
        (n_states,) = pr.unpack("<I")
        rng_state = pr.unpack("<4Q") if n_states else (1, 0, 0, 0)
        sched = meta.get("schedule")
        return cls(
            model_config=model_config,
            model=model,
            optim_config=OptimConfig(**meta["optim_config"]),
            optim=optim,
            rng_state=tuple(rng_state),
            global_step=meta["global_step"],
            tokens=meta["tokens"],
            schedule=None if sched is None else ScheduleSpec.from_json(sched),
            schedule_step=meta["schedule_step"],
            phase_tag=meta["phase_tag"],
            cursors={k: tuple(v) for k, v in meta["cursors"].items()},
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def remaining(self) -> int:
        return len(self.blob) - self.pos


def _pack_tensors(tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _unpack_tensors(blob: bytes) -> dict:
    r = _Reader(blob)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(shape)
    return out
