"""Versioned named-tensor checkpoints for teacher and student models.

Layout::

    b"DSECKPT1\\n"
    <one line of JSON: version, kind, config snapshot, tensor table, checksum>\\n
    <payload: every tensor as little-endian float64, in table order>

The checksum is the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import TaskKind
from .encoder import EncoderConfig, EncoderWeights, parameter_shapes
from .numkernel import Parameter
from .student import StudentModel
from .teacher import TeacherModel

MAGIC = b"DSECKPT1\n"
VERSION = 1


class CheckpointError(Exception):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _tensors(model) -> dict[str, np.ndarray]:
    return {name: p.value for name, p in model.parameters().items()}


def checkpoint_bytes(model) -> bytes:
    if isinstance(model, TeacherModel):
        kind, extra = "teacher", {}
    elif isinstance(model, StudentModel):
        kind, extra = "student", {"head_hidden": model.head_W.shape[0], "pooled_layers": model.pooled_layers}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    tensors = _tensors(model)
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
    header = {
        "version": VERSION,
        "kind": kind,
        "task": model.task.value,
        "encoder": model.config.to_dict(),
        **extra,
        "tensors": [[name, list(v.shape)] for name, v in tensors.items()],
        "payload_bytes": len(payload),
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    return MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + payload


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_header(raw: bytes) -> tuple[dict, bytes]:
    if not raw.startswith(MAGIC):
        if raw.startswith(b"DSECKPT"):
            raise IncompatibleCheckpointError(f"unsupported checkpoint format {raw[:8]!r}")
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptCheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[len(MAGIC) : end])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise IncompatibleCheckpointError(f"checkpoint version {header.get('version')} != supported {VERSION}")
    return header, raw[end + 1 :]


def load_checkpoint(path):
    """Load a teacher or student; nothing is returned unless the whole file validates."""
    header, payload = read_header(Path(path).read_bytes())
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpointError(f"payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CorruptCheckpointError("payload checksum mismatch")
    config = EncoderConfig(**header["encoder"])
    task = TaskKind(header["task"])
    values: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        values[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    try:
        encoder = EncoderWeights(config, {k: Parameter(values[f"enc.{k}"]) for k in parameter_shapes(config)})
    except KeyError as exc:
        raise CorruptCheckpointError(f"checkpoint is missing tensor {exc}") from None
    kind = header["kind"]
    if kind == "teacher":
        return TeacherModel(encoder, Parameter(values["head.w"]), Parameter(values["head.b"]), task)
    if kind == "student":
        return StudentModel(encoder, Parameter(values["head.W"]), Parameter(values["head.w"]), task, header["pooled_layers"])
    raise IncompatibleCheckpointError(f"unknown model kind {kind!r}")


def model_fingerprint(model) -> str:
    """SHA-256 over the checkpoint bytes (config snapshot plus every tensor)."""
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()
