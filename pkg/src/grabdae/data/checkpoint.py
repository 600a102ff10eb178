"""Checkpoint file format.

::

    offset 0   4 bytes   magic b"GDAE"
    offset 4   u32 LE    format version (1)
    offset 8   u32 LE    manifest length M
    offset 12  M bytes   manifest JSON (utf-8)
    offset 12+M          payload: little-endian float32 tensors, back to back

The manifest holds ``{"version", "model_config", "tensors": [{"name",
"shape", "offset"}...], "meta"}``; offsets are in bytes from the payload
start. Tensor names are prefixed ``student.`` or ``teacher.``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from ..dae import CorruptionSpec
from ..model import ModelConfig, StudentModel, TeacherModel

MAGIC = b"GDAE"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def _model_config_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def _model_config_from(d: dict) -> ModelConfig:
    d = dict(d)
    d["corruption"] = CorruptionSpec(**d["corruption"])
    return ModelConfig(**d)


def save_checkpoint(path, student: StudentModel, teacher: TeacherModel | None = None, meta: dict | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(f"student.{k}", t.data) for k, t in student.params.items()]
    if teacher is not None:
        tensors += [(f"teacher.{k}", t.data) for k, t in teacher.params.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": VERSION,
        "model_config": _model_config_dict(student.cfg),
        "tensors": entries,
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(chunks))


def read_manifest(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _HEADER.size:
        raise CheckpointError("file shorter than checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _HEADER.size
    if len(buf) < start + mlen:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("version") != version:
        raise CheckpointError("manifest version disagrees with header")
    return manifest, start + mlen


def load_checkpoint(path) -> tuple[StudentModel, TeacherModel | None, dict]:
    """Rebuild (student, teacher or None, meta). Validates everything before touching the payload."""
    buf = Path(path).read_bytes()
    manifest, payload_start = read_manifest(buf)
    cfg = _model_config_from(manifest["model_config"])
    student = StudentModel(cfg, seed=0)
    has_teacher = any(e["name"].startswith("teacher.") for e in manifest["tensors"])
    teacher = TeacherModel(student) if has_teacher else None

    targets = {f"student.{k}": t for k, t in student.params.items()}
    if teacher is not None:
        targets.update({f"teacher.{k}": t for k, t in teacher.params.items()})
    expected = 0
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in targets:
            raise CheckpointError(f"unknown parameter name {name!r}")
        if tuple(e["shape"]) != targets[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {e['shape']} vs {list(targets[name].shape)}")
        if e["offset"] != expected:
            raise CheckpointError(f"non-contiguous offset for {name}")
        expected += int(np.prod(e["shape"], dtype=np.int64)) * 4
    missing = set(targets) - {e["name"] for e in manifest["tensors"]}
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    payload = len(buf) - payload_start
    if payload != expected:
        raise CheckpointError(f"payload length mismatch: manifest needs {expected} bytes, file has {payload}")

    for e in manifest["tensors"]:
        t = targets[e["name"]]
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=payload_start + e["offset"])
        t.data = arr.astype(np.float32).reshape(e["shape"])
    if teacher is None:
        return student, None, manifest.get("meta", {})
    return student, teacher, manifest.get("meta", {})
