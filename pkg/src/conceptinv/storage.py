"""Checkpoint container and JSONL dataset records.

Checkpoint layout (all integers little-endian)::

    b"FTLM" | u32 version | u32 manifest length | manifest (UTF-8 JSON, sorted keys)
    | u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 extents..., f64 payload
    | 32-byte SHA-256 of everything above

The manifest carries the model kind tag, schedule, vocabulary and any
provenance the writer wants kept.  Tensors are written in sorted name order so
that loading and re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ArtifactError, ShapeError

MAGIC = b"FTLM"
FORMAT_VERSION = 1
_DIGEST_LEN = 32


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary sibling and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    manifest: dict
    tensors: dict[str, np.ndarray]
    digest: str = ""

    def to_bytes(self) -> bytes:
        manifest = dict(self.manifest)
        manifest["kind"] = self.kind
        head = canonical_json(manifest).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head,
                 struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            key = name.encode("utf-8")
            parts.append(struct.pack("<I", len(key)) + key)
            parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < 12 + _DIGEST_LEN or raw[:4] != MAGIC:
            raise ArtifactError("not a checkpoint (bad magic)")
        body, tail = raw[:-_DIGEST_LEN], raw[-_DIGEST_LEN:]
        if hashlib.sha256(body).digest() != tail:
            raise ArtifactError("checkpoint digest mismatch (file corrupt or truncated)")
        version, mlen = struct.unpack_from("<II", body, 4)
        if version != FORMAT_VERSION:
            raise ArtifactError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
        off = 12
        try:
            manifest = json.loads(body[off:off + mlen].decode("utf-8"))
            off += mlen
            (count,) = struct.unpack_from("<I", body, off)
            off += 4
            tensors = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<I", body, off)
                off += 4
                name = body[off:off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<I", body, off)
                off += 4
                shape = struct.unpack_from(f"<{rank}Q", body, off)
                off += 8 * rank
                size = int(np.prod(shape, dtype=np.int64)) if rank else 1
                arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
                off += 8 * size
                tensors[name] = arr.astype(np.float64)
        except (struct.error, ValueError, UnicodeDecodeError) as err:
            raise ArtifactError(f"malformed checkpoint: {err}") from None
        if off != len(body):
            raise ArtifactError("trailing bytes in checkpoint")
        kind = manifest.pop("kind", None)
        if kind is None:
            raise ArtifactError("checkpoint manifest has no model kind")
        return cls(kind, manifest, tensors, tail.hex())


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    raw = ckpt.to_bytes()
    atomic_write(path, raw)
    ckpt.digest = raw[-_DIGEST_LEN:].hex()
    return ckpt.digest


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise ArtifactError(f"cannot read checkpoint {path}: {err}") from None
    ckpt = Checkpoint.from_bytes(raw)
    if kind is not None and ckpt.kind != kind:
        raise ArtifactError(f"{path} holds a {ckpt.kind!r} model, expected {kind!r}")
    return ckpt


def prefixed(prefix: str, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unprefixed(prefix: str, tensors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


# --------------------------------------------------------------------------
# JSONL datasets
# --------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    domain: str
    label: str
    traj: np.ndarray                    # (steps, width); a scene is a single step
    s0: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"domain": self.domain, "label": self.label,
             "traj": [[float(v) for v in row] for row in np.atleast_2d(self.traj)],
             "provenance": self.provenance}
        if self.s0 is not None:
            d["s0"] = [float(v) for v in self.s0]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        try:
            s0 = d.get("s0")
            return cls(d["domain"], d["label"], np.asarray(d["traj"], dtype=np.float64),
                       None if s0 is None else np.asarray(s0, dtype=np.float64), dict(d.get("provenance", {})))
        except (KeyError, TypeError, ValueError) as err:
            raise ArtifactError(f"malformed dataset record: {err}") from None


def dumps_record(rec: DatasetRecord) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return canonical_json(rec.to_json())


def write_jsonl(path, records: Iterable[DatasetRecord], widths: tuple[int, int | None] | None = None) -> str:
    """Write records atomically; ``widths`` = (state width, s0 width) checks the layout."""
    lines = []
    for rec in records:
        if widths is not None:
            check_widths(rec, *widths)
        lines.append(dumps_record(rec))
    atomic_write(path, "".join(line + "\n" for line in lines))
    return file_digest(path)


def iter_jsonl(path) -> Iterator[DatasetRecord]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as err:
        raise ArtifactError(f"cannot read dataset {path}: {err}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ArtifactError(f"{path}:{n}: {err}") from None
            yield DatasetRecord.from_json(obj)


def read_jsonl(path, widths: tuple[int, int | None] | None = None) -> list[DatasetRecord]:
    out = list(iter_jsonl(path))
    if widths is not None:
        for rec in out:
            check_widths(rec, *widths)
    return out


def check_widths(rec: DatasetRecord, state_width: int, s0_width: int | None) -> None:
    traj = np.atleast_2d(rec.traj)
    if traj.ndim != 2 or traj.shape[1] != state_width:
        raise ShapeError(f"record {rec.label!r}: state width {traj.shape[-1]}, layout says {state_width}")
    if s0_width is None:
        if rec.s0 is not None:
            raise ShapeError(f"record {rec.label!r}: unexpected s0")
    elif rec.s0 is None or rec.s0.shape != (s0_width,):
        raise ShapeError(f"record {rec.label!r}: s0 must have width {s0_width}")
