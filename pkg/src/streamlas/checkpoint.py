"""MSCKPT1 checkpoint files: a text manifest plus a flat float32 blob.

Layout for a checkpoint stem ``path``::

    path.manifest   MSCKPT1 / blob name + byte count / one "key<TAB>shape<TAB>offset" per tensor
    path.bin        little-endian float32 values, tensors back to back in manifest order
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_TAG = "MSCKPT1"


class CheckpointError(Exception):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def paths_for(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")


def encode(arrays: dict) -> tuple[str, bytes]:
    lines, chunks, offset = [], [], 0
    for key in sorted(arrays):
        arr = np.asarray(arrays[key], dtype="<f4")
        if any(c.isspace() for c in key):
            raise CheckpointError(f"parameter name {key!r} contains whitespace")
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"{key}\t{shape}\t{offset}")
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    return "\n".join(lines), blob


def save(stem, arrays: dict) -> tuple[Path, Path]:
    """Write ``arrays`` (name -> array-like) as an MSCKPT1 checkpoint."""
    manifest_path, blob_path = paths_for(stem)
    body, blob = encode(arrays)
    header = f"{FORMAT_TAG}\nblob\t{blob_path.name}\t{len(blob)}\n"
    _atomic_write(blob_path, blob)
    _atomic_write(manifest_path, (header + body + "\n").encode("utf-8"))
    return manifest_path, blob_path


def load(stem) -> dict:
    """Read a checkpoint back as a dict of float32 arrays."""
    manifest_path, blob_path = paths_for(stem)
    if not manifest_path.exists():
        raise CheckpointError(f"missing checkpoint manifest {manifest_path}")
    lines = manifest_path.read_text("utf-8").splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise CheckpointError(f"{manifest_path}: not an {FORMAT_TAG} manifest")
    try:
        _, blob_name, nbytes = lines[1].split("\t")
        nbytes = int(nbytes)
    except (IndexError, ValueError):
        raise CheckpointError(f"{manifest_path}: malformed blob line") from None
    blob_path = manifest_path.with_name(blob_name)
    if not blob_path.exists():
        raise CheckpointError(f"missing checkpoint blob {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != nbytes:
        raise CheckpointError(f"{blob_path}: expected {nbytes} bytes, found {len(blob)}")
    out = {}
    for line in lines[2:]:
        if not line.strip():
            continue
        key, shape_s, offset_s = line.split("\t")
        shape = tuple(int(n) for n in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        if offset + 4 * count > len(blob):
            raise CheckpointError(f"{key}: data extends past end of blob")
        out[key] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    return out


def blob_bytes(stem) -> bytes:
    return paths_for(stem)[1].read_bytes()
