"""Parameter checkpoints: a flat little-endian float64 blob plus a text manifest.

Manifest lines are ``name<TAB>dtype<TAB>d0,d1,...<TAB>offset`` where offset
counts scalars (not bytes) into the blob.  Lines starting with ``#`` carry
free-form ``key=value`` metadata.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def save_arrays(arrays: dict[str, np.ndarray], path: str | Path, meta: dict[str, str] | None = None) -> str:
    """Write ``path.bin`` and ``path.manifest``; returns the blob's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in sorted((meta or {}).items())]
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"illegal parameter name {name!r}")
        arr = np.asarray(arr)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{arr.dtype.str}\t{shape}\t{offset}")
        chunks.append(arr.astype("<f8").tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".manifest").write_text("\n".join(lines) + "\n")
    return hashlib.sha256(blob).hexdigest()


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    try:
        text = path.with_suffix(".manifest").read_text()
        blob = path.with_suffix(".bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) % 8:
        raise CheckpointError(f"{path}: blob length {len(blob)} is not a multiple of 8")
    flat = np.frombuffer(blob, dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
            continue
        try:
            name, dtype, shape_s, offset_s = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",") if d)
            offset = int(offset_s)
        except ValueError:
            raise CheckpointError(f"{path}.manifest:{lineno}: malformed entry {line!r}") from None
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise CheckpointError(f"{path}: entry {name!r} runs past the end of the blob")
        arrays[name] = flat[offset : offset + size].reshape(shape).astype(np.dtype(dtype))
    return arrays, meta


def blob_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).with_suffix(".bin").read_bytes()).hexdigest()
