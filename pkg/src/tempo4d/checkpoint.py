"""Parameter checkpoints: JSON manifest + raw little-endian float32 payload.

    name.manifest.json  {"format": 1, "tensors": [{"name", "shape", "offset", "nbytes"}, ...],
                         "meta": {...}}
    name.raw            tensors concatenated in manifest order, row-major
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

PAYLOAD_DTYPE = np.dtype("<f4")


def checkpoint_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".manifest.json", ".raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".manifest.json"), p.with_name(name + ".raw")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest_path, raw_path = checkpoint_paths(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    raw_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps({"format": 1, "tensors": entries, "meta": meta or {}}, indent=1))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, raw_path = checkpoint_paths(path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
        entries = doc["tensors"]
    except (ValueError, KeyError) as exc:
        raise ValueError(f"corrupt checkpoint manifest {manifest_path}: {exc}") from exc
    payload = raw_path.read_bytes()
    out = {}
    for e in entries:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        start = int(e["offset"])
        if nbytes != e["nbytes"] or start + nbytes > len(payload):
            raise ValueError(f"checkpoint payload too short or inconsistent for tensor {e['name']!r}")
        out[e["name"]] = np.frombuffer(payload, PAYLOAD_DTYPE, count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
    return out, doc.get("meta", {})


def params_hash(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes, dtypes and raw bytes; used for freeze checks."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()
