"""Single-file checkpoint: JSON manifest followed by a raw little-endian tensor blob.

Layout::

    b"SGMCKPT1" | u64 LE manifest length | manifest (UTF-8 JSON) | blob

The manifest lists every tensor with name, shape, dtype, byte offset and size
inside the blob, plus free-form metadata (configs, normalization stats, step).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import IntegrityError

MAGIC = b"SGMCKPT1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _to_le_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    arr = t.detach().cpu().contiguous().numpy()
    name = str(arr.dtype)
    if name not in _DTYPES:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    return name, arr.astype(_DTYPES[name], copy=False).tobytes(order="C")


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        dtype, raw = _to_le_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = dict(meta)
    manifest["tensors"] = entries
    manifest["blob_size"] = len(blob)
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)
    tmp.replace(path)


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise IntegrityError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<Q", raw, 8)
    if 16 + n > len(raw):
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + n])
    except ValueError as e:
        raise IntegrityError(f"{path}: unreadable manifest ({e})") from None
    return manifest, raw[16 + n :]


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Validate the whole file before materializing any tensor."""
    manifest, blob = read_manifest(path)
    entries = manifest.get("tensors") if isinstance(manifest, dict) else None
    if not isinstance(entries, list) or not all(
        isinstance(e, dict) and {"name", "shape", "dtype", "offset", "nbytes"} <= set(e) for e in entries
    ):
        raise IntegrityError(f"{path}: malformed tensor table in manifest")
    if len(blob) != manifest.get("blob_size"):
        raise IntegrityError(f"{path}: blob is {len(blob)} bytes, manifest says {manifest.get('blob_size')}")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise IntegrityError(f"{path}: blob checksum mismatch")
    expected, seen = 0, set()
    for e in entries:
        if e["name"] in seen:
            raise IntegrityError(f"{path}: duplicate tensor {e['name']}")
        seen.add(e["name"])
        if e["dtype"] not in _DTYPES:
            raise IntegrityError(f"{path}: unknown dtype {e['dtype']}")
        size = int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(_DTYPES[e["dtype"]]).itemsize
        if e["offset"] != expected or e["nbytes"] != size:
            raise IntegrityError(f"{path}: tensor {e['name']} has offset/size inconsistent with layout")
        expected += size
    if expected != len(blob):
        raise IntegrityError(f"{path}: tensors cover {expected} of {len(blob)} blob bytes")

    tensors = {}
    for e in entries:
        arr = np.frombuffer(blob, _DTYPES[e["dtype"]], int(np.prod(e["shape"], dtype=np.int64)), e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]).reshape(e["shape"]))
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "blob_size", "blob_sha256")}
    return tensors, meta
