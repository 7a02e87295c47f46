"""Binary tensor blobs and manifest+blob archives.

A blob is ``b"DOTT"``, a little-endian u32 rank, ``rank`` u64 extents, then the
float64 payload in row-major order. Archives are uncompressed zip files with a
``manifest.json`` entry and one ``<name>.dott`` entry per tensor; timestamps are
pinned so identical content gives identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

from dotuda.errors import FormatError

MAGIC = b"DOTT"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def tensor_to_bytes(array) -> bytes:
    arr = np.asarray(array, dtype="<f8").copy(order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("bad magic: not a DOTT tensor blob")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 8 * rank
    if len(blob) < offset:
        raise FormatError(f"truncated header: rank {rank} needs {offset} bytes, have {len(blob)}")
    extents = struct.unpack_from(f"<{rank}Q", blob, 8)
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes for shape {extents}, have {len(blob)}")
    return np.frombuffer(blob, dtype="<f8", offset=offset, count=count).astype(np.float64).reshape(extents)


def save_archive(path, manifest: dict, tensors: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(tensors):
            info = zipfile.ZipInfo(f"{name}.dott", date_time=_EPOCH)
            zf.writestr(info, tensor_to_bytes(tensors[name]))


def load_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
        with zipfile.ZipFile(io.BytesIO(raw)) as zf:
            names = zf.namelist()
            if "manifest.json" not in names:
                raise FormatError(f"{path}: missing manifest.json")
            manifest = json.loads(zf.read("manifest.json"))
            tensors = {
                n[: -len(".dott")]: tensor_from_bytes(zf.read(n)) for n in names if n.endswith(".dott")
            }
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: unreadable archive ({exc})") from exc
    return manifest, tensors
