"""EMB1 writing and manifest bookkeeping.

The exporter writes the wire format independently (magic EMB1, version 1,
normalized flag, reserved zeros, uint64 n and d, float32 row-major payload,
all little-endian) and every export is validated by reloading through the
vocalign loader, which is the consumer of record.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from vocalign.store import load_matrix

from . import ExportError, __version__

_HEADER = struct.Struct("<4sBBHQQ")


def write_emb1(rows: np.ndarray, path, normalized: bool = True) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.size == 0:
        raise ExportError(f"refusing to write empty/malformed matrix {rows.shape}")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".part")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(b"EMB1", 1, 1 if normalized else 0, 0, *rows.shape))
        fh.write(rows.astype("<f4").tobytes())
    tmp.replace(path)


def validate_roundtrip(path, n: int, d: int, normalized: bool = True) -> None:
    """Round-trip gate: the consumer's loader must accept every export."""
    m = load_matrix(path, normalize=False)
    if (m.n, m.d) != (n, d):
        raise ExportError(f"{path}: reloaded as {m.n}x{m.d}, expected {n}x{d}")
    if normalized:
        norms = np.linalg.norm(m.data, axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > 1e-5:
            raise ExportError(f"{path}: reloaded rows deviate from unit norm by {worst:.2e}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, model: str, dataset: str, counts: dict,
                   files: list, templates: list | None = None) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "exporter_version": __version__,
        "model": model,
        "dataset": dataset,
        "templates": templates or [],
        "counts": counts,
        "files": {Path(f).name: sha256_file(f) for f in files},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def verify_manifest(out_dir) -> dict:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    for name, digest in manifest["files"].items():
        actual = sha256_file(out_dir / name)
        if actual != digest:
            raise ExportError(f"{name}: hash mismatch ({actual} != manifest {digest})")
    return manifest
