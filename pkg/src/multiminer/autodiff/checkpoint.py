"""Parameter checkpoints: one little-endian float64 blob plus a JSON manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ChecksumError, FormatVersionError, MissingArtifactError

FORMAT_VERSION = 1
BLOB = "params.f64"
MANIFEST = "manifest.json"


def save_params(params: Mapping[str, np.ndarray], directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    (directory / BLOB).write_bytes(blob)
    manifest = {"format_version": FORMAT_VERSION, "params": entries,
                "sha256": hashlib.sha256(blob).hexdigest()}
    if extra:
        manifest["extra"] = extra
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_params(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    if not (directory / MANIFEST).exists() or not (directory / BLOB).exists():
        raise MissingArtifactError(f"no checkpoint in {directory}")
    manifest = json.loads((directory / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"checkpoint version {manifest.get('format_version')} "
                                 f"!= {FORMAT_VERSION}")
    blob = (directory / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"checkpoint blob {directory / BLOB} failed its checksum")
    out = {}
    for e in manifest["params"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("extra", {})
