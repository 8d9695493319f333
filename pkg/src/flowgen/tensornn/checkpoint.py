"""Checkpoint format: JSON manifest + flat little-endian float32 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .params import ParamSet

FORMAT = "flowgen-params-v1"


def save_params(params: ParamSet, prefix: str | Path):
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.bin`` (blob)."""
    prefix = Path(prefix)
    manifest = {"format": FORMAT, "tensors": []}
    chunks = []
    offset = 0
    for name, t in params.items():
        flat = np.ascontiguousarray(t.data, dtype="<f4").ravel()
        manifest["tensors"].append({
            "name": name,
            "shape": list(t.data.shape),
            "offset": offset,
        })
        chunks.append(flat.tobytes())
        offset += flat.size * 4
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    prefix.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_params(prefix: str | Path) -> ParamSet:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unrecognized checkpoint format: {manifest.get('format')}")
    blob = prefix.with_suffix(".bin").read_bytes()
    params = ParamSet()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        params.add(entry["name"], arr.reshape(shape).astype(np.float32))
    return params
