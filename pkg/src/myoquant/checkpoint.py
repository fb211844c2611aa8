"""Model checkpoints: one little-endian tensor blob plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f32le": "<f4", "f64le": "<f8"}


def _tag(arr: np.ndarray) -> str:
    return "f64le" if arr.dtype == np.float64 else "f32le"


def save_checkpoint(path, state: dict[str, np.ndarray], kind: str, config: dict, seed: int | None,
                    extra: dict | None = None) -> Path:
    """Write ``<path>.bin`` and ``<path>.json``; returns the manifest path."""
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    entries, offset, chunks = [], 0, []
    for name, arr in state.items():
        tag = _tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = base.with_suffix(".bin")
    blob.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(b"".join(chunks))
    manifest = {"version": FORMAT_VERSION, "kind": kind, "config": config, "seed": seed,
                "blob": blob.name, "tensors": entries}
    if extra:
        manifest.update(extra)
    out = base.with_suffix(".json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a manifest (or its blob path) -> (manifest, state)."""
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    mpath = base.with_suffix(".json")
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{mpath}: unsupported checkpoint version {manifest.get('version')}")
    bpath = mpath.parent / manifest["blob"]
    if not bpath.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {bpath}")
    raw = bpath.read_bytes()
    expected = sum(e["nbytes"] for e in manifest["tensors"])
    if len(raw) != expected:
        raise ValueError(f"{bpath}: blob has {len(raw)} bytes, manifest describes {expected}")
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return manifest, state
