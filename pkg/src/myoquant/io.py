"""Image files: little-endian float32 payload (``.raw``) plus a JSON header
(``.json``) carrying geometry, semantics and provenance."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("t2", "pd", "b1", "ff", "echo-stack", "mask", "labels", "image")
DTYPE_TAG = "f32le"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Missing, corrupt or incompatible input data (CLI exit code 3)."""


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(command: str | None = None, config=None, seed: int | None = None) -> dict:
    if command is None:
        command = " ".join(["myoquant", *sys.argv[1:]])
    return {"command": command, "config_hash": config_hash(config if config is not None else {}), "seed": seed}


@dataclass
class Image:
    data: np.ndarray
    kind: str = "image"
    channels: list[str] = field(default_factory=list)
    spacing: list[float] = field(default_factory=lambda: [1.5, 1.5])
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {"dims": list(self.data.shape), "channels": list(self.channels), "spacing_mm": list(self.spacing),
                "dtype": DTYPE_TAG, "kind": self.kind, "provenance": self.provenance, **self.extra}


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".raw", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".raw"), p.with_suffix(".json")


def write_image(path, data, kind: str = "image", prov: dict | None = None, channels=None, spacing=None,
                extra: dict | None = None) -> Path:
    """Write ``data`` as f32le; masks are stored as 0/1. Returns the payload path."""
    if kind not in KINDS:
        raise ValueError(f"unknown image kind {kind!r}; expected one of {KINDS}")
    arr = np.asarray(data)
    if kind == "mask":
        arr = arr.astype(bool)
    img = Image(np.ascontiguousarray(arr, dtype="<f4"), kind, list(channels or []),
                list(spacing or [1.5, 1.5]), prov if prov is not None else provenance(), dict(extra or {}))
    raw, hdr = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(img.data.tobytes())
    hdr.write_text(json.dumps(img.header(), indent=2, sort_keys=True))
    return raw


def read_header(path) -> dict:
    _, hdr = _paths(path)
    if not hdr.exists():
        raise DataError(f"image header not found: {hdr}")
    try:
        return json.loads(hdr.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{hdr}: header is not valid JSON ({exc})") from exc


def read_image(path) -> Image:
    """Load an image; masks come back as bool, labels as int32, others as float32."""
    raw, hdr = _paths(path)
    header = read_header(path)
    if header.get("dtype") != DTYPE_TAG:
        raise DataError(f"{hdr}: unsupported dtype {header.get('dtype')!r}")
    if not raw.exists():
        raise DataError(f"image payload not found: {raw}")
    payload = raw.read_bytes()
    dims = [int(d) for d in header.get("dims", [])]
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if expected != len(payload):
        raise DataError(f"{raw}: header dims {dims} describe {expected} bytes but the payload has "
                        f"{len(payload)} bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    kind = header.get("kind", "image")
    if kind == "mask":
        data = data > 0.5
    elif kind == "labels":
        data = np.rint(data).astype(np.int32)
    known = {"dims", "channels", "spacing_mm", "dtype", "kind", "provenance"}
    return Image(data, kind, header.get("channels", []), header.get("spacing_mm", [1.5, 1.5]),
                 header.get("provenance", {}), {k: v for k, v in header.items() if k not in known})


def export_mask(path, mask) -> Path:
    """8-bit 0/255 grayscale export for viewing; format from the suffix (.pgm, .png)."""
    from PIL import Image as PILImage

    m = np.asarray(mask, bool)
    if m.ndim != 2:
        raise ValueError(f"mask export needs a 2-D mask, got shape {m.shape}")
    p = Path(path)
    PILImage.fromarray(m.astype(np.uint8) * 255).save(p)
    return p
