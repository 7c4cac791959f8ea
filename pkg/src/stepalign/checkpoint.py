"""Checkpoint format: a JSON manifest plus a flat little-endian float64 payload.

`save_params(stem, ...)` writes `<stem>.json` and `<stem>.bin`. The manifest
records block names, shapes, and byte offsets into the payload, plus a
caller-supplied metadata dict. Round-trips are bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .nets import ParamStore

FORMAT_TAG = "stepalign-params-v1"
DTYPE = "<f8"


def save_params(stem, store: ParamStore, meta: dict | None = None) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    payload = bytearray()
    for name in store.names():
        arr = np.ascontiguousarray(store.param(name), dtype=DTYPE)
        blocks.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload += arr.tobytes()
    manifest = {
        "format": FORMAT_TAG,
        "dtype": DTYPE,
        "payload": stem.name + ".bin",
        "blocks": blocks,
        "meta": dict(meta or {}),
    }
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(bytes(payload))


def load_params(stem) -> tuple[ParamStore, dict]:
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_TAG:
        raise ConfigurationError(
            f"{stem}: unknown checkpoint format {manifest.get('format')!r}"
        )
    raw = stem.with_suffix(".bin").read_bytes()
    store = ParamStore()
    for block in manifest["blocks"]:
        shape = tuple(block["shape"])
        off = block["offset"]
        arr = np.frombuffer(raw[off:off + block["nbytes"]], dtype=DTYPE)
        if arr.size != int(np.prod(shape)):
            raise ConfigurationError(f"{stem}: truncated payload for {block['name']!r}")
        store.add(block["name"], arr.reshape(shape).copy())
    return store, manifest.get("meta", {})
