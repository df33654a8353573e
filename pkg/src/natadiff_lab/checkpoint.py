"""Versioned structured-text checkpoints for networks and victims.

A checkpoint is one JSON document: a ``kind`` tag, a format version, named
arrays stored as ``{"shape": [...], "data": [row-major floats]}``, and a free
``meta`` mapping. Floats round-trip exactly through ``repr``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "natadiff-lab-checkpoint"
VERSION = 1


def pack_array(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def unpack_array(d) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def dumps(kind: str, arrays: dict, meta: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta or {},
        "arrays": {name: pack_array(a) for name, a in arrays.items()},
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def loads(text: str, kind: str | None = None):
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError("not a natadiff-lab checkpoint")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    if kind is not None and doc["kind"] != kind:
        raise ValueError(f"expected a {kind!r} checkpoint, found {doc['kind']!r}")
    arrays = {name: unpack_array(a) for name, a in doc["arrays"].items()}
    return doc["kind"], arrays, doc["meta"]


def save(path, kind, arrays, meta=None) -> str:
    text = dumps(kind, arrays, meta)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load(path, kind=None):
    return loads(Path(path).read_text(), kind)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
