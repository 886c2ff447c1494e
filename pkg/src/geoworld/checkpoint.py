"""Parameter checkpoints: one little-endian float64 file per tensor plus a JSON manifest.

Layout of a checkpoint directory::

    manifest.json
    tensors/<name>.f64

``manifest.json`` maps every parameter name to ``{"shape", "offset", "file"}``.
Each tensor lives in its own file, so ``offset`` is always 0; the field is kept
so a packed single-file layout can be read by the same loader.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

MANIFEST = "manifest.json"
FORMAT = "geoworld-checkpoint/1"


def tensor_bytes(t) -> bytes:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return np.ascontiguousarray(data, dtype="<f8").tobytes()


def params_digest(params: dict[str, Tensor]) -> str:
    """sha256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name]
        h.update(name.encode())
        h.update(json.dumps(list(t.shape)).encode())
        h.update(tensor_bytes(t))
    return h.hexdigest()


def save(path: str | Path, params: dict[str, Tensor], meta: dict | None = None) -> Path:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(params):
        rel = f"tensors/{name}.f64"
        (root / rel).write_bytes(tensor_bytes(params[name]))
        entries[name] = {"shape": list(params[name].shape), "offset": 0, "file": rel}
    manifest = {"format": FORMAT, "tensors": entries, "meta": meta or {}}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load(path: str | Path, requires_grad: bool | None = None) -> dict[str, Tensor]:
    """Read every tensor back. By default ``phi.*``, ``theta.*`` and ``heads.*`` are trainable."""
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text())
    out = {}
    for name, e in manifest["tensors"].items():
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = (root / e["file"]).read_bytes()
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=int(e["offset"])).reshape(shape)
        grad = requires_grad if requires_grad is not None else name.startswith(("phi.", "theta.", "heads."))
        out[name] = Tensor(data.astype(np.float64), grad, name)
    return out


def load_meta(path: str | Path) -> dict:
    return json.loads((Path(path) / MANIFEST).read_text()).get("meta", {})
