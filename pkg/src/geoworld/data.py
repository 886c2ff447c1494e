"""Array views of QA corpora and the on-disk teacher feature cache.

Cache layout (one directory)::

    manifest.json
    blobs/<corpus_id>-<cfg_key>.f64

Each blob holds per-frame teacher features for a whole corpus as
little-endian float64 with shape (N, F, D); the manifest entry records the
shape, the teacher config and the example ids in row order. Pooling is
applied on read, so one blob serves every pooling mode.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import QAExample, read_corpus
from .teacher import (TeacherConfig, example_seeds, pool_frames, sample_trajectory,
                      static_features, teacher_features, teacher_weights)

CACHE_MANIFEST = "manifest.json"


class CacheError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    corpus_id: str
    examples: list[QAExample]
    images: np.ndarray
    tokens: np.ndarray
    answers: np.ndarray
    counts: np.ndarray
    relations: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def example_ids(self) -> list[str]:
        return [e.example_id for e in self.examples]

    @classmethod
    def from_examples(cls, examples: list[QAExample], corpus_id: str | None = None) -> Dataset:
        if not examples:
            raise ValueError("empty corpus")
        if corpus_id is None:
            h = hashlib.sha256()
            for e in examples:
                h.update(e.to_json().encode())
            corpus_id = h.hexdigest()[:16]
        return cls(
            corpus_id,
            list(examples),
            np.stack([e.image for e in examples]),
            np.array([e.question_tokens for e in examples], dtype=np.int64),
            np.array([e.answer_index for e in examples], dtype=np.int64),
            np.array([e.option_count for e in examples], dtype=np.int64),
            np.array([e.relation for e in examples]),
        )

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"corpus not found: {path}")
        corpus_id = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        return cls.from_examples(read_corpus(path), corpus_id)


# -- teacher features -----------------------------------------------------------
def static_key(block_index: int) -> str:
    return f"static-b{block_index}"


def compute_per_frame(ds: Dataset, cfg: TeacherConfig | None, static: bool = False) -> np.ndarray:
    """(N, F, D) per-frame teacher features; ``static`` uses the single-frame static network."""
    rows = []
    if static:
        block = (cfg or TeacherConfig()).block_index
        for e in ds.examples:
            rows.append(static_features(e.scene, block_index=block).per_frame)
        return np.stack(rows)
    weights = teacher_weights(cfg.seed)
    for e in ds.examples:
        if e.scene is None:
            raise ValueError(f"example {e.example_id} carries no scene; teacher features need geometry")
        traj_seed, noise_seed = example_seeds(e.seed)
        traj = sample_trajectory(traj_seed, cfg.frame_count, cfg.magnitude_range)
        rows.append(teacher_features(cfg, e.scene, traj, noise_seed, weights).per_frame)
    return np.stack(rows)


class TeacherCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _manifest(self) -> dict:
        p = self.root / CACHE_MANIFEST
        return json.loads(p.read_text()) if p.exists() else {"entries": {}}

    @staticmethod
    def entry_name(corpus_id: str, key: str) -> str:
        return f"{corpus_id}-{key}"

    def has(self, corpus_id: str, key: str) -> bool:
        return self.entry_name(corpus_id, key) in self._manifest()["entries"]

    def put(self, ds: Dataset, key: str, per_frame: np.ndarray, cfg: dict | None = None) -> None:
        name = self.entry_name(ds.corpus_id, key)
        (self.root / "blobs").mkdir(parents=True, exist_ok=True)
        rel = f"blobs/{name}.f64"
        (self.root / rel).write_bytes(np.ascontiguousarray(per_frame, dtype="<f8").tobytes())
        manifest = self._manifest()
        manifest["entries"][name] = {
            "corpus_id": ds.corpus_id,
            "cfg_key": key,
            "file": rel,
            "shape": list(per_frame.shape),
            "teacher": cfg,
            "example_ids": ds.example_ids,
        }
        (self.root / CACHE_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    def get(self, ds: Dataset, key: str) -> np.ndarray:
        name = self.entry_name(ds.corpus_id, key)
        entry = self._manifest()["entries"].get(name)
        if entry is None:
            raise CacheError(f"teacher cache {self.root} has no entry {name}; run gen-data --teacher-cache")
        if entry["example_ids"] != ds.example_ids:
            raise CacheError(f"teacher cache entry {name} does not match corpus example ids")
        raw = (self.root / entry["file"]).read_bytes()
        return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)

    def ensure(self, ds: Dataset, cfg: TeacherConfig, static: bool = False) -> str:
        key = static_key(cfg.block_index) if static else cfg.cache_key()
        if not self.has(ds.corpus_id, key):
            per_frame = compute_per_frame(ds, cfg, static)
            self.put(ds, key, per_frame, None if static else cfg.to_dict())
        return key


def pooled_features(cache: TeacherCache, ds: Dataset, cfg: TeacherConfig, static: bool = False) -> np.ndarray:
    """(N, D) pooled teacher features g read from the cache."""
    key = static_key(cfg.block_index) if static else cfg.cache_key()
    per_frame = cache.get(ds, key)
    mode = "mean" if static else cfg.pooling
    return np.stack([pool_frames(pf, mode) for pf in per_frame])
