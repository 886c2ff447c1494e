"""Pretraining of the original VLM that every method starts from.

Two stages on a corpus disjoint from the train and eval splits:

1. layout stage: the vision side learns to expose the scene layout; a
   throwaway linear readout of token-mean(h) regresses, per class label,
   (present, u, v, depth) scaled to roughly unit range;
2. answer stage: with the vision side fixed, the answer head learns the QA
   task from token-mean(h) and the text features.

The result is stored as a checkpoint keyed by the pretraining config hash,
so it is computed once and then reused by every run.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import student as S
from . import tensor as T
from .objective import task_loss
from .optim import AdamW, clip_by_global_norm
from .data import Dataset
from .scene import CLASS_LABELS, IMAGE_SIZE, SceneSpec, generate_corpus, project
from .tensor import Tensor

LAYOUT_DIM = 4 * len(CLASS_LABELS)
DEPTH_CENTER, DEPTH_SCALE = 6.0, 3.0


@dataclass(frozen=True)
class PretrainConfig:
    seed: int = S.FROZEN_SEED
    corpus_start: int = 20_000_000
    count: int = 8000
    batch_size: int = 8
    layout_epochs: int = 5
    layout_lr: float = 3e-3
    answer_epochs: int = 8
    answer_lr: float = 1e-3
    grad_clip_norm: float = 1.0

    def key(self) -> str:
        """Config hash plus a fingerprint of the generated corpus, so a changed
        scene generator invalidates cached models."""
        probe = "\n".join(e.to_json() for e in generate_corpus(self.corpus_start, 16, split="pretrain"))
        blob = json.dumps(asdict(self), sort_keys=True) + probe
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> PretrainConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def layout_code(scene: SceneSpec) -> np.ndarray:
    """Per class label: (present, u, v, depth), centered and scaled."""
    out = np.zeros(LAYOUT_DIM)
    proj = project(scene)
    for o in scene.objects:
        j = 4 * CLASS_LABELS.index(o.label)
        u, v, z = proj[o.id]
        out[j:j + 4] = (1.0, u / IMAGE_SIZE - 0.5, v / IMAGE_SIZE - 0.5, (z - DEPTH_CENTER) / DEPTH_SCALE)
    return out


def _order(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), stage, epoch, 0x9E7]).permutation(n)


def _run_stage(params: dict[str, Tensor], lr: float, cfg: PretrainConfig, epochs: int, n: int,
               stage: int, loss_fn, log=None) -> None:
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    for epoch in range(epochs):
        order = _order(cfg.seed, stage, epoch, n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = loss_fn(idx)
            grads = T.backward(loss)
            named = {k: grads[p] for k, p in params.items() if p in grads}
            named, _ = clip_by_global_norm(named, cfg.grad_clip_norm)
            opt.step(named)
        if log:
            log(f"pretrain stage {stage} epoch {epoch}: loss {loss.item():.4f}")


def pretrain(cfg: PretrainConfig = PretrainConfig(), log=None) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Return (vision-side params, answer-head params) of the original VLM."""
    ds = Dataset.from_examples(generate_corpus(cfg.corpus_start, cfg.count, split="pretrain"))
    target = np.stack([layout_code(e.scene) for e in ds.examples])
    student = S.init_student(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x1A7])
    readout = {
        "readout.w": Tensor(rng.normal(0.0, 1.0 / np.sqrt(S.D_HIDDEN), (S.D_HIDDEN, LAYOUT_DIM)), True),
        "readout.b": Tensor(np.zeros(LAYOUT_DIM), True),
    }

    def layout_loss(idx):
        pooled = T.mean(S.encode_and_project(student, ds.images[idx]), axis=1)
        diff = pooled @ readout["readout.w"] + readout["readout.b"] - Tensor(target[idx])
        return T.mean(diff * diff)

    _run_stage({**student, **readout}, cfg.layout_lr, cfg, cfg.layout_epochs, len(ds), 1, layout_loss, log)

    head = S.init_answer_head(cfg.seed)
    head = {k: Tensor(v.data, True, k) for k, v in head.items()}
    fixed = {k: Tensor(v.data, False, k) for k, v in student.items()}
    frozen = S.init_frozen(fixed, answer_head=head)
    # the answer stage trains the head, so the dict must hold the trainable tensors
    frozen.update(head)

    def answer_loss(idx):
        h = S.encode_and_project(fixed, ds.images[idx])
        logits, _ = S.answer_logits(frozen, h, ds.tokens[idx], ds.counts[idx])
        return task_loss(logits, ds.answers[idx], ds.counts[idx])

    _run_stage(head, cfg.answer_lr, cfg, cfg.answer_epochs, len(ds), 2, answer_loss, log)
    vision = {k: Tensor(v.data, True, k) for k, v in student.items()}
    answer = {k: Tensor(v.data, False, k) for k, v in head.items()}
    return vision, answer


def original_vlm(cfg: PretrainConfig = PretrainConfig(), cache_dir: str | Path | None = None,
                 log=None) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Pretrained (vision side, answer head), read from ``cache_dir`` when present."""
    path = None if cache_dir is None else Path(cache_dir) / f"vlm-{cfg.key()}"
    if path is not None and (path / checkpoint.MANIFEST).exists():
        tensors = checkpoint.load(path)
    else:
        vision, answer = pretrain(cfg, log)
        tensors = {**vision, **answer}
        if path is not None:
            checkpoint.save(path, tensors, meta={"pretrain": cfg.to_dict()})
    vision = {k: Tensor(v.data, True, k) for k, v in tensors.items() if k.startswith(("phi.", "theta."))}
    answer = {k: Tensor(v.data, False, k) for k, v in tensors.items() if k.startswith("frozen.answer.")}
    return vision, answer
