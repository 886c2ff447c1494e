"""Training loop, evaluation and per-run artifacts.

A run is one (config, seed) pair. Its directory holds::

    metrics.jsonl   header, one record per optimizer step, final eval record
    timing.jsonl    wall-clock times (kept apart so metrics hash deterministically)
    checkpoint/     trained phi/theta/heads
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import objective as O
from . import student as S
from . import tensor as T
from .config import RunConfig
from .data import Dataset, TeacherCache, pooled_features
from .optim import AdamW, clip_by_global_norm
from .pretrain import original_vlm
from .scene import RELATIONS

EVAL_BATCH = 100


class TrainingError(RuntimeError):
    pass


@dataclass
class RunResult:
    seed: int
    method: str
    params: dict
    heads: dict
    frozen: dict
    records: list[dict] = field(default_factory=list)
    eval: dict | None = None

    @property
    def overall(self) -> float:
        return self.eval["overall"]


def shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 0x5F1]).permutation(n)


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def _teacher_targets(cfg: RunConfig, ds: Dataset, cache: TeacherCache | None) -> np.ndarray | None:
    if cfg.method not in ("ours", "static_teacher"):
        return None
    if cache is None:
        raise TrainingError(f"method {cfg.method} needs a teacher cache ({cfg.teacher_cache})")
    return pooled_features(cache, ds, cfg.teacher, static=cfg.method == "static_teacher")


def step_loss(cfg: RunConfig, params, heads, frozen, ref, batch: dict, g) -> tuple[T.Tensor, O.LossBreakdown]:
    """Forward pass of one batch. ``g`` is None on the task-only path."""
    h = S.encode_and_project(params, batch["images"])
    logits, _ = S.answer_logits(frozen, h, batch["tokens"], batch["counts"])
    parts = {"task": O.task_loss(logits, batch["answers"], batch["counts"])}
    if g is not None:
        h_ref = S.encode_and_project(ref, batch["images"]).data
        parts["align"] = O.align_loss(heads, h, g, per_token=cfg.per_token_align)
        parts["preserve"] = O.preserve_loss(h, h_ref)
    return O.total_loss(parts, cfg.loss)


def train(cfg: RunConfig, seed: int, train_ds: Dataset, eval_ds: Dataset | None = None,
          cache: TeacherCache | None = None, out_dir: str | Path | None = None,
          log=None, on_step=None) -> RunResult:
    """Train one (config, seed) run. ``on_step(step, trainable)`` is called after every update."""
    vision, answer = original_vlm(cfg.pretrain, cfg.vlm_cache, log)
    params = {k: T.Tensor(v.data, True, k) for k, v in vision.items()}
    frozen = S.init_frozen(params, answer_head=answer)
    ref = S.reference_params(frozen)
    heads = O.init_heads(seed)
    trainable = {**params, **heads}
    targets = _teacher_targets(cfg, train_ds, cache)
    records = [{"kind": "header", "seed": seed, "config": cfg.to_dict(),
                "train_corpus": train_ds.corpus_id,
                "eval_corpus": None if eval_ds is None else eval_ds.corpus_id}]
    timing = []
    t0 = time.perf_counter()

    if cfg.method != "base":
        opt = AdamW(trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        n = len(train_ds)
        bs = cfg.batch_size
        step = 0
        for epoch in range(cfg.epochs):
            order = shuffle_order(seed, epoch, n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                batch = {"images": train_ds.images[idx], "tokens": train_ds.tokens[idx],
                         "answers": train_ds.answers[idx], "counts": train_ds.counts[idx]}
                g = None if targets is None else targets[idx]
                try:
                    total, parts = step_loss(cfg, params, heads, frozen, ref, batch, g)
                    if not np.isfinite(total.item()):
                        raise T.NonFiniteError("loss")
                    grads = T.backward(total)
                except (T.NonFiniteError, O.DegenerateFeatureError) as exc:
                    raise TrainingError(f"run aborted at step {step}: {exc}") from exc
                named = {k: grads[p] for k, p in trainable.items() if p in grads}
                named, norm = clip_by_global_norm(named, cfg.grad_clip_norm)
                opt.step(named)
                if on_step is not None:
                    on_step(step, trainable)
                records.append({"kind": "step", "step": step, "epoch": epoch,
                                "loss": parts.as_dict(), "grad_norm": norm})
                step += 1
            timing.append({"epoch": epoch, "steps": step, "wall_time": time.perf_counter() - t0})
            if log:
                log(f"[{cfg.method} seed={seed}] epoch {epoch} loss={parts.total:.4f} "
                    f"({time.perf_counter() - t0:.1f}s)")

    result = RunResult(seed, cfg.method, params, heads, frozen, records)
    if eval_ds is not None:
        ev = evaluate(params, frozen, eval_ds, split="eval")
        ev["seed"] = seed
        records.append(ev)
        result.eval = ev
    if out_dir is not None:
        write_run(out_dir, result, timing)
    return result


def evaluate(params: dict, frozen: dict, ds: Dataset, split: str = "eval") -> dict:
    """Letter-logit argmax accuracy per relation and micro overall."""
    if len(ds) == 0:
        raise ValueError("evaluate: empty split")
    preds = []
    for start in range(0, len(ds), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        h = S.encode_and_project(params, ds.images[sl])
        logits, mask = S.answer_logits(frozen, h, ds.tokens[sl], ds.counts[sl])
        preds.append(S.predict(logits.data, mask))
    return score(np.concatenate(preds), ds.answers, ds.relations, split)


def score(preds, answers, relations, split: str = "eval") -> dict:
    preds = np.asarray(preds)
    answers = np.asarray(answers)
    relations = np.asarray(relations)
    hit = preds == answers
    acc, counts = {}, {}
    for rel in RELATIONS:
        sel = relations == rel
        counts[rel] = int(sel.sum())
        acc[rel] = float(hit[sel].mean()) if counts[rel] else None
    return {"kind": "eval", "split": split, "accuracy": acc, "counts": counts,
            "correct": int(hit.sum()), "total": int(hit.size), "overall": float(hit.mean())}


def write_run(out_dir: str | Path, result: RunResult, timing: list[dict] | None = None) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "metrics.jsonl").open("w") as fh:
        for rec in result.records:
            fh.write(dumps(rec) + "\n")
    with (root / "timing.jsonl").open("w") as fh:
        for rec in timing or []:
            fh.write(dumps(rec) + "\n")
    # the frozen answer head rides along so a checkpoint evaluates on its own
    answer = {k: v for k, v in result.frozen.items() if k.startswith("frozen.answer.")}
    checkpoint.save(root / "checkpoint", {**result.params, **result.heads, **answer},
                    meta={"seed": result.seed, "method": result.method})
    return root


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
