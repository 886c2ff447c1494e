"""Task, alignment and preservation losses and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .teacher import D_TEACHER
from .tensor import Tensor

NORM_GUARD = 1e-12
ALIGN_HIDDEN = 64
ALIGN_DIM = 32


class DegenerateFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_align: float = 0.10
    lambda_preserve: float = 0.05

    def __post_init__(self):
        if self.lambda_align < 0 or self.lambda_preserve < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    align: float
    preserve: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"task": self.task, "align": self.align, "preserve": self.preserve, "total": self.total}


def init_heads(seed: int, d_student: int = 48, d_teacher: int = D_TEACHER,
               hidden: int = ALIGN_HIDDEN, out: int = ALIGN_DIM) -> dict[str, Tensor]:
    """Trainable student/teacher projection heads (2-layer GELU MLPs)."""
    rng = np.random.default_rng([int(seed), 0xA11])
    heads: dict[str, Tensor] = {}
    for name, fan_in in (("fs", d_student), ("ft", d_teacher)):
        for layer, (i, o) in (("l1", (fan_in, hidden)), ("l2", (hidden, out))):
            key = f"heads.{name}.{layer}"
            heads[f"{key}.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(i), size=(i, o)), True, f"{key}.w")
            heads[f"{key}.b"] = Tensor(np.zeros(o), True, f"{key}.b")
    return heads


def _head(x: Tensor, heads: dict[str, Tensor], name: str) -> Tensor:
    k = f"heads.{name}"
    hid = T.gelu(x @ heads[f"{k}.l1.w"] + heads[f"{k}.l1.b"])
    return hid @ heads[f"{k}.l2.w"] + heads[f"{k}.l2.b"]


def _guard(x: Tensor, what: str) -> None:
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    if norms.size and norms.min() <= NORM_GUARD:
        raise DegenerateFeatureError(f"{what}: near-zero norm {norms.min():.3e}")


def align_loss(heads: dict[str, Tensor], h: Tensor, g, per_token: bool = False) -> Tensor:
    """Mean of 1 - cos(f_s(h), f_t(g)) over the batch; g is treated as a constant.

    ``h`` is (B, N, d_h) or (N, d_h); ``g`` is (B, d_t) or (d_t,). By default
    the student feature is the token mean of h; ``per_token`` aligns every
    token with the same teacher vector and averages.
    """
    g_data = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    single = h.ndim == 2
    if single:
        h = T.reshape(h, (1,) + h.shape)
        g_data = g_data.reshape(1, -1)
    u_t = _head(Tensor(g_data), heads, "ft")
    _guard(u_t, "align_loss teacher projection")
    u_t = T.l2_normalize(u_t)
    if per_token:
        u_s = _head(h, heads, "fs")
        _guard(u_s, "align_loss student projection")
        b = u_t.shape[0]
        cos = T.l2_normalize(u_s) @ T.reshape(u_t, (b, u_t.shape[1], 1))
    else:
        u_s = _head(T.mean(h, axis=1), heads, "fs")
        _guard(u_s, "align_loss student projection")
        cos = T.sum_(T.l2_normalize(u_s) * u_t, axis=-1)
    return 1.0 - T.mean(cos)


def preserve_loss(h: Tensor, h_ref) -> Tensor:
    """Squared distance between per-token unit directions of h and h_ref, token-averaged.

    ``h_ref`` is detached. Shapes (B, N, d) or (N, d); the result averages
    over tokens and batch.
    """
    ref = h_ref.data if isinstance(h_ref, Tensor) else np.asarray(h_ref, dtype=np.float64)
    if ref.shape != h.shape:
        raise T.ShapeError(f"preserve_loss: shapes {h.shape} and {ref.shape} differ")
    _guard(h, "preserve_loss student feature")
    ref_norm = np.sqrt((ref * ref).sum(axis=-1, keepdims=True))
    if ref_norm.min() <= NORM_GUARD:
        raise DegenerateFeatureError(f"preserve_loss reference: near-zero norm {ref_norm.min():.3e}")
    diff = T.l2_normalize(h) - Tensor(ref / ref_norm)
    return T.mean(T.sum_(diff * diff, axis=-1))


def task_loss(logits: Tensor, answer_index, option_count) -> Tensor:
    """Option-restricted cross-entropy, batch mean."""
    answers = np.atleast_1d(np.asarray(answer_index, dtype=np.int64))
    counts = np.atleast_1d(np.asarray(option_count, dtype=np.int64))
    if np.any(answers >= counts) or np.any(answers < 0):
        raise ValueError(f"answer_index must be < option_count: {answers} vs {counts}")
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    mask = np.arange(logits.shape[-1])[None, :] < counts[:, None]
    logp = T.log_softmax(logits, mask)
    return -T.mean(T.pick(logp, answers))


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """task + lambda_align * align + lambda_preserve * preserve.

    Missing terms count as zero; the returned breakdown reports the floats of
    the exact graph nodes that were summed.
    """
    total = parts["task"]
    align = parts.get("align")
    preserve = parts.get("preserve")
    if align is not None:
        total = total + align * weights.lambda_align
    if preserve is not None:
        total = total + preserve * weights.lambda_preserve
    breakdown = LossBreakdown(
        task=parts["task"].item(),
        align=0.0 if align is None else align.item(),
        preserve=0.0 if preserve is None else preserve.item(),
        total=total.item(),
    )
    return total, breakdown
