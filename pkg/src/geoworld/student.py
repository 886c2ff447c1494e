"""Miniature VLM: trainable vision encoder + projector, frozen text encoder + answer head.

Pixels enter through a fixed intensity code: each pixel becomes soft
memberships in the background level and the 12 object intensity levels, so
the 4x4 patch embedding sees 16 * 13 inputs. Object identity lives in exact
intensity, which a linear patch map over raw pixels cannot separate.

The answer head scores each option separately from
``[token-mean(h) | question feature | option-label embedding]`` with shared
weights, giving one logit per option letter.

Parameter names carry their group as a prefix: ``phi.*`` (vision encoder),
``theta.*`` (projector), ``frozen.*`` (text encoder, answer head and the
byte copy of the initial vision side). Freezing is keyed on that prefix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .scene import CLASS_INTENSITY, CLASS_LABELS, IMAGE_SIZE, MAX_OPTIONS, OPTION_SLOT, VOCAB
from .tensor import Tensor

PIXEL_LEVELS = np.array([0.0] + [CLASS_INTENSITY[c] for c in CLASS_LABELS])
PIXEL_WIDTH = 0.02
PATCH = 4
N_TOKENS = (IMAGE_SIZE // PATCH) ** 2
D_VISION = 32
D_HIDDEN = 48
N_HEADS = 2
FFN_HIDDEN = 64
N_BLOCKS = 2
FROZEN_SEED = 42


@dataclass(frozen=True)
class StudentConfig:
    d_vision: int = D_VISION
    d_hidden: int = D_HIDDEN
    n_heads: int = N_HEADS
    ffn_hidden: int = FFN_HIDDEN
    n_blocks: int = N_BLOCKS
    answer_hidden: int = 128


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str,
            requires_grad: bool) -> dict[str, Tensor]:
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    return {
        f"{prefix}.w": Tensor(w, requires_grad, f"{prefix}.w"),
        f"{prefix}.b": Tensor(np.zeros(fan_out), requires_grad, f"{prefix}.b"),
    }


def _ln(dim: int, prefix: str, requires_grad: bool) -> dict[str, Tensor]:
    return {
        f"{prefix}.g": Tensor(np.ones(dim), requires_grad, f"{prefix}.g"),
        f"{prefix}.b": Tensor(np.zeros(dim), requires_grad, f"{prefix}.b"),
    }


def init_student(seed: int, cfg: StudentConfig = StudentConfig()) -> dict[str, Tensor]:
    """Fresh trainable (phi, theta) parameters."""
    rng = np.random.default_rng([int(seed), 0x57D])
    p: dict[str, Tensor] = {}
    dv = cfg.d_vision
    n_in = PATCH * PATCH * len(PIXEL_LEVELS)
    p["phi.patch.w"] = Tensor(rng.normal(0.0, 1.0 / PATCH, size=(n_in, dv)), True, "phi.patch.w")
    p["phi.patch.b"] = Tensor(np.zeros(dv), True, "phi.patch.b")
    p["phi.pos"] = Tensor(rng.normal(0.0, 0.1, size=(N_TOKENS, dv)), True, "phi.pos")
    for i in range(cfg.n_blocks):
        b = f"phi.block{i}"
        p.update(_ln(dv, f"{b}.ln1", True))
        for name in ("q", "k", "v", "o"):
            p.update(_linear(rng, dv, dv, f"{b}.attn.{name}", True))
        p.update(_ln(dv, f"{b}.ln2", True))
        p.update(_linear(rng, dv, cfg.ffn_hidden, f"{b}.ffn1", True))
        p.update(_linear(rng, cfg.ffn_hidden, dv, f"{b}.ffn2", True))
    p.update(_ln(dv, "phi.ln_out", True))
    p.update(_linear(rng, dv, cfg.d_hidden, "theta.l1", True))
    p.update(_linear(rng, cfg.d_hidden, cfg.d_hidden, "theta.l2", True))
    return p


def init_answer_head(seed: int = FROZEN_SEED, cfg: StudentConfig = StudentConfig()) -> dict[str, Tensor]:
    rng = np.random.default_rng([int(seed), 0xA45])
    f: dict[str, Tensor] = {}
    f.update(_linear(rng, 3 * cfg.d_hidden, cfg.answer_hidden, "frozen.answer.l1", False))
    f.update(_linear(rng, cfg.answer_hidden, 1, "frozen.answer.l2", False))
    return f


def init_frozen(student: dict[str, Tensor], cfg: StudentConfig = StudentConfig(),
                seed: int = FROZEN_SEED, answer_head: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Text encoder, answer head and a byte copy of ``student`` as the reference.

    ``answer_head`` supplies trained head weights; otherwise the head is
    randomly initialized from ``seed``.
    """
    rng = np.random.default_rng([int(seed), 0xF20])
    f: dict[str, Tensor] = {}
    f["frozen.text.emb"] = Tensor(rng.normal(0.0, 1.0, size=(len(VOCAB), cfg.d_hidden)), name="frozen.text.emb")
    head = answer_head if answer_head is not None else init_answer_head(seed, cfg)
    for name, t in head.items():
        f[name] = Tensor(t.data, name=name)
    for name, t in student.items():
        f[f"frozen.ref.{name}"] = Tensor(t.data, name=f"frozen.ref.{name}")
    return f


def reference_params(frozen: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k[len("frozen.ref."):]: v for k, v in frozen.items() if k.startswith("frozen.ref.")}


# -- forward ------------------------------------------------------------------
def pixel_code(images) -> np.ndarray:
    """(B, 64, 16 * 13) soft memberships of every patch pixel in the intensity levels."""
    p = patchify(images)
    code = np.exp(-((p[..., None] - PIXEL_LEVELS) ** 2) / (2.0 * PIXEL_WIDTH ** 2))
    return code.reshape(p.shape[0], p.shape[1], -1)


def patchify(images: np.ndarray) -> np.ndarray:
    """(B, 32, 32) -> (B, 64, 16) row-major 4x4 patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise T.ShapeError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {images.shape[1:]}")
    b = images.shape[0]
    g = IMAGE_SIZE // PATCH
    x = images.reshape(b, g, PATCH, g, PATCH).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, g * g, PATCH * PATCH)


def _dense(x: Tensor, p: dict, prefix: str) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def _attention(x: Tensor, p: dict, prefix: str, n_heads: int) -> Tensor:
    b, n, d = x.shape
    hd = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return T.permute(T.reshape(t, (b, n, n_heads, hd)), (0, 2, 1, 3))

    q = heads(_dense(x, p, f"{prefix}.q"))
    k = heads(_dense(x, p, f"{prefix}.k"))
    v = heads(_dense(x, p, f"{prefix}.v"))
    att = T.softmax((q @ T.transpose(k)) * (1.0 / np.sqrt(hd)))
    out = T.reshape(T.permute(att @ v, (0, 2, 1, 3)), (b, n, d))
    return _dense(out, p, f"{prefix}.o")


def encode_and_project(params: dict[str, Tensor], images, cfg: StudentConfig = StudentConfig()) -> Tensor:
    """Post-projector token features h, shape (B, 64, d_hidden)."""
    x = Tensor(pixel_code(images))
    x = _dense(x, params, "phi.patch") + params["phi.pos"]
    for i in range(cfg.n_blocks):
        b = f"phi.block{i}"
        y = T.layer_norm(x, params[f"{b}.ln1.g"], params[f"{b}.ln1.b"])
        x = x + _attention(y, params, f"{b}.attn", cfg.n_heads)
        y = T.layer_norm(x, params[f"{b}.ln2.g"], params[f"{b}.ln2.b"])
        x = x + _dense(T.gelu(_dense(y, params, f"{b}.ffn1")), params, f"{b}.ffn2")
    x = T.layer_norm(x, params["phi.ln_out.g"], params["phi.ln_out.b"])
    return _dense(T.gelu(_dense(x, params, "theta.l1")), params, "theta.l2")


def text_only_probe(frozen: dict[str, Tensor], question_tokens) -> np.ndarray:
    """Pooled text feature: mean of the embedding rows of every token, padding included.

    A sequence made only of padding pools to the pad row (up to summation rounding).
    """
    tokens = np.asarray(question_tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    pooled = frozen["frozen.text.emb"].data[np.atleast_2d(tokens)].mean(axis=1)
    return pooled[0] if squeeze else pooled


def option_mask(option_counts) -> np.ndarray:
    counts = np.atleast_1d(np.asarray(option_counts, dtype=np.int64))
    if np.any((counts < 2) | (counts > MAX_OPTIONS)):
        raise ValueError(f"option_count must be in 2..{MAX_OPTIONS}, got {counts}")
    return np.arange(MAX_OPTIONS)[None, :] < counts[:, None]


def answer_logits(frozen: dict[str, Tensor], h: Tensor, question_tokens, option_counts) -> tuple[Tensor, np.ndarray]:
    """Four option-letter logits plus the live-option mask.

    Option k is scored by the shared head on
    ``[token-mean(h) | mean question embedding | embedding of option k's label]``.
    """
    tokens = np.atleast_2d(np.asarray(question_tokens, dtype=np.int64))
    emb = frozen["frozen.text.emb"].data
    b = tokens.shape[0]
    d = h.shape[-1]
    question = np.repeat(emb[tokens[:, :OPTION_SLOT]].mean(axis=1)[:, None, :], MAX_OPTIONS, axis=1)
    options = emb[tokens[:, OPTION_SLOT:OPTION_SLOT + MAX_OPTIONS]]
    pooled = T.reshape(T.mean(h, axis=1), (b, 1, d))
    visual = Tensor(np.ones((b, MAX_OPTIONS, 1))) @ pooled
    z = T.concat([visual, Tensor(question), Tensor(options)], axis=-1)
    hidden = T.gelu(_dense(z, frozen, "frozen.answer.l1"))
    logits = T.reshape(_dense(hidden, frozen, "frozen.answer.l2"), (b, MAX_OPTIONS))
    return logits, option_mask(option_counts)


def predict(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Argmax over live options; np.argmax already breaks ties toward the lowest index."""
    return np.argmax(np.where(mask, logits, -np.inf), axis=-1)


def answer_probabilities(logits: Tensor, mask: np.ndarray) -> Tensor:
    return T.masked_softmax(logits, mask)
