"""Frozen camera-conditioned teacher: privileged multi-view frames -> pooled feature g.

The pretrained video world model is stood in for by oracle rendering along a
sampled egocentric trajectory followed by a frozen, seeded feature network.
Pipeline per example:

1. render F frames along the trajectory;
2. 4x4 average-pool each frame into an 8x8 latent;
3. add scheduled noise ``sigma_0 * eps``;
4. run ``denoise_steps`` refinement blocks, block i conditioned on ``sigma_i``;
5. add camera and prompt conditioning;
6. run the 5-block feature network, keep block b*'s hidden state and
   spatially mean-pool it per frame;
7. pool over frames.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .scene import IMAGE_SIZE, SceneSpec, render
from .tensor import Tensor

SIGMA_SCHEDULE = (0.9998, 0.9580, 0.8994, 0.7024)
DEFAULT_PROMPT = "A slight camera motion with stable object layout and unchanged spatial relations."
D_TEACHER = 96
N_TEACHER_BLOCKS = 5
LATENT_POOL = 4
LATENT_SIDE = IMAGE_SIZE // LATENT_POOL
N_POS_FREQ = 2
N_CAM_FREQ = 3
TEACHER_SEED = 1234
STATIC_TEACHER_SEED = 4321

_S = np.sqrt(0.5)
DIRECTIONS = {
    "forward": (0.0, 0.0, 1.0),
    "backward": (0.0, 0.0, -1.0),
    "left": (-1.0, 0.0, 0.0),
    "right": (1.0, 0.0, 0.0),
    "forward-left": (-_S, 0.0, _S),
    "forward-right": (_S, 0.0, _S),
    "backward-left": (-_S, 0.0, -_S),
    "backward-right": (_S, 0.0, -_S),
}
DIRECTION_TAGS = tuple(DIRECTIONS)
FRAME_COUNTS = (1, 5, 9, 13)
POOLING_MODES = ("mean", "first", "last")


class TeacherError(ValueError):
    pass


@dataclass(frozen=True)
class CameraTrajectory:
    translations: tuple[tuple[float, float, float], ...]
    yaws: tuple[float, ...]
    direction: str
    magnitude: float

    @property
    def frame_count(self) -> int:
        return len(self.translations)

    def encoding(self) -> np.ndarray:
        """(F, 2*(3*N_CAM_FREQ+1)) sin/cos features of translation and yaw."""
        tr = np.asarray(self.translations)
        yaw = np.asarray(self.yaws)[:, None]
        freqs = 2.0 ** np.arange(N_CAM_FREQ)
        ang = np.concatenate([(tr[:, :, None] * freqs).reshape(len(tr), -1), yaw], axis=1)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class TeacherConfig:
    block_index: int = 3
    denoise_steps: int = 2
    sigma_schedule: tuple[float, ...] = SIGMA_SCHEDULE
    frame_count: int = 9
    pooling: str = "mean"
    use_camera: bool = True
    use_prompt: bool = True
    prompt_text: str = DEFAULT_PROMPT
    seed: int = TEACHER_SEED
    magnitude_range: tuple[float, float] = (0.05, 0.15)
    noise_scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.block_index <= N_TEACHER_BLOCKS:
            raise TeacherError(f"block_index must be in 1..{N_TEACHER_BLOCKS}: {self.block_index}")
        if not 0 <= self.denoise_steps <= len(self.sigma_schedule):
            raise TeacherError(
                f"denoise_steps={self.denoise_steps} needs a longer schedule than {self.sigma_schedule}"
            )
        if any(b >= a for a, b in zip(self.sigma_schedule, self.sigma_schedule[1:])):
            raise TeacherError(f"sigma schedule must be strictly decreasing: {self.sigma_schedule}")
        if self.pooling not in POOLING_MODES:
            raise TeacherError(f"pooling must be one of {POOLING_MODES}: {self.pooling}")
        if self.frame_count < 1:
            raise TeacherError(f"frame_count must be positive: {self.frame_count}")
        lo, hi = self.magnitude_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise TeacherError(f"magnitude_range must lie in [0, 1]: {self.magnitude_range}")

    @classmethod
    def from_dict(cls, d: dict) -> TeacherConfig:
        d = dict(d)
        for key in ("sigma_schedule", "magnitude_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def cache_key(self) -> str:
        """Hash of every field that changes per-frame features (pooling excluded)."""
        d = self.to_dict()
        d.pop("pooling")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def sigmas_used(self) -> tuple[float, ...]:
        return tuple(self.sigma_schedule[: self.denoise_steps])


@dataclass
class TeacherFeature:
    g: np.ndarray
    per_frame: np.ndarray
    sigma_trace: tuple[float, ...] = ()


# -- trajectories -------------------------------------------------------------
def sample_trajectory(seed: int, frame_count: int, magnitude_range=(0.05, 0.15)) -> CameraTrajectory:
    """Uniform direction tag, uniform step length; pose 0 is the identity."""
    lo, hi = magnitude_range
    if not (0.0 <= lo <= hi <= 1.0):
        raise TeacherError(f"magnitude_range must lie in [0, 1]: {magnitude_range}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x7EA])
    tag = DIRECTION_TAGS[int(rng.integers(len(DIRECTION_TAGS)))]
    mag = float(rng.uniform(lo, hi))
    step = np.asarray(DIRECTIONS[tag]) * mag
    translations = tuple(tuple(float(c) for c in k * step) for k in range(frame_count))
    return CameraTrajectory(translations, (0.0,) * frame_count, tag, mag)


def still_trajectory(frame_count: int, direction: str = "forward") -> CameraTrajectory:
    return CameraTrajectory(((0.0, 0.0, 0.0),) * frame_count, (0.0,) * frame_count, direction, 0.0)


# -- frozen weights -----------------------------------------------------------
def _positional_grid() -> np.ndarray:
    coords = (np.arange(LATENT_SIDE) + 0.5) / LATENT_SIDE * 2.0 - 1.0
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    feats = []
    for k in range(N_POS_FREQ):
        f = np.pi * 2.0**k
        feats += [np.sin(f * rows), np.cos(f * rows), np.sin(f * cols), np.cos(f * cols)]
    return np.stack(feats, axis=-1).reshape(LATENT_SIDE * LATENT_SIDE, -1)


def prompt_vector(text: str, dim: int = D_TEACHER) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(list(digest))
    return rng.normal(0.0, 1.0, size=dim) / np.sqrt(dim) * 4.0


def init_teacher(seed: int = TEACHER_SEED, dim: int = D_TEACHER) -> dict[str, Tensor]:
    """Frozen teacher weights, a pure function of ``seed``."""
    rng = np.random.default_rng([int(seed), 0x7EAC])
    n_in = 1 + 4 * N_POS_FREQ
    n_cam = 2 * (3 * N_CAM_FREQ + 1)
    w: dict[str, np.ndarray] = {
        "refine.kernel": np.full((3, 3), 1.0 / 9.0) + rng.normal(0.0, 0.01, size=(3, 3)),
        "refine.sigma": rng.normal(0.0, 0.01, size=()),
        "embed.w": rng.normal(0.0, 1.0, size=(n_in, dim)),
        "embed.b": rng.normal(0.0, 0.1, size=dim),
        "camera.w": rng.normal(0.0, 1.0 / np.sqrt(n_cam), size=(n_cam, dim)),
    }
    hidden = 2 * dim
    for b in range(N_TEACHER_BLOCKS):
        w[f"block{b}.w1"] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, hidden))
        w[f"block{b}.b1"] = rng.normal(0.0, 0.1, size=hidden)
        w[f"block{b}.w2"] = rng.normal(0.0, 0.5 / np.sqrt(hidden), size=(hidden, dim))
    return {f"teacher.{k}": Tensor(v, name=f"teacher.{k}") for k, v in w.items()}


# -- pipeline -----------------------------------------------------------------
def render_frames(scene: SceneSpec, traj: CameraTrajectory) -> np.ndarray:
    base = scene.base_camera
    return np.stack([
        render(scene, base.moved(t, y)) for t, y in zip(traj.translations, traj.yaws)
    ])


def frame_latents(frames: np.ndarray) -> np.ndarray:
    """(F, 32, 32) -> (F, 8, 8) by non-overlapping 4x4 means."""
    f = frames.shape[0]
    return frames.reshape(f, LATENT_SIDE, LATENT_POOL, LATENT_SIDE, LATENT_POOL).mean(axis=(2, 4))


_CONV_CACHE: dict[bytes, np.ndarray] = {}


def conv3_matrix(kernel: np.ndarray, n: int = LATENT_SIDE) -> np.ndarray:
    """Dense (n*n, n*n) operator of a zero-padded 3x3 convolution on an n x n grid."""
    key = kernel.tobytes() + bytes([n])
    if key not in _CONV_CACHE:
        conv = np.zeros((n * n, n * n))
        for r in range(n):
            for c in range(n):
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < n and 0 <= cc < n:
                            conv[r * n + c, rr * n + cc] = kernel[dr + 1, dc + 1]
        _CONV_CACHE[key] = conv
    return _CONV_CACHE[key]


def _smooth3(z: Tensor, kernel: np.ndarray) -> Tensor:
    f, n = z.shape[0], LATENT_SIDE
    return T.reshape(T.reshape(z, (f, n * n)) @ Tensor(conv3_matrix(kernel).T), (f, n, n))


def refine_step(z: Tensor, weights: dict[str, Tensor], sigma: float, sigma_next: float) -> Tensor:
    """One Euler step of a frozen residual refiner from ``sigma`` down to ``sigma_next``.

    The clean-latent estimate is a smoothing of z plus a sigma-channel term;
    z moves toward it by the fraction ``1 - sigma_next / sigma``.
    """
    kernel = weights["teacher.refine.kernel"].data
    sigma_channel = Tensor(np.full(z.shape, sigma))
    denoised = _smooth3(z, kernel) + sigma_channel * weights["teacher.refine.sigma"]
    return z + (denoised - z) * (1.0 - sigma_next / sigma)


def feature_network(tokens: Tensor, weights: dict[str, Tensor], block_index: int) -> Tensor:
    """Residual MLP stack over (F, 64, D) tokens; returns block ``block_index``'s output."""
    x = tokens
    for b in range(block_index):
        hidden = T.gelu(x @ weights[f"teacher.block{b}.w1"] + weights[f"teacher.block{b}.b1"])
        x = x + hidden @ weights[f"teacher.block{b}.w2"]
    return x


def pool_frames(per_frame, mode: str) -> np.ndarray:
    per_frame = np.asarray(per_frame, dtype=np.float64)
    if per_frame.ndim != 2 or per_frame.shape[0] == 0:
        raise TeacherError(f"pool_frames: need a non-empty (F, D) matrix, got {per_frame.shape}")
    if mode == "mean":
        return per_frame.mean(axis=0)
    if mode == "first":
        return per_frame[0].copy()
    if mode == "last":
        return per_frame[-1].copy()
    raise TeacherError(f"pool_frames: unknown mode {mode!r}")


def teacher_features(cfg: TeacherConfig, scene: SceneSpec, traj: CameraTrajectory,
                     noise_seed: int, weights: dict[str, Tensor] | None = None) -> TeacherFeature:
    if traj.frame_count != cfg.frame_count:
        raise TeacherError(f"trajectory has {traj.frame_count} frames, config wants {cfg.frame_count}")
    weights = weights or teacher_weights(cfg.seed)
    latents = frame_latents(render_frames(scene, traj))
    f = latents.shape[0]

    sigmas = cfg.sigma_schedule
    rng = np.random.default_rng([int(noise_seed) & 0xFFFFFFFFFFFFFFFF, 0x401])
    eps = rng.standard_normal(latents.shape)
    z = Tensor(latents) + Tensor(eps) * (sigmas[0] * cfg.noise_scale)
    trace = []
    for k in range(cfg.denoise_steps):
        nxt = sigmas[k + 1] if k + 1 < len(sigmas) else 0.0
        z = refine_step(z, weights, sigmas[k], nxt)
        trace.append(sigmas[k])

    n = LATENT_SIDE * LATENT_SIDE
    pos = np.broadcast_to(_positional_grid(), (f, n, 4 * N_POS_FREQ))
    inputs = T.concat([T.reshape(z, (f, n, 1)), Tensor(pos)], axis=-1)
    tokens = inputs @ weights["teacher.embed.w"] + weights["teacher.embed.b"]
    if cfg.use_camera:
        cam = Tensor(traj.encoding()) @ weights["teacher.camera.w"]
        tokens = tokens + Tensor(np.ones((f, n, 1))) @ T.reshape(cam, (f, 1, D_TEACHER))
    if cfg.use_prompt:
        tokens = tokens + Tensor(prompt_vector(cfg.prompt_text))

    try:
        hidden = feature_network(tokens, weights, cfg.block_index)
    except T.NonFiniteError as exc:
        raise TeacherError(f"non-finite teacher feature at block {cfg.block_index}") from exc
    per_frame = T.mean(hidden, axis=1).data
    g = pool_frames(per_frame, cfg.pooling)
    if not np.all(np.isfinite(g)):
        raise TeacherError(f"non-finite teacher feature at block {cfg.block_index}")
    return TeacherFeature(g, np.array(per_frame), tuple(trace))


def static_features(scene: SceneSpec, weights: dict[str, Tensor] | None = None,
                    block_index: int = 3) -> TeacherFeature:
    """Static-distillation analog: a separate frozen network on the clean input frame only."""
    weights = weights or teacher_weights(STATIC_TEACHER_SEED)
    cfg = TeacherConfig(block_index=block_index, denoise_steps=0, frame_count=1,
                        use_camera=False, use_prompt=False, noise_scale=0.0,
                        seed=STATIC_TEACHER_SEED)
    return teacher_features(cfg, scene, still_trajectory(1), 0, weights)


_WEIGHT_CACHE: dict[int, dict[str, Tensor]] = {}


def teacher_weights(seed: int) -> dict[str, Tensor]:
    if seed not in _WEIGHT_CACHE:
        _WEIGHT_CACHE[seed] = init_teacher(seed)
    return _WEIGHT_CACHE[seed]


def example_seeds(example_seed: int) -> tuple[int, int]:
    """Trajectory and noise seeds derived from an example's seed."""
    rng = np.random.default_rng([int(example_seed) & 0xFFFFFFFFFFFFFFFF, 0x5EED])
    a, b = rng.integers(0, 2**62, size=2)
    return int(a), int(b)
