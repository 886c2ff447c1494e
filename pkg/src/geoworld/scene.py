"""Seeded synthetic scenes with oracle geometry, disk rendering and spatial QA."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

IMAGE_SIZE = 32
FOCAL = float(IMAGE_SIZE)
NEAR_PLANE = 0.1
TAU_PX = 2.0
TAU_Z = 0.25
QUESTION_LEN = 16
OPTION_SLOT = 12  # option k sits at token position OPTION_SLOT + k
MAX_OPTIONS = 4

CLASS_LABELS = (
    "cube", "sphere", "cone", "torus", "cylinder", "pyramid",
    "ring", "star", "box", "ball", "disk", "block",
)
CLASS_INTENSITY = {
    label: round(0.2 + i * 0.75 / (len(CLASS_LABELS) - 1), 6)
    for i, label in enumerate(CLASS_LABELS)
}
RELATIONS = ("left", "right", "above", "under", "close", "far", "behind", "front")
VIEWER = "you"

TEMPLATES = {
    "left": "which object is left of the {ref}",
    "right": "which object is right of the {ref}",
    "above": "which object is above the {ref}",
    "under": "which object is under the {ref}",
    "behind": "which object is behind the {ref}",
    "front": "which object is in front of the {ref}",
    "close": "which object is the nearest to you",
    "far": "which object is the farthest from you",
}

_WORDS = (
    "<pad>", "<unk>", "which", "object", "is", "left", "right", "of", "the",
    "above", "under", "behind", "in", "front", "nearest", "to", "you",
    "farthest", "from", "?",
) + CLASS_LABELS
VOCAB = _WORDS + tuple(f"<r{i}>" for i in range(64 - len(_WORDS)))
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 0


class SceneError(ValueError):
    pass


# -- scene types --------------------------------------------------------------
@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0

    def moved(self, translation, yaw_delta: float = 0.0) -> Camera:
        """Apply a translation expressed in this camera's own frame."""
        dx, dy, dz = translation
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        world = (c * dx + s * dz, dy, -s * dx + c * dz)
        pos = tuple(float(p + w) for p, w in zip(self.position, world))
        return Camera(pos, float(self.yaw + yaw_delta))


@dataclass(frozen=True)
class SceneObject:
    id: int
    label: str
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    base_camera: Camera
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        objs = tuple(
            SceneObject(o["id"], o["label"], tuple(o["center"]), o["radius"]) for o in d["objects"]
        )
        cam = Camera(tuple(d["base_camera"]["position"]), d["base_camera"]["yaw"])
        return cls(objs, cam, int(d["seed"]))

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()


@dataclass(frozen=True)
class SceneConfig:
    min_objects: int = 2
    max_objects: int = 5
    world_box: tuple = ((-2.5, 2.5), (-2.0, 2.0), (3.0, 9.0))
    radius_range: tuple = (0.3, 0.7)
    frame_margin_px: float = 3.0
    max_attempts: int = 1000

    def __post_init__(self):
        if not (2 <= self.min_objects <= self.max_objects <= 5):
            raise SceneError(f"object count range must satisfy 2<=min<=max<=5: {self}")
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise SceneError(f"bad radius range: {self}")
        for a, b in self.world_box:
            if a > b:
                raise SceneError(f"bad world box: {self}")
        if self.world_box[2][0] <= NEAR_PLANE:
            raise SceneError(f"world box must lie in front of the near plane: {self}")

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        d = dict(d)
        if "world_box" in d:
            d["world_box"] = tuple(tuple(r) for r in d["world_box"])
        if "radius_range" in d:
            d["radius_range"] = tuple(d["radius_range"])
        return cls(**d)


@dataclass
class QAExample:
    image: np.ndarray
    question_tokens: list[int]
    options: list[str]
    answer_index: int
    relation: str
    scene: SceneSpec | None = None
    example_id: str = ""
    seed: int = 0
    reference: str | None = None

    @property
    def option_count(self) -> int:
        return len(self.options)

    def to_json(self) -> str:
        img = np.ascontiguousarray(self.image, dtype="<f8")
        return json.dumps({
            "example_id": self.example_id,
            "seed": self.seed,
            "image": base64.b64encode(img.tobytes()).decode("ascii"),
            "image_shape": list(img.shape),
            "question_tokens": list(self.question_tokens),
            "options": list(self.options),
            "answer_index": self.answer_index,
            "relation": self.relation,
            "reference": self.reference,
            "scene": None if self.scene is None else self.scene.to_dict(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> QAExample:
        d = json.loads(line)
        raw = base64.b64decode(d["image"])
        image = np.frombuffer(raw, dtype="<f8").reshape(d["image_shape"]).astype(np.float64)
        scene = None if d.get("scene") is None else SceneSpec.from_dict(d["scene"])
        return cls(image, d["question_tokens"], d["options"], d["answer_index"], d["relation"],
                   scene, d.get("example_id", ""), d.get("seed", 0), d.get("reference"))


# -- geometry -----------------------------------------------------------------
def to_camera_frame(points: np.ndarray, camera: Camera) -> np.ndarray:
    """World points (N,3) expressed in the camera frame (x right, y down, z forward)."""
    d = np.asarray(points, dtype=np.float64) - np.asarray(camera.position)
    c, s = np.cos(camera.yaw), np.sin(camera.yaw)
    x = c * d[:, 0] - s * d[:, 2]
    z = s * d[:, 0] + c * d[:, 2]
    return np.stack([x, d[:, 1], z], axis=1)


def project_points(points: np.ndarray, camera: Camera, clip: bool = False) -> np.ndarray:
    """Pinhole projection of world points to rows of (u, v, depth).

    With ``clip`` set, points at or behind the near plane come back as NaN
    rows instead of raising.
    """
    cam = to_camera_frame(np.atleast_2d(points), camera)
    depth = cam[:, 2]
    behind = depth <= NEAR_PLANE
    if behind.any() and not clip:
        raise SceneError(f"point behind camera (depth {depth[behind].min():.3f})")
    safe = np.where(behind, 1.0, depth)
    u = FOCAL * cam[:, 0] / safe + IMAGE_SIZE / 2
    v = FOCAL * cam[:, 1] / safe + IMAGE_SIZE / 2
    out = np.stack([u, v, depth], axis=1)
    out[behind] = np.nan
    return out


def project(scene: SceneSpec, camera: Camera | None = None) -> dict[int, tuple[float, float, float]]:
    """Per-object (u, v, depth) under ``camera`` (the base camera by default)."""
    camera = scene.base_camera if camera is None else camera
    if not scene.objects:
        return {}
    pts = np.array([o.center for o in scene.objects])
    uvz = project_points(pts, camera)
    return {o.id: tuple(float(x) for x in row) for o, row in zip(scene.objects, uvz)}


def render(scene: SceneSpec, camera: Camera | None = None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw every object as a filled disk, nearest last; background is 0."""
    camera = scene.base_camera if camera is None else camera
    image = np.zeros((size, size))
    if not scene.objects:
        return image
    pts = np.array([o.center for o in scene.objects])
    uvz = project_points(pts, camera, clip=True)
    centers = np.arange(size) + 0.5
    order = sorted(
        (i for i in range(len(scene.objects)) if np.isfinite(uvz[i, 2])),
        key=lambda i: -uvz[i, 2],
    )
    for i in order:
        u, v, z = uvz[i]
        r = scene.objects[i].radius * FOCAL / z
        inside = (centers[None, :] - u) ** 2 + (centers[:, None] - v) ** 2 <= r * r
        image[inside] = CLASS_INTENSITY[scene.objects[i].label]
    return image


# -- sampling -----------------------------------------------------------------
def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])


def sample_scene(seed: int, config: SceneConfig | None = None) -> SceneSpec:
    """Rejection-sample a non-interpenetrating scene fully inside the base view."""
    config = config or SceneConfig()
    rng = _rng(seed, 0x5CE4E)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    labels = rng.choice(len(CLASS_LABELS), size=count, replace=False)
    camera = Camera()
    (x0, x1), (y0, y1), (z0, z1) = config.world_box
    margin = config.frame_margin_px
    attempts = 0
    placed: list[SceneObject] = []
    while len(placed) < count:
        attempts += 1
        if attempts > config.max_attempts:
            raise SceneError(f"could not place {count} objects in {config.max_attempts} attempts: {config}")
        center = (rng.uniform(x0, x1), rng.uniform(y0, y1), rng.uniform(z0, z1))
        radius = float(rng.uniform(*config.radius_range))
        u, v, _ = project_points(np.array([center]), camera)[0]
        if not (margin <= u <= IMAGE_SIZE - margin and margin <= v <= IMAGE_SIZE - margin):
            continue
        if any(
            np.linalg.norm(np.subtract(center, o.center)) <= radius + o.radius for o in placed
        ):
            continue
        label = CLASS_LABELS[int(labels[len(placed)])]
        placed.append(SceneObject(len(placed), label, tuple(float(c) for c in center), radius))
    return SceneSpec(tuple(placed), camera, int(seed))


# -- relations ----------------------------------------------------------------
def label_relations(scene: SceneSpec) -> set[tuple[str, str, str]]:
    """(subject, relation, object) triples from the base view with tie margins."""
    proj = project(scene)
    objs = scene.objects
    triples: set[tuple[str, str, str]] = set()
    for a in objs:
        ua, va, za = proj[a.id]
        for b in objs:
            if a.id == b.id:
                continue
            ub, vb, zb = proj[b.id]
            if ua < ub - TAU_PX:
                triples.add((a.label, "left", b.label))
            if ua > ub + TAU_PX:
                triples.add((a.label, "right", b.label))
            if va < vb - TAU_PX:
                triples.add((a.label, "above", b.label))
            if va > vb + TAU_PX:
                triples.add((a.label, "under", b.label))
            if za > zb + TAU_Z:
                triples.add((a.label, "behind", b.label))
            if za < zb - TAU_Z:
                triples.add((a.label, "front", b.label))
    if len(objs) >= 2:
        depths = sorted((proj[o.id][2], o.label) for o in objs)
        if depths[1][0] - depths[0][0] > TAU_Z:
            triples.add((depths[0][1], "close", VIEWER))
        if depths[-1][0] - depths[-2][0] > TAU_Z:
            triples.add((depths[-1][1], "far", VIEWER))
    return triples


def _fails_raw(relation: str, cand: tuple, ref: tuple | None, answer: tuple) -> bool:
    """True when ``cand`` clearly does not satisfy ``relation`` (no margin)."""
    u, v, z = cand
    if relation == "close":
        return z > answer[2]
    if relation == "far":
        return z < answer[2]
    ru, rv, rz = ref
    return {
        "left": u >= ru, "right": u <= ru, "above": v >= rv,
        "under": v <= rv, "behind": z <= rz, "front": z >= rz,
    }[relation]


def tokenize(relation: str, ref: str | None, options: Iterable[str]) -> list[int]:
    words = TEMPLATES[relation].format(ref=ref).split() + ["?"]
    ids = [TOKEN_ID.get(w, TOKEN_ID["<unk>"]) for w in words]
    ids = ids[:OPTION_SLOT] + [PAD_ID] * (OPTION_SLOT - len(ids))
    opts = [TOKEN_ID[o] for o in options]
    return ids + opts + [PAD_ID] * (QUESTION_LEN - len(ids) - len(opts))


def make_qa(scene: SceneSpec, relations: set, seed: int, example_id: str = "") -> QAExample:
    """Turn one labelled relation into a shuffled multiple-choice question.

    A relation tag is drawn uniformly among those present, then a triple
    within it; triples without a valid distractor are discarded and redrawn.
    """
    if not relations:
        raise SceneError("make_qa: scene has no labelled relations")
    rng = _rng(seed, 0x9A)
    proj = project(scene)
    by_label = {o.label: proj[o.id] for o in scene.objects}
    pool: dict[str, list] = {}
    for t in sorted(relations):
        pool.setdefault(t[1], []).append(t)
    while pool:
        tags = sorted(pool)
        tag = tags[int(rng.integers(len(tags)))]
        triple = pool[tag].pop(int(rng.integers(len(pool[tag]))))
        if not pool[tag]:
            del pool[tag]
        subject, rel, obj = triple
        ref = None if obj == VIEWER else obj
        answer_pos = by_label[subject]
        distractors = [
            lab for lab in sorted(by_label)
            if lab not in (subject, ref)
            and _fails_raw(rel, by_label[lab], by_label.get(ref), answer_pos)
        ]
        if not distractors:
            continue
        rng.shuffle(distractors)
        options = [subject] + distractors[: MAX_OPTIONS - 1]
        order = rng.permutation(len(options))
        options = [options[i] for i in order]
        answer = options.index(subject)
        return QAExample(
            image=render(scene),
            question_tokens=tokenize(rel, ref, options),
            options=options,
            answer_index=answer,
            relation=rel,
            scene=scene,
            example_id=example_id,
            seed=int(seed),
            reference=ref,
        )
    raise SceneError(f"make_qa: no triple with a valid distractor in scene seed {scene.seed}")


def generate_example(seed: int, config: SceneConfig | None = None, example_id: str = "") -> QAExample:
    """Scene + relations + QA for one seed.

    The relation tag is drawn uniformly from all 8 first; scenes are then
    resampled until one yields a question with that tag. Drawing the tag per
    scene instead would over-represent close/far, the only relations a
    2-object scene can ask about. Configs capped at 2 objects only draw
    close/far, since binary relations then have no distractor.
    """
    config = config or SceneConfig()
    tags = RELATIONS if config.max_objects >= 3 else ("close", "far")
    tag = tags[int(_rng(seed, 0x7A6).integers(len(tags)))]
    for bump in range(1000):
        scene = sample_scene(seed + bump * 0x1000_0000_0000, config) if bump else sample_scene(seed, config)
        rels = {t for t in label_relations(scene) if t[1] == tag}
        if not rels:
            continue
        try:
            return make_qa(scene, rels, seed, example_id)
        except SceneError:
            continue
    raise SceneError(f"generate_example: no valid {tag!r} question for seed {seed}")


def generate_corpus(start_seed: int, count: int, config: SceneConfig | None = None,
                    split: str = "train") -> list[QAExample]:
    return [
        generate_example(start_seed + i, config, example_id=f"{split}-{start_seed + i}")
        for i in range(count)
    ]


def image_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype="<f8").tobytes()).hexdigest()


# -- corpus files -------------------------------------------------------------
def write_corpus(path: str | Path, examples: Iterable[QAExample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_corpus(path: str | Path) -> list[QAExample]:
    return list(iter_corpus(path))


def iter_corpus(path: str | Path) -> Iterator[QAExample]:
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                yield QAExample.from_json(line)
