"""Acceptance gate: one test per criterion, summarised at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v``. The trend and ablation
criteria train real models and take tens of minutes on one core.
"""
from __future__ import annotations

import collections
import json
import time

import numpy as np
import pytest

from geoworld import ablation as A
from geoworld import checkpoint
from geoworld import objective as O
from geoworld import reports as R
from geoworld import scene as SC
from geoworld import student as S
from geoworld import teacher as TE
from geoworld import tensor as T
from geoworld import train as TR
from geoworld.cli import EVAL_START_SEED, main
from geoworld.config import RunConfig
from geoworld.data import Dataset, TeacherCache
from geoworld.pretrain import original_vlm
from geoworld.scene import Camera, generate_corpus, sample_scene, write_corpus
from geoworld.tensor import Tensor

from test_objective import composed_setup, composed_total, rand_h, tied_heads
from test_scene import oracle_answer, oracle_project
from test_tensor import PRIMITIVES


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def small(root, full_vlm_cache):
    """Small corpora plus a config that uses the full default pretraining."""
    write_corpus(root / "train.jsonl", generate_corpus(0, 256, split="train"))
    write_corpus(root / "eval.jsonl", generate_corpus(EVAL_START_SEED, 256, split="eval"))
    cfg = RunConfig(train_path=str(root / "train.jsonl"), eval_path=str(root / "eval.jsonl"),
                    teacher_cache=str(root / "tc"), vlm_cache=str(full_vlm_cache))
    train = Dataset.load(cfg.train_path)
    held = Dataset.load(cfg.eval_path)
    return cfg, train, held, TeacherCache(cfg.teacher_cache)


def serialize(params, path) -> dict[str, bytes]:
    checkpoint.save(path, params)
    return {p.name: p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.mark.criterion(1, "gradient correctness (composed 1e-3, primitives 1e-4, < 2 min)")
def test_c1_gradients(record_property):
    t0 = time.perf_counter()
    worst_prim = 0.0
    for name, make in sorted(PRIMITIVES.items()):
        rng = np.random.default_rng([7, len(name)])
        for _ in range(20):
            shape = tuple(int(s) for s in rng.integers(2, 9, size=int(rng.integers(2, 4))))
            f, x = make(rng, shape)
            coords = rng.choice(x.size, size=min(8, x.size), replace=False)
            worst_prim = max(worst_prim, T.grad_check(f, x, eps=1e-5, coords=coords))
    worst = 0.0
    for seed in range(3):
        params, frozen, heads, batch, g = composed_setup(seed)
        trainable = {**params, **heads}
        names = sorted(trainable)
        rng = np.random.default_rng(100 + seed)
        for _ in range(20):
            name = names[rng.integers(len(names))]
            idx = int(rng.integers(trainable[name].data.size))

            def f(x, name=name):
                p = {**params, name: x} if name in params else params
                hd = {**heads, name: x} if name in heads else heads
                return composed_total(p, frozen, hd, batch, g)
            worst = max(worst, T.grad_check(f, trainable[name].data, coords=[idx]))
    elapsed = time.perf_counter() - t0
    record_property("composed", f"{worst:.2e}")
    record_property("primitives", f"{worst_prim:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst < 1e-3 and worst_prim < 1e-4 and elapsed < 120


@pytest.mark.criterion(2, "frozen discipline after a full training run")
def test_c2_frozen(small, tmp_path):
    cfg, train, held, cache = small
    cache.ensure(train, cfg.teacher)
    vision, answer = original_vlm(cfg.pretrain, cfg.vlm_cache)
    frozen0 = S.init_frozen(vision, answer_head=answer)
    before = serialize(frozen0, tmp_path / "frozen0")
    teacher0 = serialize(TE.init_teacher(cfg.teacher.seed), tmp_path / "teacher0")
    queries = np.random.default_rng(0).integers(0, len(SC.VOCAB), (100, SC.QUESTION_LEN))
    probe0 = S.text_only_probe(frozen0, queries).tobytes()
    result = TR.train(cfg.with_overrides(["seeds=[42]"]), 42, train, held, cache)
    assert serialize(result.frozen, tmp_path / "frozen1") == before
    assert serialize(TE.teacher_weights(cfg.teacher.seed), tmp_path / "teacher1") == teacher0
    assert S.text_only_probe(result.frozen, queries).tobytes() == probe0
    assert checkpoint.params_digest(result.params) != checkpoint.params_digest(vision)


@pytest.mark.criterion(3, "loss formula contracts")
def test_c3_losses():
    rng = np.random.default_rng(3)
    for _ in range(200):
        h = Tensor(rng.normal(size=(4, 16, S.D_HIDDEN)))
        g = rng.normal(size=(4, TE.D_TEACHER))
        v = O.align_loss(O.init_heads(int(rng.integers(1000))), h, g).item()
        assert 0.0 <= v <= 2.0
    h = rand_h(1)
    g = np.concatenate([h.mean(axis=1), np.zeros((3, TE.D_TEACHER - S.D_HIDDEN))], axis=1)
    assert abs(O.align_loss(tied_heads(), Tensor(h), g).item()) < 1e-12
    assert abs(O.align_loss(tied_heads(-1.0), Tensor(h), g).item() - 2.0) < 1e-12
    for _ in range(200):
        h = rng.normal(size=(2, 16, S.D_HIDDEN))
        ref = rng.normal(size=h.shape)
        a = O.preserve_loss(Tensor(h), ref).item()
        b = O.preserve_loss(Tensor(2 * h), ref).item()
        assert abs(a - b) <= 1e-12
    parts = {k: Tensor(v) for k, v in {"task": 1.3, "align": 0.7, "preserve": 0.4}.items()}
    total, _ = O.total_loss(parts, O.LossWeights())
    assert O.LossWeights() == O.LossWeights(0.10, 0.05)
    assert total.item() == 1.3 + 0.10 * 0.7 + 0.05 * 0.4


@pytest.mark.criterion(4, "lambda=0 updates bit-identical to ft_only")
def test_c4_zero_weights(small):
    cfg, train, held, cache = small
    cache.ensure(train, cfg.teacher)
    trace = collections.defaultdict(list)

    def recorder(tag):
        return lambda step, trainable: trace[tag].append({k: v.data.tobytes() for k, v in trainable.items()})

    ft = cfg.with_overrides(["method=ft_only"])
    zero = cfg.with_overrides(["loss.lambda_align=0", "loss.lambda_preserve=0"])
    a = TR.train(ft, 42, train, held, cache, on_step=recorder("ft"))
    b = TR.train(zero, 42, train, held, cache, on_step=recorder("zero"))
    assert len(trace["ft"]) == len(trace["zero"]) == cfg.epochs * len(train) // cfg.batch_size
    assert all(x == y for x, y in zip(trace["ft"], trace["zero"]))
    assert a.eval == b.eval


@pytest.mark.criterion(5, "oracle soundness (10k answers, projection 1e-9)")
def test_c5_oracles():
    for ex in SC.generate_corpus(0, 10_000):
        assert ex.answer_index == oracle_answer(ex), ex.example_id
    worst = 0.0
    for seed in range(1000):
        spec = SC.sample_scene(seed)
        for cam in (spec.base_camera, Camera((0.3, -0.2, 0.5), 0.17)):
            got = SC.project(spec, cam)
            for o in spec.objects:
                worst = max(worst, *(abs(a - b) for a, b in zip(got[o.id], oracle_project(o.center, cam))))
    assert worst < 1e-9


@pytest.mark.criterion(6, "teacher properties")
def test_c6_teacher(record_property):
    counts = collections.Counter(TE.sample_trajectory(s, 9).direction for s in range(8000))
    assert set(counts) == set(TE.DIRECTION_TAGS)
    assert all(900 <= c <= 1100 for c in counts.values()), counts

    still = TE.teacher_features(TE.TeacherConfig(denoise_steps=0, noise_scale=0.0), sample_scene(3),
                                TE.still_trajectory(9), 0)
    m, f, l = (TE.pool_frames(still.per_frame, p) for p in TE.POOLING_MODES)
    np.testing.assert_allclose(m, f, rtol=0, atol=1e-12)
    assert f.tobytes() == l.tobytes()

    assert TE.SIGMA_SCHEDULE == (0.9998, 0.9580, 0.8994, 0.7024)
    for k in range(5):
        feat = TE.teacher_features(TE.TeacherConfig(denoise_steps=k), sample_scene(0),
                                   TE.sample_trajectory(0, 9), 0)
        assert feat.sigma_trace == TE.SIGMA_SCHEDULE[:k]

    cfg = TE.TeacherConfig()
    hits = 0
    for s in range(1000):
        scene = sample_scene(s)
        a = TE.sample_trajectory(2 * s, 9)
        j = 2 * s + 1
        while (b := TE.sample_trajectory(j, 9)).direction == a.direction:
            j += 10_000
        ga = TE.teacher_features(cfg, scene, a, s).g
        gb = TE.teacher_features(cfg, scene, b, s).g
        hits += ga @ gb / (np.linalg.norm(ga) * np.linalg.norm(gb)) < 1 - 1e-6
    record_property("camera_sensitive", f"{hits}/1000")
    assert hits >= 990


@pytest.fixture(scope="module")
def trend(root):
    """Three-method comparison through the CLI, timed end to end from an empty directory."""
    d = root / "trend"
    d.mkdir()
    t0 = time.perf_counter()
    assert main(["gen-data", "--seed", "0", "--count", "8000", "--out", str(d / "train.jsonl"),
                 "--teacher-cache", str(d / "tc")]) == 0
    assert main(["gen-data", "--seed", str(EVAL_START_SEED), "--count", "2000", "--split", "eval",
                 "--out", str(d / "eval.jsonl")]) == 0
    (d / "cfg.json").write_text(json.dumps({"data": {
        "train": str(d / "train.jsonl"), "eval": str(d / "eval.jsonl"),
        "teacher_cache": str(d / "tc"), "vlm_cache": str(d / "vlm")}}))
    grid = {"checks": False, "axes": {"method": [{"setting": m, "overrides": {"method": m}}
                                                 for m in ("base", "ft_only", "ours")]}}
    (d / "grid.json").write_text(json.dumps(grid))
    assert main(["ablate", "--config", str(d / "cfg.json"), "--grid", str(d / "grid.json"),
                 "--out", str(d / "runs")]) == 0
    return d / "runs", time.perf_counter() - t0


@pytest.mark.criterion(7, "desk-scale trend: ours > ft_only >= base over 5 seeds, < 60 min")
def test_c7_trend(trend, record_property):
    runs, elapsed = trend
    per_seed = {}
    for cell in R.load_index(runs)["cells"]:
        per_seed[cell["setting"]] = {
            int(s): json.loads((runs / p).read_text().splitlines()[-1])["overall"] for s, p in cell["runs"].items()}
    assert all(len(v) == 5 for v in per_seed.values())
    n_eval = json.loads((runs / next(iter(R.load_index(runs)["cells"]))["runs"]["42"])
                        .read_text().splitlines()[-1])["total"]
    mean = {m: float(np.mean(list(v.values()))) for m, v in per_seed.items()}
    gap = {s: per_seed["ours"][s] - per_seed["ft_only"][s] for s in per_seed["ours"]}
    record_property("mean", {m: round(v, 4) for m, v in mean.items()})
    record_property("gap_ours_minus_ft", round(mean["ours"] - mean["ft_only"], 4))
    record_property("per_seed_gap", {s: round(v, 4) for s, v in gap.items()})
    record_property("minutes", round(elapsed / 60, 1))
    (runs / "trend.json").write_text(json.dumps(
        {"per_seed": per_seed, "mean": mean, "gap": gap, "seconds": elapsed}, indent=1, sort_keys=True) + "\n")
    assert n_eval >= 2000
    assert mean["ours"] > mean["ft_only"], mean
    assert mean["ft_only"] >= mean["base"], mean
    assert elapsed < 3600


@pytest.fixture(scope="module")
def grid(small, root):
    cfg, train, _, _ = small
    original_vlm(cfg.pretrain, cfg.vlm_cache)
    out = root / "grid"
    index = A.run_ablation(A.GridSpec(cfg), out)
    R.emit_report(out)
    return out, index


@pytest.mark.criterion(8, "ablation harness integrity (default grid, exact checks)")
def test_c8_ablation(grid, record_property):
    out, index = grid
    assert json.loads((out / "failures.json").read_text()) == {}
    assert all(p is not None for c in index["cells"] for p in c["runs"].values())
    axes = {c["axis"] for c in index["cells"]}
    assert axes == set(A.DEFAULT_AXES) | set(A.CHECK_AXES)
    md = (out / "report/tables.md").read_text()
    for axis in axes:
        assert f"## {axis}" in md
    checks = json.loads((out / "checks.json").read_text())
    record_property("checks", checks)
    record_property("cells", len(index["cells"]))
    assert checks == {"check_single_frame_pooling": True, "check_zero_weights": True}


@pytest.mark.criterion(9, "determinism (metrics hashes, report regeneration)")
def test_c9_determinism(small, grid, tmp_path):
    cfg, train, held, cache = small
    for method in ("ft_only", "ours"):
        c = cfg.with_overrides([f"method={method}", "epochs=1"])
        TR.train(c, 43, train, held, cache, out_dir=tmp_path / method / "a")
        TR.train(c, 43, train, held, cache, out_dir=tmp_path / method / "b")
        assert TR.file_digest(tmp_path / method / "a/metrics.jsonl") == \
            TR.file_digest(tmp_path / method / "b/metrics.jsonl")
    out, _ = grid
    stored = {p.name: p.read_bytes() for p in (out / "report").iterdir()}
    assert main(["report", str(out), "--out", str(tmp_path / "regen")]) == 0
    assert {p.name: p.read_bytes() for p in (tmp_path / "regen").iterdir()} == stored
