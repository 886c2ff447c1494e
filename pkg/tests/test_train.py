from __future__ import annotations

import numpy as np
import pytest

from geoworld import checkpoint
from geoworld import student as S
from geoworld import teacher as TE
from geoworld import train as TR
from geoworld.data import CacheError, Dataset, TeacherCache
from geoworld.objective import LossWeights
from geoworld.pretrain import PretrainConfig, layout_code, original_vlm
from geoworld.scene import RELATIONS, SceneConfig, generate_corpus
from geoworld.tensor import Tensor


def snapshot(params):
    return {k: v.data.tobytes() for k, v in params.items()}


def test_base_is_identity(make_cfg, small_data):
    train, held, cache = small_data
    cfg = make_cfg("base")
    vision, _ = original_vlm(cfg.pretrain, cfg.vlm_cache)
    result = TR.train(cfg, 42, train, held, cache)
    assert checkpoint.params_digest(result.params) == checkpoint.params_digest(vision)
    assert [r["kind"] for r in result.records] == ["header", "eval"]


def test_same_seed_same_metrics(make_cfg, small_data, tmp_path):
    train, held, cache = small_data
    cfg = make_cfg("ours")
    cache.ensure(train, cfg.teacher)
    TR.train(cfg, 42, train, held, cache, out_dir=tmp_path / "a")
    TR.train(cfg, 42, train, held, cache, out_dir=tmp_path / "b")
    assert TR.file_digest(tmp_path / "a/metrics.jsonl") == TR.file_digest(tmp_path / "b/metrics.jsonl")
    a = checkpoint.load(tmp_path / "a/checkpoint")
    b = checkpoint.load(tmp_path / "b/checkpoint")
    assert checkpoint.params_digest(a) == checkpoint.params_digest(b)
    TR.train(cfg, 43, train, held, cache, out_dir=tmp_path / "c")
    assert TR.file_digest(tmp_path / "a/metrics.jsonl") != TR.file_digest(tmp_path / "c/metrics.jsonl")


def test_header_echoes_config(make_cfg, small_data):
    train, held, cache = small_data
    cfg = make_cfg("ft_only", learning_rate=5e-4)
    result = TR.train(cfg, 42, train, held, cache)
    header = result.records[0]
    assert header["config"] == cfg.to_dict() and header["seed"] == 42
    steps = [r for r in result.records if r["kind"] == "step"]
    assert len(steps) == 4 and steps[0]["loss"]["align"] == 0.0
    assert set(steps[0]) == {"kind", "step", "epoch", "loss", "grad_norm"}


def test_one_batch_overfit(make_cfg, full_vlm_cache):
    ds = Dataset.from_examples(generate_corpus(500, 8))
    cfg = make_cfg("ft_only", epochs=50, pretrain=PretrainConfig(), vlm_cache=str(full_vlm_cache))
    result = TR.train(cfg, 42, ds)
    steps = [r for r in result.records if r["kind"] == "step"]
    assert len(steps) == 50
    assert steps[-1]["loss"]["task"] < 0.05, steps[-1]


def test_zero_weights_match_ft_only_stepwise(make_cfg, small_data):
    train, held, cache = small_data
    ours0 = make_cfg("ours", loss=LossWeights(0.0, 0.0))
    cache.ensure(train, ours0.teacher)
    trace = {}

    def recorder(tag):
        def hook(step, trainable):
            trace.setdefault(tag, []).append(snapshot(trainable))
        return hook

    a = TR.train(make_cfg("ft_only"), 42, train, held, cache, on_step=recorder("ft"))
    b = TR.train(ours0, 42, train, held, cache, on_step=recorder("zero"))
    assert len(trace["ft"]) == len(trace["zero"]) == 4
    for sa, sb in zip(trace["ft"], trace["zero"]):
        assert sa == sb
    assert a.eval == b.eval


def test_frozen_discipline(make_cfg, small_data):
    train, held, cache = small_data
    cfg = make_cfg("ours")
    cache.ensure(train, cfg.teacher)
    vision, answer = original_vlm(cfg.pretrain, cfg.vlm_cache)
    before = checkpoint.params_digest(S.init_frozen(vision, answer_head=answer))
    teacher_before = checkpoint.params_digest(TE.init_teacher(cfg.teacher.seed))
    tokens = np.random.default_rng(0).integers(0, 64, (100, 16))
    probe_before = S.text_only_probe(S.init_frozen(vision, answer_head=answer), tokens).tobytes()
    result = TR.train(cfg, 42, train, held, cache)
    assert checkpoint.params_digest(result.frozen) == before
    assert checkpoint.params_digest(TE.teacher_weights(cfg.teacher.seed)) == teacher_before
    assert S.text_only_probe(result.frozen, tokens).tobytes() == probe_before
    assert checkpoint.params_digest(result.params) != checkpoint.params_digest(vision)


def test_static_teacher_runs(make_cfg, small_data):
    train, held, cache = small_data
    cfg = make_cfg("static_teacher")
    cache.ensure(train, cfg.teacher, static=True)
    result = TR.train(cfg, 42, train, held, cache)
    steps = [r for r in result.records if r["kind"] == "step"]
    assert steps[0]["loss"]["align"] > 0


def test_missing_cache_names_path(make_cfg, small_data, tmp_path):
    train, held, _ = small_data
    empty = TeacherCache(tmp_path / "nowhere")
    with pytest.raises(CacheError, match="nowhere"):
        TR.train(make_cfg("ours"), 42, train, held, empty)
    with pytest.raises(TR.TrainingError, match="teacher cache"):
        TR.train(make_cfg("ours"), 42, train, held, None)


def test_nonfinite_reports_step(make_cfg, small_data, monkeypatch):
    train, held, cache = small_data
    real = TR.step_loss
    calls = {"n": 0}

    def poisoned(*args):
        calls["n"] += 1
        total, parts = real(*args)
        if calls["n"] == 3:
            return Tensor(np.inf), parts
        return total, parts

    monkeypatch.setattr(TR, "step_loss", poisoned)
    with pytest.raises(TR.TrainingError, match="step 2"):
        TR.train(make_cfg("ft_only"), 42, train, held, cache)


# -- evaluation -------------------------------------------------------------------
def forced_frozen(vision):
    head = S.init_answer_head()
    head = {k: Tensor(np.zeros(v.shape), name=k) for k, v in head.items()}
    return S.init_frozen(vision, answer_head=head)


def test_forced_answer_accuracy_one():
    exs = [e for e in generate_corpus(0, 200) if e.answer_index == 0]
    ds = Dataset.from_examples(exs)
    params = S.init_student(0)
    ev = TR.evaluate(params, forced_frozen(params), ds)
    assert ev["overall"] == 1.0 and ev["correct"] == len(exs)


def test_random_model_near_chance():
    five = SceneConfig(min_objects=5, max_objects=5)
    exs = [e for e in generate_corpus(0, 6000, five) if e.option_count == 4][:2000]
    assert len(exs) == 2000
    ds = Dataset.from_examples(exs)
    params = S.init_student(5)
    ev = TR.evaluate(params, S.init_frozen(params, seed=5), ds)
    assert abs(ev["overall"] - 0.25) <= 0.03


def test_score_partition_and_micro():
    rng = np.random.default_rng(0)
    rel = rng.choice(["left", "right", "above", "under", "behind", "front"], 500)
    answers = rng.integers(0, 4, 500)
    preds = np.where(rng.random(500) < 0.6, answers, (answers + 1) % 4)
    ev = TR.score(preds, answers, rel)
    assert sum(ev["counts"].values()) == ev["total"] == 500
    assert ev["overall"] == ev["correct"] / 500 == float((preds == answers).mean())
    assert ev["accuracy"]["close"] is None and ev["accuracy"]["far"] is None
    assert all(0 <= v <= 1 for v in ev["accuracy"].values() if v is not None)


def test_evaluate_empty_rejected():
    ds = Dataset.from_examples(generate_corpus(0, 2))
    ds.examples, ds.images = [], ds.images[:0]
    with pytest.raises(ValueError):
        TR.evaluate(S.init_student(0), S.init_frozen(S.init_student(0)), ds)


# -- pretraining helpers ------------------------------------------------------------
def test_layout_code_slots():
    ex = generate_corpus(3, 1)[0]
    code = layout_code(ex.scene)
    present = code.reshape(12, 4)[:, 0]
    assert present.sum() == len(ex.scene.objects)


def test_vlm_cache_reused(make_cfg, tmp_path):
    cfg = make_cfg("base")
    a = original_vlm(cfg.pretrain, tmp_path)
    b = original_vlm(cfg.pretrain, tmp_path)
    assert checkpoint.params_digest(a[0]) == checkpoint.params_digest(b[0])
    assert checkpoint.params_digest(a[1]) == checkpoint.params_digest(b[1])
    assert all(t.requires_grad for t in a[0].values())
    assert not any(t.requires_grad for t in a[1].values())
