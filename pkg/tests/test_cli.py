from __future__ import annotations

import json
from dataclasses import asdict

import pytest

from geoworld import reports as R
from geoworld.cli import main


@pytest.fixture(scope="module")
def cli_env(workdir, make_cfg, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "0", "--count", "24", "--out", str(d / "train.jsonl"),
                 "--teacher-cache", str(d / "tc")]) == 0
    assert main(["gen-data", "--seed", "10000000", "--count", "16", "--split", "eval",
                 "--out", str(d / "eval.jsonl")]) == 0
    cfg = {"seeds": [42], "epochs": 1, "pretrain": asdict(make_cfg().pretrain),
           "data": {"train": str(d / "train.jsonl"), "eval": str(d / "eval.jsonl"),
                    "teacher_cache": str(d / "tc"), "vlm_cache": str(workdir / "vlm_cache")}}
    (d / "cfg.json").write_text(json.dumps(cfg))
    return d


def test_no_args_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_key_fails_without_side_effects(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--set", "loss.lamda_align=0", "--out", str(out)]) == 1
    assert "lamda_align" in capsys.readouterr().err
    assert not out.exists()


def test_invalid_value_fails_without_side_effects(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--set", "method=magic", "--out", str(out)]) == 1
    assert not out.exists()


def test_gen_data_writes_corpus(cli_env):
    lines = (cli_env / "train.jsonl").read_text().splitlines()
    assert len(lines) == 24
    assert json.loads(lines[0])["example_id"] == "train-0"
    assert (cli_env / "resolved_config.json").exists()


def test_train_eval_report(cli_env, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--config", str(cli_env / "cfg.json"), "--set", "loss.lambda_align=0",
               "--out", str(out)])
    assert rc == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["loss"]["lambda_align"] == 0
    metrics = (out / "ours/seed-42/metrics.jsonl").read_text().splitlines()
    ev_train = json.loads(metrics[-1])

    # eval reproduces the in-training eval record from the checkpoint alone
    rec = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(out / "ours/seed-42/checkpoint"),
                 "--data", str(cli_env / "eval.jsonl"), "--out", str(rec)]) == 0
    ev = json.loads(rec.read_text())
    assert ev["overall"] == ev_train["overall"] and ev["accuracy"] == ev_train["accuracy"]

    report = out / "report"
    before = {p.name: p.read_bytes() for p in report.iterdir()}
    assert main(["report", str(out)]) == 0
    after = {p.name: p.read_bytes() for p in report.iterdir()}
    assert before == after and "tables.md" in after


def test_missing_teacher_cache_exit_2(cli_env, tmp_path, capsys):
    rc = main(["train", "--config", str(cli_env / "cfg.json"), "--set",
               f"data.teacher_cache={tmp_path / 'empty'}", "--out", str(tmp_path / "run")])
    assert rc == 2
    assert "empty" in capsys.readouterr().err


def test_missing_data_exit_2(cli_env, tmp_path):
    rc = main(["train", "--config", str(cli_env / "cfg.json"), "--set",
               f"data.train={tmp_path / 'none.jsonl'}", "--out", str(tmp_path / "run")])
    assert rc == 2


def test_report_on_empty_dir_fails(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_ablate_small_grid(cli_env, tmp_path):
    grid = {"axes": {"lambda_align": [{"setting": "0.1", "overrides": {"loss.lambda_align": 0.1}},
                                      {"setting": "0.2", "overrides": {"loss.lambda_align": 0.2}}]},
            "checks": False}
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cli_env / "cfg.json"), "--grid", str(tmp_path / "grid.json"),
                 "--out", str(out)]) == 0
    index = R.load_index(out)
    assert [c["setting"] for c in index["cells"]] == ["0.1", "0.2"]
    assert json.loads((out / "failures.json").read_text()) == {}
    assert (out / "report/tables.md").exists()


def test_ablate_bad_grid_is_usage_error(cli_env, tmp_path):
    (tmp_path / "grid.json").write_text(json.dumps({"axes": {"x": [{"setting": "a",
                                                                   "overrides": {"epochs": 9}}]}}))
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cli_env / "cfg.json"), "--grid", str(tmp_path / "grid.json"),
                 "--out", str(out)]) == 1
    assert not out.exists()
