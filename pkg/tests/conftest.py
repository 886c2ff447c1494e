from __future__ import annotations

import pytest

from geoworld.config import RunConfig
from geoworld.data import Dataset, TeacherCache
from geoworld.pretrain import PretrainConfig
from geoworld.scene import generate_corpus

# A small pretraining run keeps unit tests fast; the acceptance suite uses the defaults.
TINY_PRETRAIN = PretrainConfig(count=64, layout_epochs=1, answer_epochs=1)


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("geoworld")


@pytest.fixture(scope="session")
def full_vlm_cache(workdir):
    """Shared cache for the default (full) pretraining, paid once per session."""
    return workdir / "vlm_full"


@pytest.fixture(scope="session")
def small_data(workdir):
    train = Dataset.from_examples(generate_corpus(0, 32, split="train"))
    held = Dataset.from_examples(generate_corpus(10_000_000, 40, split="eval"))
    cache = TeacherCache(workdir / "teacher_cache")
    return train, held, cache


@pytest.fixture(scope="session")
def make_cfg(workdir):
    def make(method="ours", **kw):
        base = dict(method=method, seeds=(42,), epochs=1, pretrain=TINY_PRETRAIN,
                    vlm_cache=str(workdir / "vlm_cache"), teacher_cache=str(workdir / "teacher_cache"))
        base.update(kw)
        return RunConfig(**base)
    return make


# -- acceptance summary: one line per criterion ---------------------------------------
def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    prev = item.config._criteria.get(n)
    ok = rep.passed and (prev is None or prev[0])
    item.config._criteria[n] = (ok, title, detail)


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, title, detail) in sorted(config._criteria.items()):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
