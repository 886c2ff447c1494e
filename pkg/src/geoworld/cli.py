"""Command-line entry point: gen-data, train, eval, ablate, report.

Exit status: 0 on success, 1 on usage or validation errors (before any
side effect), 2 when a run fails.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint
from . import student as S
from .ablation import GridSpec, run_ablation
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, TeacherCache, static_key
from .reports import emit_report, write_index
from .scene import SceneError, generate_corpus, write_corpus
from .train import evaluate, train

EVAL_START_SEED = 10_000_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geoworld", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. loss.lambda_align=0")

    g = sub.add_parser("gen-data", help="generate a QA corpus (and optionally fill the teacher cache)")
    g.add_argument("--seed", type=int, default=0, help="first scene seed")
    g.add_argument("--count", type=int, default=8000)
    g.add_argument("--split", default="train")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.add_argument("--teacher-cache", help="precompute teacher features into this directory")
    config_args(g)

    t = sub.add_parser("train", help="train one method for every configured seed")
    config_args(t)
    t.add_argument("--out", required=True, help="run directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--out", help="write the eval record here (default: stdout)")

    a = sub.add_parser("ablate", help="run the one-axis-at-a-time ablation grid")
    config_args(a)
    a.add_argument("--grid", help="JSON grid spec: {axes: {name: [{setting, overrides}]}, checks: bool}")
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=1)

    r = sub.add_parser("report", help="regenerate tables and plots from a run or ablation directory")
    r.add_argument("dir")
    r.add_argument("--out")
    return p


def _resolved(args, out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.count < 1:
        raise ConfigError("--count must be positive")
    out = Path(args.out)
    _resolved(args, out.parent, cfg)
    examples = generate_corpus(args.seed, args.count, split=args.split)
    write_corpus(out, examples)
    _log(f"wrote {len(examples)} examples to {out}")
    if args.teacher_cache:
        ds = Dataset.load(out)
        cache = TeacherCache(args.teacher_cache)
        cache.ensure(ds, cfg.teacher)
        cache.ensure(ds, cfg.teacher, static=True)
        _log(f"teacher features cached in {args.teacher_cache}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    _resolved(args, out, cfg)
    train_ds = Dataset.load(cfg.train_path)
    eval_ds = Dataset.load(cfg.eval_path)
    cache = TeacherCache(cfg.teacher_cache)
    if cfg.method in ("ours", "static_teacher"):
        static = cfg.method == "static_teacher"
        key = static_key(cfg.teacher.block_index) if static else cfg.teacher.cache_key()
        if not cache.has(train_ds.corpus_id, key):
            _log(f"error: teacher cache {cfg.teacher_cache} lacks features for {cfg.train_path}; "
                 f"run gen-data --teacher-cache {cfg.teacher_cache}")
            return 2
    runs = {}
    for seed in cfg.seeds:
        run_dir = out / cfg.method / f"seed-{seed}"
        result = train(cfg, seed, train_ds, eval_ds, cache, out_dir=run_dir, log=_log)
        runs[str(seed)] = str(run_dir.relative_to(out) / "metrics.jsonl")
        _log(f"{cfg.method} seed {seed}: overall {result.overall:.4f}")
    write_index(out, {"base": cfg.to_dict(), "cells": [
        {"id": cfg.method, "axis": "method", "setting": cfg.method, "overrides": {}, "runs": runs}]})
    emit_report(out)
    return 0


def cmd_eval(args) -> int:
    params = checkpoint.load(args.checkpoint)
    student = {k: v for k, v in params.items() if k.startswith(("phi.", "theta."))}
    answer = {k: v for k, v in params.items() if k.startswith("frozen.answer.")}
    if not student or not answer:
        raise ValueError(f"{args.checkpoint} lacks phi/theta or frozen.answer tensors")
    frozen = S.init_frozen(student, answer_head=answer)
    record = evaluate(student, frozen, Dataset.load(args.data), split=args.split)
    text = json.dumps(record, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    grid = {} if not args.grid else json.loads(Path(args.grid).read_text())
    try:
        spec = GridSpec.from_dict(cfg, grid)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad grid spec: {exc}") from exc
    out = Path(args.out)
    _resolved(args, out, cfg)
    run_ablation(spec, out, workers=args.workers, log=_log)
    emit_report(out)
    failures = json.loads((out / "failures.json").read_text())
    if failures:
        _log(f"{len(failures)} cell runs failed; see {out / 'failures.json'}")
    return 0


def cmd_report(args) -> int:
    out = emit_report(args.dir, args.out)
    _log(f"report written to {out}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, SceneError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
