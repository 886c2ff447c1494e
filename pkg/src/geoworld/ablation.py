"""One-axis-at-a-time ablation grid over training configs.

Each axis sweeps one config key while everything else stays at the base
config. Settings that coincide with the base config share one cell, so the
base run is trained once per seed. Failed cells are recorded and the rest
continue.
"""
from __future__ import annotations

import hashlib
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import checkpoint
from .config import RunConfig
from .data import Dataset, TeacherCache
from .reports import load_index, write_index
from .train import train

# axis name -> list of (setting label, overrides)
DEFAULT_AXES: dict[str, list[tuple[str, dict]]] = {
    "method": [(m, {"method": m}) for m in ("base", "ft_only", "static_teacher", "ours")],
    "conditioning": [
        ("none", {"teacher.use_camera": False, "teacher.use_prompt": False}),
        ("prompt", {"teacher.use_camera": False, "teacher.use_prompt": True}),
        ("camera", {"teacher.use_camera": True, "teacher.use_prompt": False}),
        ("camera+prompt", {"teacher.use_camera": True, "teacher.use_prompt": True}),
    ],
    "block_index": [(str(b), {"teacher.block_index": b}) for b in (2, 3, 4)],
    "denoise_steps": [(str(k), {"teacher.denoise_steps": k}) for k in (0, 1, 2, 3)],
    "lambda_align": [(str(v), {"loss.lambda_align": v}) for v in (0.05, 0.10, 0.20)],
    "lambda_preserve": [(str(v), {"loss.lambda_preserve": v}) for v in (0.0, 0.05)],
    "frame_count": [(str(f), {"teacher.frame_count": f}) for f in (5, 9, 13)],
    "pooling": [(p, {"teacher.pooling": p}) for p in ("mean", "first", "last")],
}

# Exact-equivalence checks run alongside the sweeps.
CHECK_AXES: dict[str, list[tuple[str, dict]]] = {
    "check_single_frame_pooling": [
        (p, {"teacher.frame_count": 1, "teacher.pooling": p}) for p in ("mean", "first", "last")
    ],
    "check_zero_weights": [
        ("ft_only", {"method": "ft_only"}),
        ("ours_lambda0", {"method": "ours", "loss.lambda_align": 0.0, "loss.lambda_preserve": 0.0}),
    ],
}

ALLOWED_KEYS = {"method", "teacher.block_index", "teacher.denoise_steps", "loss.lambda_align",
                "teacher.frame_count", "teacher.pooling", "teacher.use_prompt", "teacher.use_camera",
                "loss.lambda_preserve"}


@dataclass
class GridSpec:
    base: RunConfig
    axes: dict[str, list[tuple[str, dict]]] = field(default_factory=lambda: dict(DEFAULT_AXES))
    checks: bool = True

    def __post_init__(self):
        for axis, settings in self.all_axes().items():
            for label, ov in settings:
                bad = set(ov) - ALLOWED_KEYS
                if bad:
                    raise ValueError(f"axis {axis} setting {label}: keys outside the grid: {sorted(bad)}")

    def all_axes(self) -> dict[str, list[tuple[str, dict]]]:
        return {**self.axes, **(CHECK_AXES if self.checks else {})}

    @classmethod
    def from_dict(cls, base: RunConfig, d: dict) -> GridSpec:
        axes = {name: [(str(s["setting"]), dict(s["overrides"])) for s in settings]
                for name, settings in d.get("axes", {}).items()} or dict(DEFAULT_AXES)
        return cls(base, axes, bool(d.get("checks", True)))


def cell_id(cfg: RunConfig) -> str:
    """Stable id from the fields that matter for training."""
    d = cfg.to_dict()
    d.pop("seeds")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def plan(spec: GridSpec) -> tuple[list[dict], dict[str, RunConfig]]:
    """Index cells (axis, setting, id) and the unique configs they need."""
    cells, configs = [], {}
    for axis, settings in spec.all_axes().items():
        for label, ov in settings:
            cfg = spec.base.with_overrides(ov)
            cid = cell_id(cfg)
            configs.setdefault(cid, cfg)
            cells.append({"id": cid, "axis": axis, "setting": label, "overrides": ov})
    return cells, configs


def _run_cell(args) -> tuple[str, int, str | None, str | None]:
    cid, cfg_dict, seed, root, train_path, eval_path = args
    cfg = RunConfig.from_dict(cfg_dict)
    out = Path(root) / "cells" / cid / f"seed-{seed}"
    try:
        train_ds = Dataset.load(train_path)
        eval_ds = Dataset.load(eval_path)
        cache = TeacherCache(cfg.teacher_cache)
        if cfg.method == "ours":
            cache.ensure(train_ds, cfg.teacher)
        elif cfg.method == "static_teacher":
            cache.ensure(train_ds, cfg.teacher, static=True)
        train(cfg, seed, train_ds, eval_ds, cache, out_dir=out)
        return cid, seed, str(out.relative_to(root) / "metrics.jsonl"), None
    except Exception:  # a failed cell must not stop the grid
        return cid, seed, None, traceback.format_exc()


def run_ablation(spec: GridSpec, root: str | Path, workers: int = 1, log=None) -> dict:
    """Train every unique cell for every seed; write index.json and failures.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cells, configs = plan(spec)
    jobs = [(cid, cfg.to_dict(), seed, str(root), cfg.train_path, cfg.eval_path)
            for cid, cfg in configs.items() for seed in spec.base.seeds]
    # teacher caches are shared files: fill them before fanning out
    if workers > 1:
        train_ds = Dataset.load(spec.base.train_path)
        for cfg in configs.values():
            cache = TeacherCache(cfg.teacher_cache)
            if cfg.method == "ours":
                cache.ensure(train_ds, cfg.teacher)
            elif cfg.method == "static_teacher":
                cache.ensure(train_ds, cfg.teacher, static=True)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_run_cell(job))
            if log:
                status = "ok" if results[-1][2] else "FAILED"
                log(f"[{i + 1}/{len(jobs)}] cell {job[0]} seed {job[2]}: {status}")
    paths = {(cid, seed): path for cid, seed, path, _ in results}
    failures = {f"{cid}/seed-{seed}": err for cid, seed, _, err in results if err}
    index = {"base": spec.base.to_dict(), "cells": []}
    for c in cells:
        runs = {str(seed): paths.get((c["id"], seed)) for seed in spec.base.seeds}
        index["cells"].append({**c, "runs": runs})
    write_index(root, index)
    (root / "failures.json").write_text(json.dumps(failures, indent=1, sort_keys=True) + "\n")
    if spec.checks:
        (root / "checks.json").write_text(json.dumps(verify_checks(root), indent=1, sort_keys=True) + "\n")
    return index


def _lines(path: Path) -> list[str]:
    return path.read_text().splitlines()


def verify_checks(root: str | Path) -> dict[str, bool]:
    """Exact-equivalence verdicts for the check axes of a finished grid.

    ``check_single_frame_pooling``: every record after the header (steps and
    eval) is byte-identical across the three pooling settings; headers differ
    only because they echo the config.
    ``check_zero_weights``: the lambda=0 cell ends with byte-identical
    vision-side parameters and an identical eval record to the ft_only cell.
    Step records are not compared there, since the lambda=0 cell logs the
    (unweighted) align and preserve values.
    """
    root = Path(root)
    cells = load_index(root)["cells"]
    verdict = {}
    by_axis: dict[str, list[dict]] = {}
    for c in cells:
        by_axis.setdefault(c["axis"], []).append(c)
    pooling = by_axis.get("check_single_frame_pooling")
    if pooling:
        ok = True
        for seed in pooling[0]["runs"]:
            paths = [c["runs"][seed] for c in pooling]
            if any(p is None for p in paths):
                ok = False
                continue
            bodies = {tuple(_lines(root / p)[1:]) for p in paths}
            ok = ok and len(bodies) == 1
        verdict["check_single_frame_pooling"] = ok
    zero = by_axis.get("check_zero_weights")
    if zero:
        ok = True
        ft = next(c for c in zero if c["setting"] == "ft_only")
        z = next(c for c in zero if c["setting"] != "ft_only")
        for seed, pa in ft["runs"].items():
            pb = z["runs"].get(seed)
            if pa is None or pb is None:
                ok = False
                continue
            ev_a, ev_b = _lines(root / pa)[-1], _lines(root / pb)[-1]
            vis_a = {k: v for k, v in checkpoint.load(root / Path(pa).parent / "checkpoint").items()
                     if k.startswith(("phi.", "theta."))}
            vis_b = {k: v for k, v in checkpoint.load(root / Path(pb).parent / "checkpoint").items()
                     if k.startswith(("phi.", "theta."))}
            ok = ok and ev_a == ev_b and checkpoint.params_digest(vis_a) == checkpoint.params_digest(vis_b)
        verdict["check_zero_weights"] = ok
    return verdict
