"""Accuracy tables (CSV + markdown) and hand-written SVG plots.

Everything here is a pure function of ``index.json`` and the metrics files
it points to, so a report directory can be rebuilt byte-identically.

``index.json``::

    {"cells": [{"id", "axis", "setting", "runs": {"<seed>": "<path to metrics.jsonl>" | null}}]}

A null run path marks a failed cell/seed.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

from .scene import RELATIONS

COLUMNS = RELATIONS + ("overall",)
FAILED = "FAILED"
INDEX = "index.json"


def _read_jsonl(path: Path) -> list[dict]:
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_index(root: str | Path) -> dict:
    return json.loads((Path(root) / INDEX).read_text())


def write_index(root: str | Path, index: dict) -> None:
    (Path(root) / INDEX).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def eval_record(metrics_path: Path) -> dict | None:
    if not metrics_path.exists():
        return None
    evals = [r for r in _read_jsonl(metrics_path) if r.get("kind") == "eval"]
    return evals[-1] if evals else None


def collect_rows(root: str | Path) -> list[dict]:
    """One row per (cell, seed): axis, setting, seed and accuracy columns, or a failed marker."""
    root = Path(root)
    rows = []
    for cell in load_index(root)["cells"]:
        for seed, rel in sorted(cell["runs"].items(), key=lambda kv: int(kv[0])):
            ev = None if rel is None else eval_record(root / rel)
            row = {"cell": cell["id"], "axis": cell["axis"], "setting": cell["setting"], "seed": int(seed)}
            for col in COLUMNS:
                if ev is None:
                    row[col] = None
                elif col == "overall":
                    row[col] = ev["overall"]
                else:
                    row[col] = ev["accuracy"].get(col)
            row["failed"] = ev is None
            rows.append(row)
    return rows


def _fmt(v) -> str:
    return FAILED if v is None else f"{100.0 * v:.2f}"


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "setting", "cell", "seed", *COLUMNS])
    for r in rows:
        w.writerow([r["axis"], r["setting"], r["cell"], r["seed"],
                    *(FAILED if r["failed"] else ("" if r[c] is None else repr(r[c])) for c in COLUMNS)])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        failed = any(rec[c] == FAILED for c in COLUMNS)
        row = {"axis": rec["axis"], "setting": rec["setting"], "cell": rec["cell"],
               "seed": int(rec["seed"]), "failed": failed}
        for c in COLUMNS:
            row[c] = None if failed or rec[c] == "" else float(rec[c])
        rows.append(row)
    return rows


def aggregate(rows: list[dict]) -> dict[str, list[dict]]:
    """Per axis, settings in first-seen order with seed-mean columns and per-seed overall values.

    A setting with any failed seed reports its means as None (rendered FAILED).
    """
    out: dict[str, list[dict]] = {}
    for r in rows:
        settings = out.setdefault(r["axis"], [])
        entry = next((s for s in settings if s["setting"] == r["setting"]), None)
        if entry is None:
            entry = {"setting": r["setting"], "cell": r["cell"], "rows": []}
            settings.append(entry)
        entry["rows"].append(r)
    for settings in out.values():
        for s in settings:
            failed = any(r["failed"] for r in s["rows"])
            s["failed"] = failed
            s["per_seed"] = {r["seed"]: r["overall"] for r in s["rows"]}
            for c in COLUMNS:
                vals = [r[c] for r in s["rows"] if r[c] is not None]
                s[c] = None if failed or not vals else sum(vals) / len(vals)
    return out


def _rank_marks(values: list[float | None]) -> list[str]:
    """'best' / 'second' / '' for each value (ties share the mark)."""
    distinct = sorted({v for v in values if v is not None}, reverse=True)
    marks = []
    for v in values:
        if v is None or not distinct:
            marks.append("")
        elif v == distinct[0]:
            marks.append("best")
        elif len(distinct) > 1 and v == distinct[1]:
            marks.append("second")
        else:
            marks.append("")
    return marks


def _decorate(text: str, mark: str) -> str:
    if mark == "best":
        return f"**{text}**"
    if mark == "second":
        return f"<u>{text}</u>"
    return text


def markdown_tables(agg: dict[str, list[dict]]) -> str:
    lines = []
    for axis, settings in agg.items():
        seeds = sorted({seed for s in settings for seed in s["per_seed"]})
        lines.append(f"## {axis}")
        lines.append("")
        head = ["setting", *(c.capitalize() for c in RELATIONS), "Overall", *(f"seed {s}" for s in seeds)]
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "---|" * len(head))
        marks = {c: _rank_marks([s[c] for s in settings]) for c in COLUMNS}
        for i, s in enumerate(settings):
            cells = [str(s["setting"])]
            for c in COLUMNS:
                cells.append(_decorate(_fmt(s[c]), marks[c][i]) if s[c] is not None or s["failed"] else "-")
            cells += [_fmt(s["per_seed"].get(seed)) if seed in s["per_seed"] else "-" for seed in seeds]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


# -- plots ----------------------------------------------------------------------
W, H, PAD = 640, 360, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _svg(body: list[str], title: str) -> str:
    return "\n".join([
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line class="axis" x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line class="axis" x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        *body,
        "</svg>",
        "",
    ])


def _no_data() -> list[str]:
    return [f'<text class="legend" x="{W / 2:.1f}" y="{H / 2:.1f}" text-anchor="middle">no data</text>']


def loss_curve_svg(series: dict[str, list[float]], title: str = "training loss") -> str:
    series = {k: v for k, v in series.items() if v}
    if not series:
        return _svg(_no_data(), title)
    lo = min(min(v) for v in series.values())
    hi = max(max(v) for v in series.values())
    span = hi - lo or 1.0
    n = max(len(v) for v in series.values())
    body = []
    for i, (name, vals) in enumerate(series.items()):
        pts = []
        for j, y in enumerate(vals):
            px = PAD + (W - 2 * PAD) * (j / max(n - 1, 1))
            py = H - PAD - (H - 2 * PAD) * ((y - lo) / span)
            pts.append(f"{px:.2f},{py:.2f}")
        color = PALETTE[i % len(PALETTE)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{" ".join(pts)}"/>')
        body.append(f'<text class="legend" x="{W - PAD + 4}" y="{PAD + 14 * i}" font-size="10" '
                    f'fill="{color}">{escape(name)}</text>')
    body.append(f'<text x="{PAD - 4}" y="{PAD}" text-anchor="end" font-size="10">{hi:.3g}</text>')
    body.append(f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="10">{lo:.3g}</text>')
    return _svg(body, title)


def accuracy_bars_svg(groups: dict[str, dict[str, float | None]], title: str = "accuracy") -> str:
    """Grouped bars: groups (e.g. relations) x series (e.g. settings), values in [0, 1]."""
    groups = {g: v for g, v in groups.items() if v}
    if not groups:
        return _svg(_no_data(), title)
    names = []
    for vals in groups.values():
        for k in vals:
            if k not in names:
                names.append(k)
    gw = (W - 2 * PAD) / len(groups)
    bw = gw * 0.8 / len(names)
    body = []
    for gi, (gname, vals) in enumerate(groups.items()):
        x0 = PAD + gi * gw + gw * 0.1
        for si, name in enumerate(names):
            v = vals.get(name)
            if v is None:
                continue
            bh = (H - 2 * PAD) * v
            body.append(f'<rect x="{x0 + si * bw:.2f}" y="{H - PAD - bh:.2f}" width="{bw:.2f}" '
                        f'height="{bh:.2f}" fill="{PALETTE[si % len(PALETTE)]}"/>')
        body.append(f'<text x="{x0 + gw * 0.4:.2f}" y="{H - PAD + 14}" text-anchor="middle" '
                    f'font-size="10">{escape(str(gname))}</text>')
    for si, name in enumerate(names):
        body.append(f'<text class="legend" x="{W - PAD + 4}" y="{PAD + 14 * si}" font-size="10" '
                    f'fill="{PALETTE[si % len(PALETTE)]}">{escape(str(name))}</text>')
    return _svg(body, title)


def loss_series(metrics: list[dict]) -> dict[str, list[float]]:
    steps = [r for r in metrics if r.get("kind") == "step"]
    return {term: [r["loss"][term] for r in steps] for term in ("task", "align", "preserve", "total")}


# -- report directory -------------------------------------------------------------
def emit_report(root: str | Path, out: str | Path | None = None) -> Path:
    """Write tables.csv, tables.md, one CSV per axis and SVG plots under ``out`` (default root/report)."""
    root = Path(root)
    out = Path(out) if out is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = collect_rows(root)
    text = rows_to_csv(rows)
    (out / "tables.csv").write_text(text)
    agg = aggregate(parse_csv(text))
    for axis in agg:
        (out / f"axis_{axis.replace('.', '_')}.csv").write_text(
            rows_to_csv([r for r in parse_csv(text) if r["axis"] == axis]))
    (out / "tables.md").write_text("# Results\n\n" + markdown_tables(agg))
    for axis, settings in agg.items():
        groups = {c: {str(s["setting"]): s[c] for s in settings} for c in COLUMNS}
        (out / f"accuracy_{axis.replace('.', '_')}.svg").write_text(accuracy_bars_svg(groups, f"accuracy by {axis}"))
    for cell in load_index(root)["cells"]:
        for seed, rel in sorted(cell["runs"].items(), key=lambda kv: int(kv[0])):
            if rel is None or not (root / rel).exists():
                continue
            series = loss_series(_read_jsonl(root / rel))
            (out / f"loss_{cell['id']}_seed{seed}.svg").write_text(
                loss_curve_svg(series, f"loss {cell['id']} seed {seed}"))
    return out
