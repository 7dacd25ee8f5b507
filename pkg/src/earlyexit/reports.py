"""Rendering of exit-layer summaries and per-class accuracy/latency tables.

All output is byte-stable for identical inputs: fixed column order, fixed
float formatting, no timestamps.
"""
from __future__ import annotations

import csv
import io
import json
import os
from typing import Iterable, List, Optional, Sequence

from .bench import DASH, EvalResult, compare
from .errors import ReportError

FORMATS = ("md", "csv", "json")


def _fmt(value: Optional[float], digits: int) -> str:
    return DASH if value is None else f"{value:.{digits}f}"


def _md_table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> List[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(" --- " for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


# evaluation tables ----------------------------------------------------------

def _class_names(results: Sequence[EvalResult]) -> List[str]:
    names: List[str] = []
    for r in results:
        for c in r.classes:
            if c.name not in names:
                names.append(c.name)
    return names


def _block(results, names, attr, avg_attr, digits) -> List[List[str]]:
    rows = []
    for name in names:
        row = [name]
        for r in results:
            c = r.by_class().get(name)
            row.append(_fmt(getattr(c, attr) if c is not None and c.present else None, digits))
        rows.append(row)
    rows.append(["Avg"] + [_fmt(getattr(r, avg_attr), digits) for r in results])
    return rows


def render_eval_markdown(results: Sequence[EvalResult], timing: bool = False) -> str:
    if not results:
        raise ReportError("no results")
    names = _class_names(results)
    header = ["Class"] + [r.policy for r in results]
    task_ids = []
    for r in results:
        if r.task_id not in task_ids:
            task_ids.append(r.task_id)
    out = [f"## {', '.join(task_ids)}", "", "**Accuracy (%)**", ""]
    out += _md_table(header, _block(results, names, "accuracy", "avg_accuracy", 2))
    out += ["", "**Latency (layer fraction)**", ""]
    out += _md_table(header, _block(results, names, "layer_fraction", "avg_layer_fraction", 4))
    if timing:
        out += ["", "**Latency (ms)**", ""]
        out += _md_table(header, _block(results, names, "wall_ms", "avg_wall_ms", 3))
    base = results[0]
    for other in results[1:]:
        deltas = compare(base, other)
        cols = ["Class", "Accuracy delta (pp)", "Latency improvement (%)"]
        if timing:
            cols.append("Wall-clock improvement (%)")
        rows = []
        for d in deltas:
            row = [d.name, _fmt(d.accuracy_delta, 2), _fmt(d.latency_improvement, 2)]
            if timing:
                row.append(_fmt(d.wall_improvement, 2))
            rows.append(row)
        out += ["", f"**{other.policy} vs {base.policy}**", ""]
        out += _md_table(cols, rows)
    return "\n".join(out) + "\n"


CSV_COLUMNS = ("task_id", "policy", "class", "n", "correct", "accuracy_pct",
               "layer_fraction", "wall_ms", "reason")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_eval_csv(results: Sequence[EvalResult], timing: bool = False) -> str:
    if not results:
        raise ReportError("no results")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results:
        for c in r.classes:
            writer.writerow([_cell(v) for v in (
                r.task_id, r.policy, c.name, c.n, c.correct, c.accuracy, c.layer_fraction,
                c.wall_ms if timing else None, c.reason)])
        writer.writerow([_cell(v) for v in (
            r.task_id, r.policy, "Avg", sum(c.n for c in r.classes if c.present),
            sum(c.correct for c in r.classes if c.present), r.avg_accuracy, r.avg_layer_fraction,
            r.avg_wall_ms if timing else None, None)])
    return buf.getvalue()


def eval_payload(results: Sequence[EvalResult], timing: bool = False) -> dict:
    payload = {"kind": "eval", "timing": timing, "results": [r.to_dict(timing) for r in results]}
    if len(results) > 1:
        payload["comparisons"] = []
        for other in results[1:]:
            payload["comparisons"].append({
                "baseline": results[0].policy,
                "policy": other.policy,
                "deltas": [{"class": d.name, "accuracy_delta": d.accuracy_delta,
                            "latency_improvement": d.latency_improvement,
                            **({"wall_improvement": d.wall_improvement} if timing else {})}
                           for d in compare(results[0], other)],
            })
    return payload


def render_eval_json(results: Sequence[EvalResult], timing: bool = False) -> str:
    if not results:
        raise ReportError("no results")
    return json.dumps(eval_payload(results, timing), indent=2, ensure_ascii=False) + "\n"


def emit_report(results: Sequence[EvalResult], fmt: str, out_path=None,
                timing: bool = False) -> str:
    """Render evaluation results as md, csv or json; write to ``out_path``
    when given and return the text."""
    renderers = {"md": render_eval_markdown, "csv": render_eval_csv, "json": render_eval_json}
    if fmt not in renderers:
        raise ReportError(f"unknown format {fmt!r}; choose from {FORMATS}")
    text = renderers[fmt](list(results), timing)
    if out_path is not None:
        _write(out_path, text)
    return text


def load_eval_results(data: dict) -> List[EvalResult]:
    return [EvalResult.from_dict(r) for r in data["results"]]


# exit-layer summary -----------------------------------------------------------

def render_exit_layer_table(reports: Sequence[dict], fmt: str = "md") -> str:
    """One column per model, one row per task, plus a "Full Layers" row.
    Tasks without an exit layer render as a dash."""
    if not reports:
        raise ReportError("no results")
    models: List[str] = []
    tasks: List[str] = []
    cells = {}
    depth = {}
    for rep in reports:
        model = rep.get("model") or "model"
        if model not in models:
            models.append(model)
        if rep["task_id"] not in tasks:
            tasks.append(rep["task_id"])
        depth[model] = rep["n_layers"]
        cells[(rep["task_id"], model)] = rep["optimal_layer"]

    def cell(value) -> str:
        return DASH if value is None else str(value)

    rows = [["Full Layers"] + [cell(depth[m]) for m in models]]
    rows += [[t] + [cell(cells.get((t, m))) for m in models] for t in tasks]
    if fmt == "md":
        return "\n".join(_md_table(["Task"] + models, rows)) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task"] + models)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "json":
        return json.dumps({"kind": "exit_layers", "models": models,
                           "rows": [{"task": r[0], **dict(zip(models, r[1:]))} for r in rows]},
                          indent=2, ensure_ascii=False) + "\n"
    raise ReportError(f"unknown format {fmt!r}; choose from {FORMATS}")


def _write(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def write_text(path, text: str) -> None:
    _write(path, text)
