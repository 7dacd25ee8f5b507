import csv
import io
import json

import pytest

from earlyexit.bench import DASH, Policy, evaluate
from earlyexit.errors import ReportError
from earlyexit.reports import (emit_report, load_eval_results, render_eval_csv,
                               render_eval_markdown, render_exit_layer_table)


@pytest.fixture(scope="module")
def results(planted):
    model, task, examples = planted
    per_class = Policy.fixed_per_class({"bike": 5, "person": None, "vehicle": 6})
    return [evaluate(model, examples, task, Policy.full()),
            evaluate(model, examples, task, Policy.fixed(5)),
            evaluate(model, examples, task, per_class)]


def _md_rows(text, heading):
    lines = text.split(heading, 1)[1].strip().splitlines()
    rows = []
    for line in lines:
        if not line.startswith("|"):
            break
        rows.append([c.strip() for c in line.strip("|").split("|")])
    return rows


def test_markdown_layout(results):
    text = render_eval_markdown(results)
    assert text.startswith("## waymo\n")
    acc = _md_rows(text, "**Accuracy (%)**")
    assert acc[0] == ["Class", "full", "fixed(L=5)", "fixed(per-class)"]
    assert [r[0] for r in acc[2:]] == ["bike", "person", "vehicle", "Avg"]
    assert acc[3] == ["person", "100.00", "100.00", DASH]
    lat = _md_rows(text, "**Latency (layer fraction)**")
    assert lat[-1] == ["Avg", "1.0000", "0.6250", "0.6875"]
    delta = _md_rows(text, "**fixed(L=5) vs full**")
    assert delta[0] == ["Class", "Accuracy delta (pp)", "Latency improvement (%)"]
    assert delta[-1] == ["Avg", "0.00", "37.50"]
    assert "Latency (ms)" not in text


def test_timing_block_is_opt_in(results):
    assert "**Latency (ms)**" in render_eval_markdown(results, timing=True)
    rows = list(csv.DictReader(io.StringIO(render_eval_csv(results))))
    assert all(r["wall_ms"] == "" for r in rows)


def test_csv_rows(results):
    rows = list(csv.DictReader(io.StringIO(render_eval_csv(results))))
    assert len(rows) == 3 * 4
    person = [r for r in rows if r["policy"] == "fixed(per-class)" and r["class"] == "person"][0]
    assert (person["accuracy_pct"], person["reason"]) == ("", "unrecognized")
    avg = [r for r in rows if r["policy"] == "fixed(per-class)" and r["class"] == "Avg"][0]
    assert (avg["n"], avg["correct"], avg["layer_fraction"]) == ("18", "18", "0.6875")


def test_json_round_trip(results, tmp_path):
    out = tmp_path / "eval.json"
    text = emit_report(results, "json", out)
    assert out.read_text() == text
    payload = json.loads(text)
    assert payload["kind"] == "eval" and payload["timing"] is False
    assert "wall_ms" not in payload["results"][0]["classes"][0]
    assert [c["policy"] for c in payload["comparisons"]] == ["fixed(L=5)", "fixed(per-class)"]
    again = load_eval_results(payload)
    assert render_eval_markdown(again) == render_eval_markdown(results)


def test_rendering_is_stable(results):
    assert emit_report(results, "md") == emit_report(results, "md")


def test_errors(results, tmp_path):
    with pytest.raises(ReportError):
        emit_report(results, "xml")
    with pytest.raises(ReportError):
        emit_report([], "md")
    with pytest.raises(ReportError):
        emit_report(results, "md", tmp_path / "missing" / "x.md")


REPORTS = [
    {"model": "m8", "task_id": "waymo", "n_layers": 8, "optimal_layer": 5},
    {"model": "m8", "task_id": "unrecognized", "n_layers": 8, "optimal_layer": None},
    {"model": "m12", "task_id": "waymo", "n_layers": 12, "optimal_layer": 7},
]


def test_exit_layer_table_md():
    rows = _md_rows("\n" + render_exit_layer_table(REPORTS), "\n")
    assert rows[0] == ["Task", "m8", "m12"]
    assert rows[2] == ["Full Layers", "8", "12"]
    assert rows[3] == ["waymo", "5", "7"]
    assert rows[4] == ["unrecognized", DASH, DASH]


def test_exit_layer_table_csv_and_json():
    rows = list(csv.reader(io.StringIO(render_exit_layer_table(REPORTS, "csv"))))
    assert rows[1] == ["Full Layers", "8", "12"]
    data = json.loads(render_exit_layer_table(REPORTS, "json"))
    assert data["rows"][1] == {"task": "waymo", "m8": "5", "m12": "7"}
    with pytest.raises(ReportError):
        render_exit_layer_table([])
