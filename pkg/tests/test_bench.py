import json
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyexit.bench import (ABSENT, UNRECOGNIZED, LabeledExample, Policy, TaskSpec, compare,
                             evaluate, improvement, load_dataset, load_task, save_task,
                             split_dataset, split_sizes, write_dataset)
from earlyexit.errors import DatasetError, SpecError
from earlyexit.fixtures import disjoint_task, planted_examples, waymo_task


def _write(path, rows):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in rows) + "\n")
    return path


@pytest.mark.parametrize("row, message", [
    ({"id": "a", "prompt_tokens": [1], "label": "plane"},
     "line 2: label 'plane' not in task classes ['bike', 'person', 'vehicle']"),
    ({"id": "a", "prompt_tokens": [1]}, "line 2: missing field 'label'"),
    ({"id": "a", "prompt_tokens": [99], "label": "bike"}, "line 2: token id 99 outside"),
    ({"id": "a", "prompt_tokens": ["x"], "label": "bike"}, "line 2: prompt_tokens"),
    ({"id": "a", "prompt_tokens": [], "label": "bike"}, "line 2: example has no tokens"),
    ({"id": "a", "prompt_tokens": [1], "label": "bike", "embedding_prefix": [[0.0, 1.0]]},
     "line 2: embedding_prefix has the wrong shape"),
    ({"id": "a", "prompt_tokens": [1], "label": "bike", "dynamics": "fast"}, "line 2: dynamics"),
    ({"id": "ok", "prompt_tokens": [1], "label": "bike"}, "line 2: duplicate id 'ok'"),
    ("{oops", "line 2: invalid JSON"),
])
def test_dataset_errors(tmp_path, row, message):
    first = {"id": "ok", "prompt_tokens": [1, 2], "label": "person"}
    path = _write(tmp_path / "d.jsonl", [first, row])
    with pytest.raises(DatasetError) as info:
        load_dataset(path, waymo_task(), vocab_size=32, d_model=64)
    assert str(info.value).startswith(message)


def test_empty_dataset(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("\n")
    with pytest.raises(DatasetError, match="empty dataset"):
        load_dataset(path, waymo_task())


def test_dataset_round_trip(tmp_path):
    task = waymo_task()
    examples = planted_examples(task, 4, seed=1)
    path = tmp_path / "d.jsonl"
    write_dataset(examples, path)
    loaded = load_dataset(path, task, 32)
    assert [e.to_dict() for e in loaded] == [e.to_dict() for e in examples]


def test_task_round_trip(tmp_path):
    task = waymo_task(threshold=0.25)
    save_task(task, tmp_path / "t.json")
    loaded = load_task(tmp_path / "t.json")
    assert loaded.match_spec == task.match_spec
    assert loaded.prompt_template == task.prompt_template
    assert dict(loaded.dynamics_partition) == dict(task.dynamics_partition)


def test_task_validation():
    spec = waymo_task().match_spec
    with pytest.raises(SpecError):
        TaskSpec.from_match_spec(spec, prompt_template=(1, 2))
    with pytest.raises(SpecError):
        TaskSpec.from_match_spec(spec, dynamics_partition={"bike": "static"})


@pytest.mark.parametrize("n, expected", [(5845, (5195, 650)), (9, (8, 1)), (8, (8, 0)),
                                         (18, (16, 2)), (1, (1, 0))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


def _examples(counts):
    out = []
    for label, n in counts.items():
        out += [LabeledExample(f"{label}-{i}", (1,), label) for i in range(n)]
    return out


@settings(max_examples=30, deadline=None)
@given(counts=st.dictionaries(st.sampled_from(["a", "b", "c", "d"]), st.integers(9, 60),
                              min_size=1),
       seed=st.integers(0, 2 ** 32))
def test_split_is_stratified_and_ordered(counts, seed):
    examples = _examples(counts)
    prof, ev = split_dataset(examples, seed)
    for label, n in counts.items():
        assert sum(e.label == label for e in prof) == split_sizes(n)[0]
        assert sum(e.label == label for e in ev) == split_sizes(n)[1]
    pos = {e.id: i for i, e in enumerate(examples)}
    assert [pos[e.id] for e in prof] == sorted(pos[e.id] for e in prof)
    assert [pos[e.id] for e in ev] == sorted(pos[e.id] for e in ev)
    assert {e.id for e in prof} | {e.id for e in ev} == set(pos)


def test_split_seeding():
    examples = _examples({"a": 90, "b": 45})
    ids = lambda s: [e.id for e in split_dataset(examples, s)[1]]  # noqa: E731
    assert ids(3) == ids(3)
    assert len({tuple(ids(s)) for s in range(20)}) > 1


def test_small_class_goes_to_profiling():
    with pytest.warns(UserWarning, match="'b' has only 3"):
        prof, ev = split_dataset(_examples({"a": 9, "b": 3}), 0)
    assert sum(e.label == "b" for e in prof) == 3
    assert all(e.label == "a" for e in ev)


def test_evaluate_planted(planted):
    model, task, examples = planted
    full = evaluate(model, examples, task, Policy.full())
    fixed = evaluate(model, examples, task, Policy.fixed(5))
    assert (full.policy, fixed.policy) == ("full", "fixed(L=5)")
    assert full.avg_accuracy == fixed.avg_accuracy == 100.0
    assert full.avg_layer_fraction == 1.0
    assert fixed.avg_layer_fraction == 5 / 8
    avg = compare(full, fixed)[-1]
    assert avg.name == "Avg" and avg.accuracy_delta == 0.0
    assert avg.latency_improvement == pytest.approx(37.5)


def test_evaluate_jobs_deterministic(planted):
    model, task, examples = planted
    a = evaluate(model, examples, task, Policy.dynamic(), jobs=1).to_dict()
    b = evaluate(model, examples, task, Policy.dynamic(), jobs=4).to_dict()
    assert a == b and a["avg"]["layer_fraction"] == 5 / 8


def test_absent_and_unrecognized_cells(planted):
    model, task, examples = planted
    only_bike = [e for e in examples if e.label == "bike"]
    res = evaluate(model, only_bike, task, Policy.full())
    assert res.by_class()["person"].reason == ABSENT
    assert res.avg_accuracy == 100.0
    per_class = Policy.fixed_per_class({"bike": 5, "person": None, "vehicle": 6})
    res = evaluate(model, examples, task, per_class)
    assert res.by_class()["person"].reason == UNRECOGNIZED
    assert res.avg_layer_fraction == pytest.approx((5 / 8 + 6 / 8) / 2)
    assert compare(evaluate(model, examples, task, Policy.full()), res)[1].accuracy_delta is None


def test_unrecognized_labels_score_zero(planted):
    model, _, examples = planted
    task = disjoint_task(vocab_size=model.config.vocab_size)
    assert evaluate(model, examples, task, Policy.full()).avg_accuracy == 0.0


def test_fixed_layer_out_of_range(planted):
    model, task, examples = planted
    with pytest.raises(ValueError):
        evaluate(model, examples, task, Policy.fixed(9))


def test_improvement():
    assert improvement(1.0, 0.625) == 37.5
    assert improvement(0.0, 0.5) is None
    assert improvement(None, 0.5) is None


def test_no_warning_for_large_classes():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        split_dataset(_examples({"a": 9}), 0)
