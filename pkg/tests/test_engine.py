import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyexit.engine import (MatchSpec, load_match_spec, match, read_answer, run_fixed_exit,
                              run_full, run_with_early_exit)
from earlyexit.errors import LayerRangeError, SpecError
from earlyexit.model import Decoded, TokenInput, greedy_continue
from earlyexit.planted import build_planted_model


def _decoded(token, p, v=8):
    probs = np.full(v, (1 - p) / (v - 1), dtype=np.float32)
    probs[token] = p
    return Decoded(probs, token)


SPEC = MatchSpec("t", ("a", "b"), {"a": [[1], [2, 3]], "b": [[4]]})


def test_match_single_token():
    assert match(_decoded(1, 0.9), SPEC) == (True, "a")
    assert match(_decoded(4, 0.9), SPEC) == (True, "b")
    assert match(_decoded(5, 0.9), SPEC) == (False, None)


def test_match_threshold_is_inclusive():
    spec = SPEC.with_threshold(0.5)
    assert match(_decoded(1, 0.5), spec).matched
    assert not match(_decoded(1, 0.49), spec).matched


def test_match_multi_token_needs_continuation():
    assert match(_decoded(2, 0.9), SPEC) == (False, None)
    assert match(_decoded(2, 0.9), SPEC, lambda toks: 3) == (True, "a")
    assert match(_decoded(2, 0.9), SPEC, lambda toks: 1) == (False, None)


def test_read_answer_prefers_shortest():
    spec = MatchSpec("t", ("x", "y"), {"x": [[1]], "y": [[1, 2]]})
    assert read_answer(1, spec, lambda toks: 2) == ((1,), "x")


@pytest.mark.parametrize("kwargs", [
    dict(classes=("a", "a"), label_tokens={"a": [[1]]}),
    dict(classes=("a",), label_tokens={"z": [[1]]}),
    dict(classes=("a",), label_tokens={"a": []}),
    dict(classes=("a",), label_tokens={"a": [[]]}),
    dict(classes=("a", "b"), label_tokens={"a": [[1]], "b": [[1]]}),
    dict(classes=("a",), label_tokens={"a": [[1]]}, confidence_threshold=-0.1),
    dict(classes=("a",), label_tokens={"a": [[1]]}, confidence_threshold=float("nan")),
    dict(classes=("a",), label_tokens={"a": [[1]]}, candidate_layers=(3, 2)),
    dict(classes=("a",), label_tokens={"a": [[1]]}, candidate_layers=(0, 2)),
])
def test_spec_validation(kwargs):
    with pytest.raises(SpecError):
        MatchSpec("t", **kwargs)


def test_threshold_above_one_is_allowed():
    assert SPEC.with_threshold(1.1).confidence_threshold == 1.1


def test_spec_json_round_trip(tmp_path):
    spec = SPEC.with_threshold(0.3).with_candidates([2, 4])
    path = tmp_path / "task.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert load_match_spec(path) == spec
    path.write_text("{")
    with pytest.raises(SpecError):
        load_match_spec(path)


def test_candidates_beyond_depth():
    with pytest.raises(LayerRangeError):
        SPEC.with_candidates([9]).layers_for(8)


def test_early_exit_at_plant(planted):
    model, task, examples = planted
    for ex in examples[:6]:
        trace = []
        d = run_with_early_exit(model, ex.token_input, task.match_spec, trace)
        assert (d.exited_layer, d.exited_early, d.predicted_class) == (5, True, ex.label)
        assert d.layers_executed == 5
        assert d.latency.layer_fraction == 5 / 8
        # stack is walked once; nothing above the exit layer runs
        assert trace == [1, 2, 3, 4, 5]


def test_fixed_exit(planted):
    model, task, examples = planted
    ex = examples[0]
    assert run_fixed_exit(model, ex.token_input, task.match_spec, 4).predicted_class is None
    d = run_fixed_exit(model, ex.token_input, task.match_spec, 6)
    assert (d.predicted_class, d.exited_layer, d.exited_early) == (ex.label, 6, True)
    assert not run_full(model, ex.token_input, task.match_spec).exited_early
    for bad in (0, 9):
        with pytest.raises(LayerRangeError):
            run_fixed_exit(model, ex.token_input, task.match_spec, bad)


def test_candidate_layers_restrict_exit(planted):
    model, task, examples = planted
    spec = task.match_spec.with_candidates([2, 7])
    assert run_with_early_exit(model, examples[0].token_input, spec).exited_layer == 7


def test_threshold_monotone(planted):
    model, task, examples = planted
    inp = examples[3].token_input
    layers = [run_with_early_exit(model, inp, task.match_spec.with_threshold(t)).exited_layer
              for t in (0.0, 0.2, 0.5, 0.8, 0.95, 1.1)]
    assert layers == sorted(layers)
    assert layers[-1] == 8


def test_impossible_threshold_falls_back_to_full(planted):
    model, task, examples = planted
    for ex in examples[::5]:
        d = run_with_early_exit(model, ex.token_input, task.match_spec.with_threshold(1.1))
        full = run_full(model, ex.token_input, task.match_spec)
        assert (d.exited_layer, d.predicted_class, d.tokens) == \
            (full.exited_layer, full.predicted_class, full.tokens)


@settings(max_examples=25, deadline=None)
@given(toks=st.lists(st.integers(0, 11), min_size=1, max_size=8))
def test_never_matching_spec_equals_full_greedy(toy_model, toks):
    spec = MatchSpec("none", ("z",), {"z": [[999]]})
    inp = TokenInput(tuple(toks))
    d = run_with_early_exit(toy_model, inp, spec)
    assert d.exited_layer == toy_model.config.n_layers and d.predicted_class is None
    assert list(d.tokens) == greedy_continue(toy_model, inp, 4, 1)


def test_multi_token_label_through_engine():
    model = build_planted_model(6, 3, {8: 20, 20: 21}, seed=4)
    spec = MatchSpec("chain", ("c", "d"), {"c": [[20, 21]], "d": [[30]]})
    d = run_with_early_exit(model, TokenInput((1, 8)), spec)
    assert (d.exited_layer, d.predicted_class, d.tokens) == (3, "c", (20, 21))
