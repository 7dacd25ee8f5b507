"""Early-exit inference: label matching, dynamic exit and fixed-layer exit."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from .errors import LayerRangeError, SpecError
from .model import (Decoded, HiddenState, LayerStack, TokenInput, decode_at_layer,
                    forward_to_layer, iter_layers)

TokenSeq = Tuple[int, ...]


@dataclass(frozen=True)
class MatchSpec:
    """Per-task label vocabulary and exit threshold.

    ``label_tokens`` maps each class to the token sequences that count as
    that class (canonical label plus synonyms). ``candidate_layers=None``
    means every layer 1..N is a candidate.
    """

    task_id: str
    classes: Tuple[str, ...]
    label_tokens: Mapping[str, Tuple[TokenSeq, ...]]
    confidence_threshold: float = 0.0
    candidate_layers: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise SpecError("duplicate class names")
        labels: Dict[str, Tuple[TokenSeq, ...]] = {}
        for cls, seqs in self.label_tokens.items():
            if cls not in self.classes:
                raise SpecError(f"label_tokens names unknown class {cls!r}")
            seqs = tuple(tuple(int(t) for t in s) for s in seqs)
            if not seqs or any(len(s) == 0 for s in seqs):
                raise SpecError(f"class {cls!r} needs at least one non-empty token sequence")
            labels[cls] = seqs
        object.__setattr__(self, "label_tokens", labels)
        owner: Dict[TokenSeq, str] = {}
        for cls, seqs in labels.items():
            for s in seqs:
                if owner.get(s, cls) != cls:
                    raise SpecError(f"token sequence {list(s)} mapped to {owner[s]!r} and {cls!r}")
                owner[s] = cls
        tau = float(self.confidence_threshold)
        if not tau >= 0.0 or tau == float("inf"):
            raise SpecError(f"threshold must be a finite value >= 0, got {self.confidence_threshold}")
        object.__setattr__(self, "confidence_threshold", tau)
        if self.candidate_layers is not None:
            layers = tuple(int(x) for x in self.candidate_layers)
            if not layers:
                raise SpecError("candidate_layers must not be empty")
            if layers[0] < 1 or any(b <= a for a, b in zip(layers, layers[1:])):
                raise SpecError("candidate_layers must be strictly increasing and >= 1")
            object.__setattr__(self, "candidate_layers", layers)

    @cached_property
    def _owner(self) -> Dict[TokenSeq, str]:
        return {s: cls for cls, seqs in self.label_tokens.items() for s in seqs}

    @cached_property
    def _by_first(self) -> Dict[int, List[TokenSeq]]:
        out: Dict[int, List[TokenSeq]] = {}
        for s in self._owner:
            out.setdefault(s[0], []).append(s)
        return out

    def lookup(self, tokens: Sequence[int]) -> Optional[str]:
        return self._owner.get(tuple(tokens))

    def sequences_starting_with(self, token: int) -> List[TokenSeq]:
        return self._by_first.get(token, [])

    @property
    def max_label_len(self) -> int:
        return max((len(s) for s in self._owner), default=1)

    def layers_for(self, n_layers: int) -> Tuple[int, ...]:
        if self.candidate_layers is None:
            return tuple(range(1, n_layers + 1))
        if self.candidate_layers[-1] > n_layers:
            raise LayerRangeError(
                f"candidate layer {self.candidate_layers[-1]} exceeds model depth {n_layers}")
        return self.candidate_layers

    def with_threshold(self, threshold: float) -> "MatchSpec":
        return replace(self, confidence_threshold=threshold)

    def with_candidates(self, layers: Optional[Sequence[int]]) -> "MatchSpec":
        return replace(self, candidate_layers=None if layers is None else tuple(layers))

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "classes": list(self.classes),
            "label_tokens": {c: [list(s) for s in seqs] for c, seqs in self.label_tokens.items()},
            "threshold": self.confidence_threshold,
            "candidate_layers": None if self.candidate_layers is None else list(self.candidate_layers),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MatchSpec":
        try:
            return cls(
                task_id=str(data["task_id"]),
                classes=tuple(data["classes"]),
                label_tokens={c: tuple(tuple(s) for s in seqs)
                              for c, seqs in data["label_tokens"].items()},
                confidence_threshold=data.get("threshold", 0.0),
                candidate_layers=data.get("candidate_layers"),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise SpecError(f"malformed task: {exc!r}") from exc


def load_match_spec(path) -> MatchSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            return MatchSpec.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise SpecError(f"{os.fspath(path)}: invalid JSON: {exc}") from exc


@dataclass(frozen=True)
class LatencyRecord:
    layers_executed: int
    layer_fraction: float
    wall_ms: float


@dataclass(frozen=True)
class ExitDecision:
    exited_layer: int
    exited_early: bool
    predicted_class: Optional[str]
    confidence: float
    layers_executed: int
    latency: LatencyRecord
    tokens: TokenSeq = field(default=())


class Match(NamedTuple):
    matched: bool
    label: Optional[str]


Continuation = Callable[[Sequence[int]], Optional[int]]


def read_answer(first: int, spec: MatchSpec,
                continuation: Optional[Continuation] = None) -> Tuple[TokenSeq, Optional[str]]:
    """Greedily extend ``first`` until it spells a mapped sequence.

    Returns the tokens consumed and the class, or ``None`` once no mapped
    sequence can still be completed. Without a continuation only
    single-token labels can match.
    """
    seqs = spec.sequences_starting_with(first)
    tokens = [first]
    while True:
        label = spec.lookup(tokens)
        if label is not None:
            return tuple(tokens), label
        n = len(tokens)
        live = [s for s in seqs if len(s) > n and list(s[:n]) == tokens]
        if not live or continuation is None:
            return tuple(tokens), None
        nxt = continuation(tokens)
        if nxt is None:
            return tuple(tokens), None
        tokens.append(nxt)


def match(decoded: Decoded, spec: MatchSpec,
          continuation: Optional[Continuation] = None) -> Match:
    """Does this layer's readout name one of the task's classes confidently?"""
    if decoded.confidence < spec.confidence_threshold:
        return Match(False, None)
    _, label = read_answer(decoded.token, spec, continuation)
    return Match(label is not None, label)


def layer_continuation(model: LayerStack, inp: TokenInput, layer: int,
                       trace: Optional[List[int]] = None) -> Continuation:
    def _next(tokens: Sequence[int]) -> Optional[int]:
        ext = inp.extend(*tokens)
        if len(ext) > model.config.max_seq:
            return None
        return decode_at_layer(model, forward_to_layer(model, ext, layer, trace)).token
    return _next


def _decision(model: LayerStack, layer: int, label: Optional[str], decoded: Decoded,
              tokens: TokenSeq, t0: float) -> ExitDecision:
    n = model.config.n_layers
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return ExitDecision(
        exited_layer=layer,
        exited_early=layer < n,
        predicted_class=label,
        confidence=decoded.confidence,
        layers_executed=layer,
        latency=LatencyRecord(layer, layer / n, max(wall_ms, 0.0)),
        tokens=tokens,
    )


def run_with_early_exit(model: LayerStack, inp: TokenInput, spec: MatchSpec,
                        trace: Optional[List[int]] = None) -> ExitDecision:
    """Walk the stack one layer at a time and exit at the first candidate
    layer whose readout matches. Falls back to the full-depth prediction."""
    t0 = time.perf_counter()
    n = model.config.n_layers
    candidates = set(spec.layers_for(n))
    for state in iter_layers(model, inp, trace):
        layer = state.layer_index
        if layer == 0 or (layer not in candidates and layer < n):
            continue
        decoded = decode_at_layer(model, state)
        cont = layer_continuation(model, inp, layer, trace)
        if layer in candidates and decoded.confidence >= spec.confidence_threshold:
            tokens, label = read_answer(decoded.token, spec, cont)
            if label is not None or layer == n:
                return _decision(model, layer, label, decoded, tokens, t0)
        elif layer == n:
            tokens, label = read_answer(decoded.token, spec, cont)
            return _decision(model, layer, label, decoded, tokens, t0)
    raise AssertionError("unreachable: loop always returns at full depth")


def predict_at_layer(model: LayerStack, inp: TokenInput, spec: MatchSpec, layer: int,
                     state: Optional[HiddenState] = None,
                     trace: Optional[List[int]] = None) -> Tuple[Optional[str], Decoded, TokenSeq]:
    """Class read out at ``layer`` (0 allowed: embeddings only), no threshold."""
    if state is None:
        state = forward_to_layer(model, inp, layer, trace)
    elif state.layer_index != layer:
        raise LayerRangeError(f"state is at layer {state.layer_index}, expected {layer}")
    decoded = decode_at_layer(model, state)
    cont = layer_continuation(model, inp, layer, trace) if layer >= 1 else None
    tokens, label = read_answer(decoded.token, spec, cont)
    return label, decoded, tokens


def run_fixed_exit(model: LayerStack, inp: TokenInput, spec: MatchSpec, layer: int,
                   trace: Optional[List[int]] = None) -> ExitDecision:
    n = model.config.n_layers
    if not 1 <= layer <= n:
        raise LayerRangeError(f"exit layer {layer} outside [1, {n}]")
    t0 = time.perf_counter()
    label, decoded, tokens = predict_at_layer(model, inp, spec, layer, trace=trace)
    return _decision(model, layer, label, decoded, tokens, t0)


def run_full(model: LayerStack, inp: TokenInput, spec: MatchSpec) -> ExitDecision:
    return run_fixed_exit(model, inp, spec, model.config.n_layers)


__all__ = [
    "MatchSpec", "LatencyRecord", "ExitDecision", "Match", "match", "read_answer",
    "run_with_early_exit", "run_fixed_exit", "run_full", "predict_at_layer",
    "load_match_spec", "layer_continuation",
]
