"""Causal selection of an exit layer.

The procedure runs in three stages:

* clean run: accuracy with every layer executed;
* corrupted run: accuracy as layers are removed from the top of the stack;
* restoration and explore: layers above the candidate are added back to
  confirm full depth recovers the clean accuracy, then layers below it are
  probed for a cheaper exit that is at least as accurate.

Accuracy at depth L is the fraction of labelled prompts whose logit-lens
readout at L maps to the correct class. Search helpers take an
``accuracy(L)`` callable so they can run on measured or synthetic profiles.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .engine import MatchSpec, predict_at_layer
from .errors import LayerRangeError, ProfileError
from .model import HiddenState, LayerStack, TokenInput, iter_layers, step

STAGED = "staged"
EXHAUSTIVE = "exhaustive"
MODES = (STAGED, EXHAUSTIVE)
DEFAULT_PATIENCE = 2

AccuracyFn = Callable[[int], float]


@dataclass
class LayerAccuracyProfile:
    task_id: str
    n_layers: int
    n_examples: int
    acc: Dict[int, float] = field(default_factory=dict)
    correct: Dict[int, int] = field(default_factory=dict)
    acc_clean: float = 0.0
    clean_correct: int = 0
    restoration_acc: Dict[int, float] = field(default_factory=dict)
    restoration_correct: Dict[int, int] = field(default_factory=dict)
    viable_layer: Optional[int] = None

    @property
    def evaluated_layers(self) -> List[int]:
        return sorted(self.acc)

    def record(self, layer: int, n_correct: int) -> float:
        self.correct[layer] = n_correct
        self.acc[layer] = n_correct / self.n_examples
        return self.acc[layer]


@dataclass(frozen=True)
class ExitLayerSelection:
    task_id: str
    optimal_layer: Optional[int]
    acc_at_optimal: float
    restoration_validated: bool
    search_mode: str


@dataclass(frozen=True)
class TreatmentEffectReport:
    task_id: str
    reference_layer: int
    te: Dict[int, float]
    ate: float
    partial: bool = False


class LayerScorer:
    """Counts correct predictions per depth, caching hidden states so each
    layer runs at most once per example."""

    def __init__(self, model: LayerStack, inputs: Sequence[TokenInput],
                 labels: Sequence[str], spec: MatchSpec, jobs: int = 1):
        if len(inputs) == 0:
            raise ProfileError("example set is empty")
        if len(inputs) != len(labels):
            raise ProfileError("inputs and labels differ in length")
        self.model = model
        self.inputs = list(inputs)
        self.labels = list(labels)
        self.spec = spec
        self.jobs = max(1, int(jobs or 1))
        self._states: List[List[HiddenState]] = [[] for _ in self.inputs]
        self._counts: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.inputs)

    def _state(self, i: int, layer: int) -> HiddenState:
        cache = self._states[i]
        if not cache:
            cache.append(next(iter_layers(self.model, self.inputs[i])))
        while len(cache) <= layer:
            cache.append(step(self.model, cache[-1]))
        return cache[layer]

    def _is_correct(self, i: int, layer: int) -> bool:
        label, _, _ = predict_at_layer(self.model, self.inputs[i], self.spec, layer,
                                       state=self._state(i, layer))
        return label is not None and label == self.labels[i]

    def correct(self, layer: int) -> int:
        n = self.model.config.n_layers
        if not 0 <= layer <= n:
            raise LayerRangeError(f"layer {layer} outside [0, {n}]")
        if layer not in self._counts:
            idx = range(len(self.inputs))
            if self.jobs > 1:
                with ThreadPoolExecutor(self.jobs) as pool:
                    hits = list(pool.map(lambda i: self._is_correct(i, layer), idx))
            else:
                hits = [self._is_correct(i, layer) for i in idx]
            self._counts[layer] = sum(hits)
        return self._counts[layer]

    def accuracy(self, layer: int) -> float:
        return self.correct(layer) / len(self.inputs)


# pure search helpers ------------------------------------------------------

def best_layer(acc: Mapping[int, float]) -> Optional[int]:
    """Smallest layer >= 1 attaining the maximum accuracy."""
    layers = [layer for layer in acc if layer >= 1]
    if not layers:
        return None
    top = max(acc[layer] for layer in layers)
    return min(layer for layer in layers if acc[layer] == top)


def explore(accuracy: AccuracyFn, candidate: int, patience: int = DEFAULT_PATIENCE,
            seen: Optional[Dict[int, float]] = None, budget: Optional[int] = None) -> int:
    """Probe layers below ``candidate``; return the smallest layer with the
    best accuracy seen.

    Descent stops after ``patience`` consecutive layers that fall strictly
    below the running best, after ``budget`` probes, or at layer 1.
    """
    if candidate < 1:
        raise LayerRangeError("candidate must be >= 1")
    seen = {} if seen is None else seen
    if candidate not in seen:
        seen[candidate] = accuracy(candidate)
    best = seen[candidate]
    drops = 0
    probes = 0
    layer = candidate - 1
    while layer >= 1 and drops < patience and (budget is None or probes < budget):
        if layer not in seen:
            seen[layer] = accuracy(layer)
            probes += 1
        value = seen[layer]
        if value < best:
            drops += 1
        else:
            best = value
            drops = 0
        layer -= 1
    return best_layer(seen)


def corrupted_scan(accuracy: AccuracyFn, n_layers: int,
                   seen: Dict[int, float]) -> Optional[int]:
    """Remove layers from the top until one matches or beats the clean
    accuracy. Returns that layer, or ``None`` if none does."""
    clean = seen[n_layers] if n_layers in seen else accuracy(n_layers)
    seen[n_layers] = clean
    for layer in range(n_layers - 1, 0, -1):
        if layer not in seen:
            seen[layer] = accuracy(layer)
        if seen[layer] >= clean:
            return layer
    return None


def staged_search(accuracy: AccuracyFn, n_layers: int,
                  patience: int = DEFAULT_PATIENCE) -> Tuple[Optional[int], Dict[int, float]]:
    seen: Dict[int, float] = {}
    viable = corrupted_scan(accuracy, n_layers, seen)
    if viable is None:
        return best_layer(seen), seen
    explore(accuracy, viable, patience, seen)
    return best_layer(seen), seen


# stages on a real model ---------------------------------------------------

def _split(examples) -> Tuple[List[TokenInput], List[str]]:
    inputs, labels = [], []
    for ex in examples:
        if hasattr(ex, "token_input"):
            inputs.append(ex.token_input)
            labels.append(ex.label)
        else:
            x, y = ex
            inputs.append(x)
            labels.append(y)
    if not inputs:
        raise ProfileError("example set is empty")
    return inputs, labels


def _scorer(model, examples, spec, jobs=1) -> LayerScorer:
    if isinstance(examples, LayerScorer):
        return examples
    inputs, labels = _split(examples)
    return LayerScorer(model, inputs, labels, spec, jobs)


def clean_run(model: LayerStack, examples, spec: MatchSpec, jobs: int = 1) -> float:
    """Full-depth accuracy. ``examples`` are ``(TokenInput, label)`` pairs or
    objects with ``token_input`` and ``label``."""
    return _scorer(model, examples, spec, jobs).accuracy(model.config.n_layers)


def corrupted_run(model: LayerStack, examples, spec: MatchSpec, mode: str = STAGED,
                  jobs: int = 1, scorer: Optional[LayerScorer] = None) -> LayerAccuracyProfile:
    """Accuracy as layers are stripped from the top.

    Exhaustive mode scores every depth 0..N. Staged mode descends from N-1
    and stops at the first layer matching the clean accuracy.
    """
    if mode not in MODES:
        raise ProfileError(f"unknown mode {mode!r}")
    scorer = scorer or _scorer(model, examples, spec, jobs)
    n = model.config.n_layers
    profile = LayerAccuracyProfile(spec.task_id, n, len(scorer))
    if mode == EXHAUSTIVE:
        for layer in range(n + 1):
            profile.record(layer, scorer.correct(layer))
    else:
        seen: Dict[int, float] = {}
        profile.viable_layer = corrupted_scan(scorer.accuracy, n, seen)
        for layer in sorted(seen):
            profile.record(layer, scorer.correct(layer))
    profile.clean_correct = scorer.correct(n)
    profile.acc_clean = profile.clean_correct / len(scorer)
    return profile


def restoration_run(model: LayerStack, examples, spec: MatchSpec, candidate: int,
                    profile: Optional[LayerAccuracyProfile] = None,
                    clean_correct: Optional[int] = None, jobs: int = 1) -> bool:
    """Add layers back above ``candidate`` and confirm full depth recovers the
    clean accuracy. Counts are recomputed from scratch, not reused."""
    n = model.config.n_layers
    if not 1 <= candidate <= n:
        raise LayerRangeError(f"candidate {candidate} outside [1, {n}]")
    if isinstance(examples, LayerScorer):
        examples = list(zip(examples.inputs, examples.labels))
    fresh = _scorer(model, examples, spec, jobs)
    if clean_correct is None:
        clean_correct = profile.clean_correct if profile is not None else \
            _scorer(model, examples, spec, jobs).correct(n)
    # layer N is always recomputed, even when nothing sits above the candidate
    for layer in range(candidate + 1, n + 1) if candidate < n else (n,):
        if profile is not None:
            profile.restoration_correct[layer] = fresh.correct(layer)
            profile.restoration_acc[layer] = fresh.accuracy(layer)
    return fresh.correct(n) == clean_correct


def explore_run(model: LayerStack, examples, spec: MatchSpec, candidate: int,
                patience: int = DEFAULT_PATIENCE, budget: Optional[int] = None,
                jobs: int = 1) -> int:
    n = model.config.n_layers
    if not 1 <= candidate <= n:
        raise LayerRangeError(f"candidate {candidate} outside [1, {n}]")
    scorer = _scorer(model, examples, spec, jobs)
    return explore(scorer.accuracy, candidate, patience, budget=budget)


def select_optimal_layer(model: LayerStack, examples, spec: MatchSpec, mode: str = STAGED,
                         jobs: int = 1, patience: int = DEFAULT_PATIENCE
                         ) -> Tuple[ExitLayerSelection, LayerAccuracyProfile]:
    """Run clean, corrupted, restoration and explore; return L* and the profile.

    Candidates that fail restoration are dropped and the next best evaluated
    layer is tried. ``optimal_layer`` is ``None`` when no candidate layer
    gets a single example right.
    """
    scorer = _scorer(model, examples, spec, jobs)
    n = model.config.n_layers
    scorer.correct(n)
    profile = corrupted_run(model, scorer, spec, mode, scorer=scorer)
    pairs = list(zip(scorer.inputs, scorer.labels))
    validated: Dict[int, bool] = {}

    def restored(layer: int) -> bool:
        if layer not in validated:
            validated[layer] = restoration_run(model, pairs, spec, layer, profile,
                                               profile.clean_correct, jobs)
        return validated[layer]

    if mode == STAGED and profile.viable_layer is not None:
        restored(profile.viable_layer)
        seen = dict(profile.acc)
        explore(scorer.accuracy, profile.viable_layer, patience, seen)
        for layer in sorted(set(seen) - set(profile.acc)):
            profile.record(layer, scorer.correct(layer))

    ranked = sorted((layer for layer in profile.acc if layer >= 1),
                    key=lambda layer: (-profile.acc[layer], layer))
    for layer in ranked:
        if profile.acc[layer] == 0.0:
            break
        if restored(layer):
            return ExitLayerSelection(spec.task_id, layer, profile.acc[layer], True, mode), profile
    return ExitLayerSelection(spec.task_id, None, 0.0, False, mode), profile


def treatment_effect(profile: LayerAccuracyProfile | Mapping[int, float] | Sequence[float],
                     reference_layer: int, task_id: Optional[str] = None,
                     partial: Optional[bool] = None) -> TreatmentEffectReport:
    """te[L] = acc[L*] - acc[L] over evaluated layers; ate is their mean."""
    if isinstance(profile, LayerAccuracyProfile):
        acc = profile.acc
        task_id = task_id or profile.task_id
        if partial is None:
            partial = len(acc) < profile.n_layers + 1
    elif isinstance(profile, Mapping):
        acc = dict(profile)
    else:
        acc = dict(enumerate(profile))
    if reference_layer not in acc:
        raise ProfileError(f"reference layer {reference_layer} was not evaluated")
    ref = acc[reference_layer]
    te = {layer: ref - acc[layer] for layer in sorted(acc)}
    ate = math.fsum(te.values()) / len(te)
    return TreatmentEffectReport(task_id or "", reference_layer, te, ate, bool(partial))


# serialization ------------------------------------------------------------

def report_dict(selection: ExitLayerSelection, profile: LayerAccuracyProfile,
                te: Optional[TreatmentEffectReport]) -> dict:
    return {
        "task_id": selection.task_id,
        "mode": selection.search_mode,
        "n_layers": profile.n_layers,
        "n_examples": profile.n_examples,
        "acc_clean": profile.acc_clean,
        "acc": {str(k): profile.acc[k] for k in sorted(profile.acc)},
        "evaluated_layers": profile.evaluated_layers,
        "restoration_acc": {str(k): profile.restoration_acc[k] for k in sorted(profile.restoration_acc)},
        "optimal_layer": selection.optimal_layer,
        "restoration_validated": selection.restoration_validated,
        "te": None if te is None else {str(k): v for k, v in te.te.items()},
        "ate": None if te is None else te.ate,
        "partial": (len(profile.acc) < profile.n_layers + 1) if te is None else te.partial,
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, ensure_ascii=False) + "\n"


def profile_task(model: LayerStack, examples, spec: MatchSpec, mode: str = STAGED,
                 jobs: int = 1, patience: int = DEFAULT_PATIENCE) -> dict:
    """Select L* and compute its treatment effects; returns the JSON report."""
    selection, profile = select_optimal_layer(model, examples, spec, mode, jobs, patience)
    te = None
    if selection.optimal_layer is not None:
        te = treatment_effect(profile, selection.optimal_layer)
    return report_dict(selection, profile, te)
