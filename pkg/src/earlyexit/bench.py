"""Datasets, the 8:1 profiling/eval split, and policy evaluation."""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .engine import ExitDecision, MatchSpec, run_fixed_exit, run_with_early_exit
from .errors import DatasetError, SpecError
from .model import LayerStack, TokenInput

log = logging.getLogger(__name__)

DASH = "−"
ABSENT = "absent"
UNRECOGNIZED = "unrecognized"
DYNAMICS = ("static", "dynamic")


@dataclass(frozen=True, eq=False)
class LabeledExample:
    id: str
    prompt_tokens: Tuple[int, ...]
    label: str
    embedding_prefix: Optional[np.ndarray] = None
    dynamics: Optional[str] = None

    @property
    def token_input(self) -> TokenInput:
        return TokenInput(self.prompt_tokens, self.embedding_prefix)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "prompt_tokens": list(self.prompt_tokens),
            "embedding_prefix": None if self.embedding_prefix is None
            else np.asarray(self.embedding_prefix).tolist(),
            "label": self.label,
            "dynamics": self.dynamics,
        }


@dataclass(frozen=True)
class TaskSpec:
    """A classification task: label matching plus the prompt that frames it.

    ``prompt_template`` holds token ids with ``None`` marking the scene slot.
    """

    task_id: str
    classes: Tuple[str, ...]
    match_spec: MatchSpec
    prompt_template: Tuple[Optional[int], ...] = ()
    dynamics_partition: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.dynamics_partition:
            if set(self.dynamics_partition) != set(self.classes):
                raise SpecError("dynamics partition must cover exactly the task classes")
            bad = {v for v in self.dynamics_partition.values() if v not in DYNAMICS}
            if bad:
                raise SpecError(f"unknown dynamics values {sorted(bad)}")
        if self.prompt_template and sum(t is None for t in self.prompt_template) != 1:
            raise SpecError("prompt_template needs exactly one scene slot (null)")

    @classmethod
    def from_match_spec(cls, spec: MatchSpec, **kw) -> "TaskSpec":
        return cls(spec.task_id, spec.classes, spec, **kw)

    def build_prompt(self, scene_tokens: Sequence[int]) -> Tuple[int, ...]:
        if not self.prompt_template:
            return tuple(scene_tokens)
        out: List[int] = []
        for t in self.prompt_template:
            out.extend(scene_tokens if t is None else [t])
        return tuple(out)

    def to_dict(self) -> dict:
        d = self.match_spec.to_dict()
        if self.prompt_template:
            d["prompt_template"] = list(self.prompt_template)
        if self.dynamics_partition:
            d["dynamics"] = dict(self.dynamics_partition)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskSpec":
        spec = MatchSpec.from_dict(data)
        return cls.from_match_spec(
            spec,
            prompt_template=tuple(data.get("prompt_template") or ()),
            dynamics_partition=dict(data.get("dynamics") or {}),
        )


def load_task(path) -> TaskSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{os.fspath(path)}: invalid JSON: {exc}") from exc
    return TaskSpec.from_dict(data)


def save_task(task: TaskSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(task.to_dict(), indent=2) + "\n")


def _parse_example(lineno: int, obj, classes, vocab_size, d_model) -> LabeledExample:
    def fail(msg):
        raise DatasetError(f"line {lineno}: {msg}")

    if not isinstance(obj, dict):
        fail("expected a JSON object")
    for key in ("id", "prompt_tokens", "label"):
        if key not in obj:
            fail(f"missing field {key!r}")
    label = obj["label"]
    if label not in classes:
        fail(f"label {label!r} not in task classes {list(classes)}")
    tokens = obj["prompt_tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool)
                                               for t in tokens):
        fail("prompt_tokens must be a list of integers")
    if vocab_size is not None:
        for t in tokens:
            if not 0 <= t < vocab_size:
                fail(f"token id {t} outside vocabulary [0, {vocab_size})")
    prefix = obj.get("embedding_prefix")
    if prefix is not None:
        try:
            prefix = np.asarray(prefix, dtype=np.float32)
        except (TypeError, ValueError):
            fail("embedding_prefix must be a list of float vectors")
        if prefix.ndim != 2 or (d_model is not None and prefix.shape[1] != d_model):
            fail("embedding_prefix has the wrong shape")
        if not np.all(np.isfinite(prefix)):
            fail("embedding_prefix contains non-finite values")
    dynamics = obj.get("dynamics")
    if dynamics not in (None,) + DYNAMICS:
        fail(f"dynamics must be 'static', 'dynamic' or null, got {dynamics!r}")
    if not tokens and prefix is None:
        fail("example has no tokens")
    return LabeledExample(str(obj["id"]), tuple(tokens), label, prefix, dynamics)


def load_dataset(path, task, vocab_size: Optional[int] = None,
                 d_model: Optional[int] = None) -> List[LabeledExample]:
    """Read a JSONL dataset, validating labels against ``task`` (a TaskSpec,
    MatchSpec or class list). Order follows the file."""
    classes = getattr(task, "classes", task)
    examples: List[LabeledExample] = []
    seen_ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            ex = _parse_example(lineno, obj, classes, vocab_size, d_model)
            if ex.id in seen_ids:
                raise DatasetError(f"line {lineno}: duplicate id {ex.id!r}")
            seen_ids.add(ex.id)
            examples.append(ex)
    if not examples:
        raise DatasetError("empty dataset")
    return examples


def write_dataset(examples: Sequence[LabeledExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), separators=(",", ":")) + "\n")


def split_sizes(n: int) -> Tuple[int, int]:
    if n < 9:
        return n, 0
    n_profile = (8 * n) // 9
    return n_profile, n - n_profile


def split_dataset(examples: Sequence, seed: int) -> Tuple[list, list]:
    """Stratified 8:1 split: per class, a seeded shuffle sends floor(8n/9)
    examples to profiling and the rest to evaluation. Classes with fewer
    than 9 examples go wholly to profiling. Both halves keep input order."""
    if len(examples) == 0:
        raise DatasetError("cannot split an empty dataset")
    by_class: Dict[str, List[int]] = {}
    for i, ex in enumerate(examples):
        by_class.setdefault(ex.label, []).append(i)
    profiling: List[int] = []
    for label in sorted(by_class):
        idx = by_class[label]
        n_profile, _ = split_sizes(len(idx))
        if len(idx) < 9:
            warnings.warn(f"class {label!r} has only {len(idx)} examples; "
                          "all of them go to the profiling split", stacklevel=2)
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
        perm = rng.permutation(len(idx))
        profiling.extend(idx[j] for j in perm[:n_profile])
    chosen = set(profiling)
    prof = [examples[i] for i in range(len(examples)) if i in chosen]
    ev = [examples[i] for i in range(len(examples)) if i not in chosen]
    return prof, ev


@dataclass(frozen=True)
class Policy:
    """How inference decides where to stop.

    ``full`` runs every layer; ``fixed`` reads out at a profiled layer
    (one for the task, or one per class); ``dynamic`` exits at the first
    matching candidate layer.
    """

    kind: str
    layer: Optional[int] = None
    per_class_layers: Optional[Mapping[str, Optional[int]]] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("full", "fixed", "dynamic"):
            raise ValueError(f"unknown policy {self.kind!r}")

    @classmethod
    def full(cls) -> "Policy":
        return cls("full")

    @classmethod
    def fixed(cls, layer_or_selection) -> "Policy":
        layer = getattr(layer_or_selection, "optimal_layer", layer_or_selection)
        return cls("fixed", layer=layer)

    @classmethod
    def fixed_per_class(cls, layers: Mapping[str, Optional[int]]) -> "Policy":
        return cls("fixed", per_class_layers=dict(layers))

    @classmethod
    def dynamic(cls, threshold: Optional[float] = None) -> "Policy":
        return cls("dynamic", threshold=threshold)

    @property
    def name(self) -> str:
        if self.kind == "fixed":
            if self.per_class_layers is not None:
                return "fixed(per-class)"
            return f"fixed(L={self.layer if self.layer is not None else DASH})"
        if self.kind == "dynamic":
            return "dynamic" if self.threshold is None else f"dynamic(tau={self.threshold:g})"
        return "full"

    def layer_for(self, label: str) -> Optional[int]:
        if self.per_class_layers is not None:
            return self.per_class_layers.get(label)
        return self.layer


@dataclass
class ClassResult:
    name: str
    n: int
    correct: int
    accuracy: Optional[float]          # percent
    layer_fraction: Optional[float]
    wall_ms: Optional[float] = None
    reason: Optional[str] = None       # why the cell renders as a dash

    @property
    def present(self) -> bool:
        return self.reason is None


@dataclass
class EvalResult:
    task_id: str
    policy: str
    n_layers: int
    classes: List[ClassResult]

    def _avg(self, attr: str) -> Optional[float]:
        vals = [getattr(c, attr) for c in self.classes if c.present and getattr(c, attr) is not None]
        return math.fsum(vals) / len(vals) if vals else None

    @property
    def avg_accuracy(self) -> Optional[float]:
        return self._avg("accuracy")

    @property
    def avg_layer_fraction(self) -> Optional[float]:
        return self._avg("layer_fraction")

    @property
    def avg_wall_ms(self) -> Optional[float]:
        return self._avg("wall_ms")

    def by_class(self) -> Dict[str, ClassResult]:
        return {c.name: c for c in self.classes}

    def to_dict(self, timing: bool = False) -> dict:
        rows = []
        for c in self.classes:
            row = {"class": c.name, "n": c.n, "correct": c.correct, "accuracy": c.accuracy,
                   "layer_fraction": c.layer_fraction, "reason": c.reason}
            if timing:
                row["wall_ms"] = c.wall_ms
            rows.append(row)
        out = {"task_id": self.task_id, "policy": self.policy, "n_layers": self.n_layers,
               "classes": rows, "avg": {"accuracy": self.avg_accuracy,
                                        "layer_fraction": self.avg_layer_fraction}}
        if timing:
            out["avg"]["wall_ms"] = self.avg_wall_ms
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalResult":
        classes = [ClassResult(r["class"], r["n"], r["correct"], r["accuracy"],
                               r["layer_fraction"], r.get("wall_ms"), r["reason"])
                   for r in data["classes"]]
        return cls(data["task_id"], data["policy"], data["n_layers"], classes)


def _decide(model: LayerStack, ex, spec: MatchSpec, policy: Policy) -> Optional[ExitDecision]:
    n = model.config.n_layers
    inp = ex.token_input
    if policy.kind == "full":
        return run_fixed_exit(model, inp, spec, n)
    if policy.kind == "dynamic":
        s = spec if policy.threshold is None else spec.with_threshold(policy.threshold)
        return run_with_early_exit(model, inp, s)
    layer = policy.layer_for(ex.label)
    if layer is None:
        return None
    return run_fixed_exit(model, inp, spec, layer)


def evaluate(model: LayerStack, examples: Sequence[LabeledExample], task, policy: Policy,
             jobs: int = 1) -> EvalResult:
    """Per-class accuracy and latency of ``policy`` on ``examples``.

    Latency is the mean fraction of layers executed (deterministic) plus
    mean wall-clock milliseconds (informational).
    """
    spec = task.match_spec if isinstance(task, TaskSpec) else task
    n = model.config.n_layers
    if policy.kind == "fixed" and policy.per_class_layers is None and policy.layer is not None \
            and not 1 <= policy.layer <= n:
        raise ValueError(f"exit layer {policy.layer} outside [1, {n}]")

    def run(ex):
        return _decide(model, ex, spec, policy)

    if jobs and jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            decisions = list(pool.map(run, examples))
    else:
        decisions = [run(ex) for ex in examples]

    grouped: Dict[str, List[Tuple[LabeledExample, Optional[ExitDecision]]]] = {}
    for ex, d in zip(examples, decisions):
        grouped.setdefault(ex.label, []).append((ex, d))

    rows = []
    for cls in spec.classes:
        pairs = grouped.get(cls, [])
        if not pairs:
            rows.append(ClassResult(cls, 0, 0, None, None, None, ABSENT))
            continue
        if any(d is None for _, d in pairs):
            rows.append(ClassResult(cls, len(pairs), 0, None, None, None, UNRECOGNIZED))
            continue
        correct = sum(d.predicted_class == ex.label for ex, d in pairs)
        layers = sum(d.layers_executed for _, d in pairs)
        frac = float(Fraction(layers, len(pairs) * n))
        wall = math.fsum(d.latency.wall_ms for _, d in pairs) / len(pairs)
        rows.append(ClassResult(cls, len(pairs), correct, 100.0 * correct / len(pairs), frac, wall))
    return EvalResult(spec.task_id, policy.name, n, rows)


@dataclass
class ClassDelta:
    name: str
    accuracy_delta: Optional[float]        # percentage points
    latency_improvement: Optional[float]   # percent, by layer count
    wall_improvement: Optional[float] = None


def improvement(base: Optional[float], new: Optional[float]) -> Optional[float]:
    if base is None or new is None or base == 0:
        return None
    return 100.0 * (base - new) / base


def compare(baseline: EvalResult, candidate: EvalResult) -> List[ClassDelta]:
    """Per-class deltas of ``candidate`` against ``baseline`` plus an Avg row."""
    out = []
    cand = candidate.by_class()
    for b in baseline.classes:
        c = cand.get(b.name)
        if c is None or not (b.present and c.present):
            out.append(ClassDelta(b.name, None, None, None))
            continue
        out.append(ClassDelta(b.name, c.accuracy - b.accuracy,
                              improvement(b.layer_fraction, c.layer_fraction),
                              improvement(b.wall_ms, c.wall_ms)))
    acc_delta = None
    if baseline.avg_accuracy is not None and candidate.avg_accuracy is not None:
        acc_delta = candidate.avg_accuracy - baseline.avg_accuracy
    out.append(ClassDelta("Avg", acc_delta,
                          improvement(baseline.avg_layer_fraction, candidate.avg_layer_fraction),
                          improvement(baseline.avg_wall_ms, candidate.avg_wall_ms)))
    return out
