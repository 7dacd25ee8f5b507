"""Ready-made planted tasks: a model, a task file and a labelled dataset that
agree with each other."""
from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from .bench import LabeledExample, TaskSpec
from .engine import MatchSpec
from .model import LayerStack
from .planted import build_planted_model

PROMPT_TEMPLATE = (1, 2, 3, None)
FILLERS = (4, 5, 6, 7)

# class -> {scene key token: label token}; 23 is a synonym spelling of vehicle
WAYMO_KEYS: Dict[str, Dict[int, int]] = {
    "bike": {8: 20, 9: 20},
    "person": {10: 21, 11: 21},
    "vehicle": {12: 22, 13: 22, 14: 23},
}
WAYMO_LABELS = {"bike": [[20]], "person": [[21]], "vehicle": [[22], [23]]}
DISTRACTED_KEY = 9
DISTRACTOR_TOKEN = 24


def waymo_task(task_id: str = "waymo", threshold: float = 0.0) -> TaskSpec:
    spec = MatchSpec(task_id, tuple(WAYMO_LABELS),
                     {c: tuple(tuple(s) for s in seqs) for c, seqs in WAYMO_LABELS.items()},
                     confidence_threshold=threshold)
    return TaskSpec.from_match_spec(spec, prompt_template=PROMPT_TEMPLATE,
                                    dynamics_partition={"bike": "dynamic", "person": "dynamic",
                                                        "vehicle": "dynamic"})


def disjoint_task(task_id: str = "unrecognized", vocab_size: int = 32) -> TaskSpec:
    """Task whose label tokens lie outside the model vocabulary."""
    labels = {c: ((vocab_size + 100 + i,),) for i, c in enumerate(WAYMO_LABELS)}
    spec = MatchSpec(task_id, tuple(WAYMO_LABELS), labels)
    return TaskSpec.from_match_spec(spec, prompt_template=PROMPT_TEMPLATE)


def planted_model(n_layers: int, plant_layer: int, seed: int,
                  distractor_layer: Optional[int] = None) -> LayerStack:
    key_to_label = {k: v for keys in WAYMO_KEYS.values() for k, v in keys.items()}
    distractors = None
    if distractor_layer is not None:
        distractors = {DISTRACTED_KEY: (distractor_layer, DISTRACTOR_TOKEN)}
    return build_planted_model(n_layers, plant_layer, key_to_label, seed, distractors=distractors)


def planted_examples(task: TaskSpec, per_class: int, seed: int,
                     single_distracted: bool = False) -> List[LabeledExample]:
    """``per_class`` prompts per class, each ending in one of the class's key
    tokens. With ``single_distracted`` the distracted key appears exactly once."""
    rng = np.random.default_rng(seed)
    out: List[LabeledExample] = []
    for cls, keys in WAYMO_KEYS.items():
        pool = list(keys)
        if single_distracted and DISTRACTED_KEY in pool:
            pool.remove(DISTRACTED_KEY)
        for i in range(per_class):
            if single_distracted and cls == "bike" and i == 0:
                key = DISTRACTED_KEY
            else:
                key = pool[i % len(pool)]
            n_fill = int(rng.integers(0, 4))
            scene = [int(t) for t in rng.choice(FILLERS, size=n_fill)] + [key]
            out.append(LabeledExample(f"{cls}-{i:04d}", task.build_prompt(scene), cls))
    return out


def planted_fixture(n_layers: int = 8, plant_layer: int = 5, seed: int = 0, per_class: int = 27,
                    distractor_layer: Optional[int] = None
                    ) -> Tuple[LayerStack, TaskSpec, List[LabeledExample]]:
    model = planted_model(n_layers, plant_layer, seed, distractor_layer)
    task = waymo_task()
    examples = planted_examples(task, per_class, seed,
                                single_distracted=distractor_layer is not None)
    return model, task, examples
