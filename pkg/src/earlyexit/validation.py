"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .errors import InputError, LayerRangeError
from .model import ModelConfig, TokenInput, as_token_input


def check_token_inputs(X, config: Optional[ModelConfig] = None) -> List[TokenInput]:
    """Coerce ``X`` into a list of TokenInput.

    Accepts TokenInput objects, token-id sequences, objects with a
    ``token_input`` attribute, or a 2-D integer array (one prompt per row).
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise InputError("X must be a sequence of prompts")
    if len(X) == 0:
        raise InputError("X is empty")
    out = []
    for i, x in enumerate(X):
        inp = x.token_input if hasattr(x, "token_input") else as_token_input(x)
        if config is not None:
            if len(inp) > config.max_seq:
                raise InputError(f"prompt {i} has length {len(inp)} > max_seq={config.max_seq}")
            for t in inp.token_ids:
                if not 0 <= t < config.vocab_size:
                    raise InputError(f"prompt {i}: token id {t} outside [0, {config.vocab_size})")
        out.append(inp)
    return out


def check_labels(y, classes: Sequence[str], n: Optional[int] = None) -> List[str]:
    labels = [str(v) for v in y]
    if n is not None and len(labels) != n:
        raise InputError(f"got {len(labels)} labels for {n} prompts")
    unknown = sorted(set(labels) - set(classes))
    if unknown:
        raise InputError(f"labels {unknown} not in classes {list(classes)}")
    return labels


def check_layer(layer, n_layers: int, allow_zero: bool = False) -> int:
    lo = 0 if allow_zero else 1
    if isinstance(layer, bool) or not isinstance(layer, (int, np.integer)):
        raise LayerRangeError(f"layer must be an integer, got {layer!r}")
    if not lo <= layer <= n_layers:
        raise LayerRangeError(f"layer {layer} outside [{lo}, {n_layers}]")
    return int(layer)
