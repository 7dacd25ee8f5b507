"""Synthetic models with a known exit layer.

A planted model keeps two blocks in its residual stream: an identity block
holding the current token's one-hot embedding, and an answer block the
unembedding also reads. Before the plant layer only the identity block is
populated, so the logit lens echoes the input token. At the plant layer a
dedicated feed-forward unit per key token writes the label's answer
direction with a margin large enough to dominate every later readout. All
other weights are small noise, so the surrounding layers are close to
identity maps.
"""
from __future__ import annotations

from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import PlantError
from .model import DTYPE, LayerStack, ModelConfig, TransformerLayer, gelu, layer_norm

LABEL_GAIN = 4.0
DISTRACTOR_GAIN = 8.0
NOISE = 0.01


def _noise_layer(rng: np.random.Generator, cfg: ModelConfig, scale: float) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    return {
        "ln1_weight": np.ones(d), "ln1_bias": np.zeros(d),
        "w_q": rng.normal(0, scale, (d, d)), "w_k": rng.normal(0, scale, (d, d)),
        "w_v": rng.normal(0, scale, (d, d)), "w_o": rng.normal(0, scale, (d, d)),
        "ln2_weight": np.ones(d), "ln2_bias": np.zeros(d),
        "w_in": rng.normal(0, scale, (d, f)), "b_in": np.zeros(f),
        "w_out": rng.normal(0, scale, (f, d)), "b_out": np.zeros(d),
    }


def _detector_activation(ideal: np.ndarray, idx: int, threshold: float, gain: float) -> float:
    ln = layer_norm(ideal.astype(DTYPE), np.float32(1), np.float32(0))
    return float(gelu(np.float32(gain * (ln[idx] - threshold))))


def build_planted_model(
    n_layers: int,
    plant_layer: int,
    key_to_label: Mapping[int, int],
    seed: int,
    *,
    vocab_size: Optional[int] = None,
    n_heads: int = 4,
    max_seq: int = 32,
    distractors: Optional[Mapping[int, Tuple[int, int]]] = None,
    noise: float = NOISE,
) -> LayerStack:
    """Build a model whose logit-lens answer for ``key`` becomes
    ``key_to_label[key]`` exactly at ``plant_layer`` and stays there.

    ``distractors`` maps a key to ``(layer, wrong_token)``; at that layer
    (which must be above the plant) the key's answer is overwritten, which
    reproduces over-inference on purpose.
    """
    if not key_to_label:
        raise PlantError("key_to_label must not be empty")
    if not 1 <= plant_layer <= n_layers:
        raise PlantError(f"plant layer {plant_layer} outside [1, {n_layers}]")
    distractors = dict(distractors or {})
    ids = list(key_to_label) + list(key_to_label.values())
    ids += [tok for _, tok in distractors.values()]
    if vocab_size is None:
        vocab_size = max(32, max(ids) + 1)
    if min(ids) < 0 or max(ids) >= vocab_size:
        raise PlantError(f"token ids must lie in [0, {vocab_size})")
    for key, label in key_to_label.items():
        if key == label:
            raise PlantError(f"key {key} cannot map to itself")
    for key, (layer, wrong) in distractors.items():
        if key not in key_to_label:
            raise PlantError(f"distractor key {key} is not planted")
        if not plant_layer < layer <= n_layers:
            raise PlantError(f"distractor layer {layer} must lie in ({plant_layer}, {n_layers}]")
        if wrong == key_to_label[key]:
            raise PlantError("distractor token equals the planted label")

    v = vocab_size
    d_model = 2 * v
    while d_model % n_heads:
        d_model += 1
    n_units = len(key_to_label) + len(distractors)
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads,
                      d_ff=max(32, n_units + 8), vocab_size=v, max_seq=max_seq)
    rng = np.random.default_rng(seed)

    ident = np.eye(v, d_model)          # token t -> identity dim t
    answer = np.zeros((v, d_model))
    answer[np.arange(v), v + np.arange(v)] = 1.0   # token t -> answer dim v + t
    token_embedding = ident + rng.normal(0, noise, (v, d_model))
    position_embedding = rng.normal(0, noise, (max_seq, d_model))
    unembedding = (ident + answer).T

    layers = [_noise_layer(rng, cfg, noise) for _ in range(n_layers)]

    # key detectors at the plant layer; input there is ~ one-hot identity
    planted = layers[plant_layer - 1]
    thresh = np.sqrt(d_model) / 2
    for unit, (key, label) in enumerate(sorted(key_to_label.items())):
        act = _detector_activation(ident[key], key, thresh, 1.0)
        planted["w_in"][:, unit] = ident[key]
        planted["b_in"][unit] = -thresh
        planted["w_out"][unit] = answer[label] * (LABEL_GAIN / act)

    # distractors see identity + LABEL_GAIN * answer; threshold sits between
    # the key's normalized activation and everyone else's
    unit = len(key_to_label)
    for key, (layer, wrong) in sorted(distractors.items()):
        ideal = ident[key] + LABEL_GAIN * answer[key_to_label[key]]
        ln_key = float(layer_norm(ideal.astype(DTYPE), np.float32(1), np.float32(0))[key])
        thresh_d = ln_key / 2
        gain = 4.0
        act = _detector_activation(ideal, key, thresh_d, gain)
        target = layers[layer - 1]
        target["w_in"][:, unit] = gain * ident[key]
        target["b_in"][unit] = -gain * thresh_d
        target["w_out"][unit] = answer[wrong] * (DISTRACTOR_GAIN / act)
        unit += 1

    tensors: Dict[str, np.ndarray] = {
        "token_embedding": token_embedding,
        "position_embedding": position_embedding,
        "final_norm.weight": np.ones(d_model),
        "final_norm.bias": np.zeros(d_model),
        "unembedding": unembedding,
    }
    for i, layer in enumerate(layers):
        for name in TransformerLayer.tensor_names():
            tensors[f"layers.{i}.{name}"] = layer[name]
    return LayerStack.from_named_tensors(cfg, tensors)


def build_random_model(config: ModelConfig, seed: int, scale: float = 1.0) -> LayerStack:
    """Gaussian-initialised toy model; weights scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def w(fan_in, shape):
        return rng.normal(0, scale / np.sqrt(fan_in), shape)

    tensors: Dict[str, np.ndarray] = {
        "token_embedding": rng.normal(0, 1.0, (v, d)),
        "position_embedding": rng.normal(0, 0.1, (config.max_seq, d)),
    }
    for i in range(config.n_layers):
        layer = {
            "ln1_weight": 1 + rng.normal(0, 0.1, d), "ln1_bias": rng.normal(0, 0.1, d),
            "w_q": w(d, (d, d)), "w_k": w(d, (d, d)), "w_v": w(d, (d, d)), "w_o": w(d, (d, d)),
            "ln2_weight": 1 + rng.normal(0, 0.1, d), "ln2_bias": rng.normal(0, 0.1, d),
            "w_in": w(d, (d, f)), "b_in": rng.normal(0, 0.1, f),
            "w_out": w(f, (f, d)), "b_out": rng.normal(0, 0.1, d),
        }
        for name, value in layer.items():
            tensors[f"layers.{i}.{name}"] = value
    tensors["final_norm.weight"] = 1 + rng.normal(0, 0.1, d)
    tensors["final_norm.bias"] = rng.normal(0, 0.1, d)
    tensors["unembedding"] = w(d, (d, v))
    return LayerStack.from_named_tensors(config, tensors)
