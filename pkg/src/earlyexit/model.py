"""Layer-indexed decoder-only transformer with truncated forward passes.

Pre-norm blocks with learned absolute positions, float32 throughout. Any
prefix of the layer stack can be run and read out through the shared final
norm and unembedding (logit lens), which is what makes training-free early
exit possible.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InputError, LayerRangeError

DTYPE = np.float32
LN_EPS = np.float32(1e-5)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.max_seq < 1:
            raise ConfigError("max_seq must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_ff < 1:
            raise ConfigError("d_model, n_heads and d_ff must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": int(self.n_layers),
            "d_model": int(self.d_model),
            "n_heads": int(self.n_heads),
            "d_ff": int(self.d_ff),
            "vocab_size": int(self.vocab_size),
            "max_seq": int(self.max_seq),
        }


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=DTYPE, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TransformerLayer:
    ln1_weight: np.ndarray
    ln1_bias: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_weight: np.ndarray
    ln2_bias: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        for name in self.tensor_names():
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @staticmethod
    def tensor_names() -> Tuple[str, ...]:
        return ("ln1_weight", "ln1_bias", "w_q", "w_k", "w_v", "w_o",
                "ln2_weight", "ln2_bias", "w_in", "b_in", "w_out", "b_out")

    @staticmethod
    def tensor_shapes(config: ModelConfig) -> dict:
        d, f = config.d_model, config.d_ff
        return {
            "ln1_weight": (d,), "ln1_bias": (d,),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "ln2_weight": (d,), "ln2_bias": (d,),
            "w_in": (d, f), "b_in": (f,), "w_out": (f, d), "b_out": (d,),
        }


@dataclass(frozen=True, eq=False)
class LayerStack:
    """Immutable transformer weights. Share freely across threads."""

    config: ModelConfig
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: Tuple[TransformerLayer, ...]
    final_norm_weight: np.ndarray
    final_norm_bias: np.ndarray
    unembedding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for name in ("token_embedding", "position_embedding", "final_norm_weight",
                     "final_norm_bias", "unembedding"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if len(self.layers) != self.config.n_layers:
            raise ConfigError(
                f"config declares {self.config.n_layers} layers, got {len(self.layers)}")
        for name, shape in self.tensor_shapes(self.config).items():
            actual = self.named_tensors()[name].shape
            if actual != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {actual}")

    # read-only arrays: copies would only waste memory (sklearn.clone deep-copies params)
    def __copy__(self) -> "LayerStack":
        return self

    def __deepcopy__(self, memo) -> "LayerStack":
        return self

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @staticmethod
    def tensor_shapes(config: ModelConfig) -> dict:
        d, v = config.d_model, config.vocab_size
        shapes = {
            "token_embedding": (v, d),
            "position_embedding": (config.max_seq, d),
        }
        for i in range(config.n_layers):
            for name, shape in TransformerLayer.tensor_shapes(config).items():
                shapes[f"layers.{i}.{name}"] = shape
        shapes["final_norm.weight"] = (d,)
        shapes["final_norm.bias"] = (d,)
        shapes["unembedding"] = (d, v)
        return shapes

    def named_tensors(self) -> dict:
        out = {
            "token_embedding": self.token_embedding,
            "position_embedding": self.position_embedding,
        }
        for i, layer in enumerate(self.layers):
            for name in TransformerLayer.tensor_names():
                out[f"layers.{i}.{name}"] = getattr(layer, name)
        out["final_norm.weight"] = self.final_norm_weight
        out["final_norm.bias"] = self.final_norm_bias
        out["unembedding"] = self.unembedding
        return out

    @classmethod
    def from_named_tensors(cls, config: ModelConfig, tensors: dict) -> "LayerStack":
        layers = []
        for i in range(config.n_layers):
            layers.append(TransformerLayer(
                **{name: tensors[f"layers.{i}.{name}"] for name in TransformerLayer.tensor_names()}))
        return cls(
            config=config,
            token_embedding=tensors["token_embedding"],
            position_embedding=tensors["position_embedding"],
            layers=tuple(layers),
            final_norm_weight=tensors["final_norm.weight"],
            final_norm_bias=tensors["final_norm.bias"],
            unembedding=tensors["unembedding"],
        )


@dataclass(frozen=True, eq=False)
class TokenInput:
    """Prompt token ids, optionally preceded by precomputed feature vectors
    (stand-ins for vision-encoder outputs)."""

    token_ids: Tuple[int, ...]
    embedding_prefix: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if self.embedding_prefix is not None:
            prefix = _frozen(self.embedding_prefix)
            if prefix.ndim != 2:
                raise InputError("embedding_prefix must be a 2-D array")
            object.__setattr__(self, "embedding_prefix", prefix)

    @property
    def prefix_len(self) -> int:
        return 0 if self.embedding_prefix is None else self.embedding_prefix.shape[0]

    def __len__(self) -> int:
        return self.prefix_len + len(self.token_ids)

    def extend(self, *tokens: int) -> "TokenInput":
        return TokenInput(self.token_ids + tuple(tokens), self.embedding_prefix)


@dataclass(frozen=True, eq=False)
class HiddenState:
    values: np.ndarray  # (seq, d_model)
    layer_index: int


@dataclass(frozen=True, eq=False)
class Decoded:
    probs: np.ndarray
    token: int

    @property
    def confidence(self) -> float:
        return float(self.probs[self.token])


def validate_input(model: LayerStack, inp: TokenInput) -> None:
    cfg = model.config
    if len(inp) == 0:
        raise InputError("input is empty")
    if len(inp) > cfg.max_seq:
        raise InputError(f"input length {len(inp)} exceeds max_seq={cfg.max_seq}")
    if inp.embedding_prefix is not None and inp.embedding_prefix.shape[1] != cfg.d_model:
        raise InputError(
            f"embedding_prefix width {inp.embedding_prefix.shape[1]} != d_model={cfg.d_model}")
    for t in inp.token_ids:
        if not 0 <= t < cfg.vocab_size:
            raise InputError(f"token id {t} outside [0, {cfg.vocab_size})")


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return (centered / np.sqrt(var + LN_EPS)) * weight + bias


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    c = np.float32(np.sqrt(2.0 / np.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x ** 3)))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def embed(model: LayerStack, inp: TokenInput) -> np.ndarray:
    validate_input(model, inp)
    tok = model.token_embedding[list(inp.token_ids)] if inp.token_ids else \
        np.zeros((0, model.config.d_model), dtype=DTYPE)
    if inp.embedding_prefix is not None:
        tok = np.concatenate([inp.embedding_prefix, tok], axis=0)
    return (tok + model.position_embedding[: tok.shape[0]]).astype(DTYPE)


def apply_layer(layer: TransformerLayer, x: np.ndarray, n_heads: int) -> np.ndarray:
    seq, d = x.shape
    dh = d // n_heads
    a = layer_norm(x, layer.ln1_weight, layer.ln1_bias)
    q = (a @ layer.w_q).reshape(seq, n_heads, dh).transpose(1, 0, 2)
    k = (a @ layer.w_k).reshape(seq, n_heads, dh).transpose(1, 0, 2)
    v = (a @ layer.w_v).reshape(seq, n_heads, dh).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) / np.float32(np.sqrt(dh))
    mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores = np.where(mask, np.float32(-np.inf), scores)
    attn = softmax(scores) @ v
    x = x + attn.transpose(1, 0, 2).reshape(seq, d) @ layer.w_o
    f = layer_norm(x, layer.ln2_weight, layer.ln2_bias)
    return x + gelu(f @ layer.w_in + layer.b_in) @ layer.w_out + layer.b_out


def forward_to_layer(model: LayerStack, inp: TokenInput, layer: int,
                     trace: Optional[List[int]] = None) -> HiddenState:
    """Embed ``inp`` and run exactly the first ``layer`` transformer layers.

    If ``trace`` is given, the 1-based index of every executed layer is
    appended to it.
    """
    n = model.config.n_layers
    if not 0 <= layer <= n:
        raise LayerRangeError(f"layer {layer} outside [0, {n}]")
    state = HiddenState(embed(model, inp), 0)
    for _ in range(layer):
        state = step(model, state, trace)
    return state


def step(model: LayerStack, state: HiddenState,
         trace: Optional[List[int]] = None) -> HiddenState:
    """Apply the next layer to ``state``."""
    idx = state.layer_index
    if idx >= model.config.n_layers:
        raise LayerRangeError("hidden state is already at full depth")
    values = apply_layer(model.layers[idx], state.values, model.config.n_heads)
    if trace is not None:
        trace.append(idx + 1)
    return HiddenState(values, idx + 1)


def iter_layers(model: LayerStack, inp: TokenInput, trace: Optional[List[int]] = None):
    """Yield hidden states at layers 0..N, each layer executed once."""
    state = HiddenState(embed(model, inp), 0)
    yield state
    while state.layer_index < model.config.n_layers:
        state = step(model, state, trace)
        yield state


def decode_at_layer(model: LayerStack, h: HiddenState) -> Decoded:
    """Logit-lens readout of the last position: final norm, unembed, softmax.

    Ties in the argmax go to the smallest token id.
    """
    if h.values.ndim != 2 or h.values.shape[1] != model.config.d_model:
        raise InputError(
            f"hidden width {h.values.shape[-1]} does not match d_model={model.config.d_model}")
    last = layer_norm(h.values[-1], model.final_norm_weight, model.final_norm_bias)
    probs = softmax(last @ model.unembedding)
    probs.setflags(write=False)
    return Decoded(probs=probs, token=int(np.argmax(probs)))


def logits_at_layer(model: LayerStack, h: HiddenState) -> np.ndarray:
    last = layer_norm(h.values[-1], model.final_norm_weight, model.final_norm_bias)
    return last @ model.unembedding


def next_token_distribution(model: LayerStack, inp: TokenInput) -> Decoded:
    """Full-depth next-token distribution."""
    return decode_at_layer(model, forward_to_layer(model, inp, model.config.n_layers))


def greedy_continue(model: LayerStack, inp: TokenInput, exit_layer: int, max_tokens: int,
                    eos_token: Optional[int] = None,
                    trace: Optional[List[int]] = None) -> List[int]:
    """Greedy autoregressive decoding with every step read out at ``exit_layer``.

    Stops after ``max_tokens`` tokens or right after emitting ``eos_token``.
    """
    n = model.config.n_layers
    if not 1 <= exit_layer <= n:
        raise LayerRangeError(f"exit_layer {exit_layer} outside [1, {n}]")
    if max_tokens < 1:
        raise InputError("max_tokens must be >= 1")
    out: List[int] = []
    cur = inp
    while len(out) < max_tokens:
        if out:
            cur = cur.extend(out[-1])
        tok = decode_at_layer(model, forward_to_layer(model, cur, exit_layer, trace)).token
        out.append(tok)
        if eos_token is not None and tok == eos_token:
            break
    return out


def as_token_input(x) -> TokenInput:
    if isinstance(x, TokenInput):
        return x
    if isinstance(x, (list, tuple, np.ndarray)):
        return TokenInput(tuple(int(t) for t in x))
    raise InputError(f"cannot interpret {type(x).__name__} as a token input")


def as_token_inputs(xs: Sequence) -> List[TokenInput]:
    return [as_token_input(x) for x in xs]
