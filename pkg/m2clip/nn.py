"""Parameter containers and the frozen transformer building blocks."""

import logging
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .exceptions import ConfigurationError
from .tensor import (
    Parameter,
    Tensor,
    add,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
    swapaxes,
)

logger = logging.getLogger(__name__)


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Gaussian init snapped to the float32 grid so f32 checkpoints are lossless"""
    values = rng.normal(0.0, std, size=shape)
    return values.astype(np.float32).astype(np.float64)


def init_scaled(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Fan-in scaled Gaussian for frozen projection matrices"""
    return init_normal(rng, (fan_in, fan_out), std=1.0 / np.sqrt(fan_in))


class Module:
    """Minimal parameter tree.

    Parameters and sub-modules are discovered from instance attributes in
    insertion order, so names are stable across runs, e.g.
    ``video.layer3.adapter.w_dn``. Dict attributes contribute their keys.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            yield from _walk(value, f"{prefix}{attr}")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, param in self.named_parameters(prefix):
            if name in seen:
                raise ConfigurationError(f"Duplicate parameter name: {name}")
            seen.add(name)
            param.name = name


def _walk(value, name: str) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


class Linear(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_features: int,
        out_features: int,
        bias: bool = True,
        trainable: bool = False,
        std: Optional[float] = None,
        zero_init: bool = False,
    ):
        if zero_init:
            weight = np.zeros((in_features, out_features))
        elif std is None:
            weight = init_scaled(rng, in_features, out_features)
        else:
            weight = init_normal(rng, (in_features, out_features), std=std)
        self.weight = Parameter(weight, trainable=trainable)
        self.bias = Parameter(np.zeros(out_features), trainable=trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, trainable: bool = False):
        self.gamma = Parameter(np.ones(width), trainable=trainable)
        self.beta = Parameter(np.zeros(width), trainable=trainable)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class AttentionWeights(Module):
    """Query/key/value/output projections, each ``d x d`` plus bias"""

    def __init__(self, rng: np.random.Generator, width: int):
        self.query = Linear(rng, width, width)
        self.key = Linear(rng, width, width)
        self.value = Linear(rng, width, width)
        self.out = Linear(rng, width, width)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, width = x.shape
    x = reshape(x, tuple(lead) + (length, heads, width // heads))
    return swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = swapaxes(x, -3, -2)
    *lead, length, heads, head_width = x.shape
    return reshape(x, tuple(lead) + (length, heads * head_width))


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    weights: AttentionWeights,
    heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product attention ``[..., Lq, d] x [..., Lk, d] -> [..., Lq, d]``.

    ``mask`` is a boolean ``[Lq, Lk]`` array; False entries are never attended.

    Raises:
        ConfigurationError: If ``d`` is not divisible by ``heads``
    """
    width = q_in.shape[-1]
    if heads < 1 or width % heads != 0:
        raise ConfigurationError(f"width {width} is not divisible by {heads} heads")

    q = _split_heads(weights.query(q_in), heads)
    k = _split_heads(weights.key(kv_in), heads)
    v = _split_heads(weights.value(kv_in), heads)

    scale = 1.0 / np.sqrt(width // heads)
    scores = matmul(q, swapaxes(k, -1, -2)) * scale
    attention = softmax(scores, axis=-1, mask=mask)
    return weights.out(_merge_heads(matmul(attention, v)))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, width: int, ratio: int = 4):
        self.fc1 = Linear(rng, width, width * ratio)
        self.fc2 = Linear(rng, width * ratio, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


AdapterFn = Callable[[Tensor], Tensor]


class TransformerLayer(Module):
    """Pre-norm transformer block: ``x + MHSA(LN(x))`` then ``x + FFN(LN(x))``.

    An installed adapter runs at ``adapter_position``: ``before_mhsa`` wraps
    the whole block input, ``before_ffn`` sits between the two residuals.
    """

    def __init__(self, rng: np.random.Generator, width: int, heads: int, mlp_ratio: int = 4):
        if width % heads != 0:
            raise ConfigurationError(f"width {width} is not divisible by {heads} heads")
        self.ln_1 = LayerNorm(width)
        self.attn = AttentionWeights(rng, width)
        self.ln_2 = LayerNorm(width)
        self.mlp = FeedForward(rng, width, mlp_ratio)
        self.heads = heads
        self.adapter: Optional[Module] = None
        self.adapter_position = "before_mhsa"
        self.adapter_fn: Optional[AdapterFn] = None

    def install(self, adapter: Optional[Module], position: str, fn: Optional[AdapterFn]) -> None:
        self.adapter = adapter
        self.adapter_position = position
        self.adapter_fn = fn

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if self.adapter_fn is not None and self.adapter_position == "before_mhsa":
            x = self.adapter_fn(x)
        h = self.ln_1(x)
        x = add(x, multi_head_attention(h, h, self.attn, self.heads, mask=mask))
        if self.adapter_fn is not None and self.adapter_position == "before_ffn":
            x = self.adapter_fn(x)
        return add(x, self.mlp(self.ln_2(x)))
