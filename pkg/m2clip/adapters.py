"""TED-Adapter (temporal enhancement + temporal difference) and the text adapter.

Both adapters start with a zero up-projection, so installing them leaves the
frozen model's outputs bit-identical until the first optimizer step.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Literal

from .exceptions import ConfigurationError
from .nn import Module, init_normal
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    conv1d_temporal,
    conv2d_spatial,
    gelu,
    getitem,
    linear,
    matmul,
    reshape,
    sub,
)

logger = logging.getLogger(__name__)

TEDMode = Literal["parallel", "sequential", "te_only", "td_only"]
SequentialOrder = Literal["te_first", "td_first"]
TED_MODES: Tuple[str, ...] = ("parallel", "sequential", "te_only", "td_only")
SEQUENTIAL_ORDERS: Tuple[str, ...] = ("te_first", "td_first")

VIDEO_POSITIONS: Tuple[str, ...] = ("before_mhsa", "before_ffn")
TEXT_POSITIONS: Tuple[str, ...] = ("before_ffn", "before_mhsa")


def bottleneck_width(width: int, ratio: float) -> int:
    return max(1, int(round(width * ratio)))


class TEDAdapter(Module):
    """Bottleneck adapter with a temporal-enhancement and a temporal-difference branch.

    The down-projection is shared by both branches; the up-bias belongs to
    the enhancement branch only, so the difference branch of a static clip
    is exactly zero.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        width: int,
        bottleneck: int,
        kt: int = 3,
        ks: int = 3,
        std: float = 0.02,
    ):
        for name, k in (("adapter.kt", kt), ("adapter.ks", ks)):
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"{name} must be odd and positive, got {k}")
        self.w_dn = Parameter(init_normal(rng, (width, bottleneck), std))
        self.b_dn = Parameter(np.zeros(bottleneck))
        self.w_up = Parameter(np.zeros((bottleneck, width)))
        self.b_up = Parameter(np.zeros(width))
        self.conv1d_kernel = Parameter(init_normal(rng, (kt, bottleneck, bottleneck), std))
        self.conv1d_bias = Parameter(np.zeros(bottleneck))
        self.conv2d_kernel = Parameter(init_normal(rng, (ks, ks, bottleneck, bottleneck), std))
        self.conv2d_bias = Parameter(np.zeros(bottleneck))
        self.width = width
        self.bottleneck = bottleneck
        self.kt = kt
        self.ks = ks


class TextAdapter(Module):
    """``z + GELU(z W_dn + b_dn) W_up + b_up``"""

    def __init__(self, rng: np.random.Generator, width: int, bottleneck: int, std: float = 0.02):
        self.w_dn = Parameter(init_normal(rng, (width, bottleneck), std))
        self.b_dn = Parameter(np.zeros(bottleneck))
        self.w_up = Parameter(np.zeros((bottleneck, width)))
        self.b_up = Parameter(np.zeros(width))
        self.width = width
        self.bottleneck = bottleneck


def ted_temporal_enhance(z: Tensor, a: TEDAdapter) -> Tensor:
    """``Conv1D(Z W_dn) W_up`` over the frame axis of ``[..., T, L, d_v]``"""
    down = linear(z, a.w_dn, a.b_dn)
    return linear(conv1d_temporal(down, a.conv1d_kernel, a.conv1d_bias), a.w_up, a.b_up)


def ted_temporal_difference(z_patches: Tensor, a: TEDAdapter, hw: Tuple[int, int]) -> Tensor:
    """``Conv2D((z_t - z_{t-1}) W_dn) W_up`` over the patch grid of ``[..., T, M, d_v]``.

    The first frame differences against itself, so its difference is exactly
    zero.

    Raises:
        ConfigurationError: If ``h * w`` does not match the patch count
    """
    h, w = hw
    *lead, frames, patches, width = z_patches.shape
    if h * w != patches:
        raise ConfigurationError(f"patch grid {h}x{w} does not hold {patches} patch tokens")
    lead = tuple(lead)

    first = getitem(z_patches, (Ellipsis, slice(0, 1), slice(None), slice(None)))
    earlier = getitem(z_patches, (Ellipsis, slice(0, frames - 1), slice(None), slice(None)))
    previous = concat([first, earlier], axis=-3)
    diff = matmul(sub(z_patches, previous), a.w_dn)

    grid = reshape(diff, lead + (frames, h, w, a.bottleneck))
    spatial = conv2d_spatial(grid, a.conv2d_kernel, a.conv2d_bias)
    return matmul(reshape(spatial, lead + (frames, patches, a.bottleneck)), a.w_up)


def _difference_with_class_row(z: Tensor, a: TEDAdapter, hw: Tuple[int, int]) -> Tensor:
    patches = getitem(z, (Ellipsis, slice(1, None), slice(None)))
    diff = ted_temporal_difference(patches, a, hw)
    zero_row = np.zeros(z.shape[:-2] + (1, z.shape[-1]))
    return concat([zero_row, diff], axis=-2)


def ted_forward(
    z: Tensor,
    a: TEDAdapter,
    mode: str = "parallel",
    hw: Optional[Tuple[int, int]] = None,
    order: str = "te_first",
) -> Tensor:
    """Apply the adapter to full frame tokens ``[..., T, 1+M, d_v]``.

    ``parallel`` returns ``Z_E + Z_D + Z``; ``sequential`` chains the two
    branches, each with its own residual, in ``order``; ``te_only`` and
    ``td_only`` keep a single branch. The class-token row of ``Z_D`` is zero.
    """
    if hw is None:
        side = int(round(np.sqrt(z.shape[-2] - 1)))
        hw = (side, side)

    if mode == "parallel":
        return add(add(ted_temporal_enhance(z, a), _difference_with_class_row(z, a, hw)), z)
    if mode == "te_only":
        return add(ted_temporal_enhance(z, a), z)
    if mode == "td_only":
        return add(_difference_with_class_row(z, a, hw), z)
    if mode == "sequential":
        if order == "te_first":
            y = add(ted_temporal_enhance(z, a), z)
            return add(_difference_with_class_row(y, a, hw), y)
        if order == "td_first":
            y = add(_difference_with_class_row(z, a, hw), z)
            return add(ted_temporal_enhance(y, a), y)
        raise ConfigurationError(f"Unknown sequential order: {order}")
    raise ConfigurationError(f"Unknown TED mode: {mode}")


def text_adapter_forward(z: Tensor, a: TextAdapter) -> Tensor:
    hidden = gelu(linear(z, a.w_dn, a.b_dn))
    return add(z, linear(hidden, a.w_up, a.b_up))


def parse_layer_set(spec: str, num_layers: int, key: str = "layers") -> Tuple[int, ...]:
    """Resolve a layer selection into sorted 1-based indices.

    Accepted forms: ``all``, ``none`` (or empty), ``front_half``,
    ``back_half``, ``deepest`` / ``deepest:n``, and explicit ``1,2,4``.

    Raises:
        ConfigurationError: On an unknown form or an out-of-range index
    """
    text = spec.strip().lower()
    if text in ("", "none"):
        return ()
    if text == "all":
        return tuple(range(1, num_layers + 1))
    if text == "front_half":
        return tuple(range(1, num_layers // 2 + 1))
    if text == "back_half":
        return tuple(range(num_layers // 2 + 1, num_layers + 1))
    if text.startswith("deepest"):
        _, _, count_text = text.partition(":")
        try:
            count = int(count_text) if count_text else 1
        except ValueError:
            raise ConfigurationError(f"{key}: bad layer count in {spec!r}")
        if not 0 <= count <= num_layers:
            raise ConfigurationError(f"{key}: cannot select {count} of {num_layers} layers")
        return tuple(range(num_layers - count + 1, num_layers + 1))

    try:
        indices = sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse layer set {spec!r}")
    for index in indices:
        if not 1 <= index <= num_layers:
            raise ConfigurationError(f"{key}: layer {index} out of range 1..{num_layers}")
    return tuple(indices)


@dataclass
class AdapterConfig:
    """Adapter shapes.

    Attributes:
        video_ratio: TED bottleneck as a fraction of d_v
        text_ratio: text adapter bottleneck as a fraction of d_l
        kt: temporal kernel size (odd)
        ks: spatial kernel size (odd)
        sequential_order: branch order for ``sequential`` mode
        init_std: Gaussian gain of down-projections and conv kernels
    """

    video_ratio: float = 0.25
    text_ratio: float = 0.25
    kt: int = 3
    ks: int = 3
    sequential_order: SequentialOrder = "te_first"
    init_std: float = 0.02

    def validate(self) -> None:
        if self.video_ratio <= 0 or self.text_ratio <= 0:
            raise ConfigurationError("adapter ratios must be positive")
        for key, k in (("adapter.kt", self.kt), ("adapter.ks", self.ks)):
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"{key} must be odd and positive, got {k}")
        if self.sequential_order not in SEQUENTIAL_ORDERS:
            raise ConfigurationError(
                f"adapter.sequential_order must be one of {SEQUENTIAL_ORDERS}"
            )


@dataclass
class AdapterPlacement:
    """Where adapters go; layer sets use the forms accepted by ``parse_layer_set``"""

    video_layers: str = "all"
    text_layers: str = "deepest"
    ted_mode: TEDMode = "parallel"
    video_position: str = "before_mhsa"
    text_position: str = "before_ffn"

    def validate(self, video_depth: int, text_depth: int) -> None:
        if self.ted_mode not in TED_MODES:
            raise ConfigurationError(f"placement.ted_mode must be one of {TED_MODES}")
        if self.video_position not in VIDEO_POSITIONS:
            raise ConfigurationError(f"placement.video_position must be one of {VIDEO_POSITIONS}")
        if self.text_position not in TEXT_POSITIONS:
            raise ConfigurationError(f"placement.text_position must be one of {TEXT_POSITIONS}")
        self.resolve(video_depth, text_depth)

    def resolve(self, video_depth: int, text_depth: int) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        return (
            parse_layer_set(self.video_layers, video_depth, "placement.video_layers"),
            parse_layer_set(self.text_layers, text_depth, "placement.text_layers"),
        )


class AdapterRegistry:
    """Installed adapters keyed by hierarchical name (``video.layer3.adapter``)"""

    def __init__(self):
        self.video: Dict[int, TEDAdapter] = {}
        self.text: Dict[int, TextAdapter] = {}

    def __len__(self) -> int:
        return len(self.video) + len(self.text)

    def items(self) -> List[Tuple[str, Module]]:
        named: List[Tuple[str, Module]] = []
        named += [(f"video.layer{i}.adapter", a) for i, a in sorted(self.video.items())]
        named += [(f"text.layer{i}.adapter", a) for i, a in sorted(self.text.items())]
        return named

    def parameters(self) -> List[Parameter]:
        return [p for _, adapter in self.items() for p in adapter.parameters()]

    def num_trainable(self) -> int:
        return sum(p.size for p in self.parameters() if p.trainable)


def ted_parameter_count(width: int, bottleneck: int, kt: int, ks: int) -> int:
    """Closed form for one TED-Adapter"""
    projections = width * bottleneck + bottleneck + bottleneck * width + width
    convs = kt * bottleneck * bottleneck + bottleneck + ks * ks * bottleneck * bottleneck + bottleneck
    return projections + convs


def text_adapter_parameter_count(width: int, bottleneck: int) -> int:
    return width * bottleneck + bottleneck + bottleneck * width + width


def adapter_rng(seed: int, tower: int, layer: int) -> np.random.Generator:
    """Per-layer stream so an adapter's init does not depend on the rest of the placement"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, tower, layer)))


def install_adapters(model, placement: AdapterPlacement, cfg: Optional[AdapterConfig] = None) -> AdapterRegistry:
    """Replace the model's adapters according to ``placement``.

    Existing adapters are removed first. New parameters are trainable and
    named after their layer, e.g. ``video.layer3.adapter.w_dn``.

    Args:
        model: A model exposing ``video`` and ``text`` towers and ``seed``
        placement: Layer sets, TED mode and insertion positions
        cfg: Bottleneck ratios and kernel sizes

    Returns:
        The registry of installed adapters

    Raises:
        ConfigurationError: On out-of-range layer indices or bad shapes
    """
    cfg = cfg or AdapterConfig()
    cfg.validate()
    video_tower, text_tower = model.video, model.text
    placement.validate(len(video_tower.layers), len(text_tower.layers))
    video_layers, text_layers = placement.resolve(len(video_tower.layers), len(text_tower.layers))

    for layer in video_tower.layers + text_tower.layers:
        layer.install(None, layer.adapter_position, None)

    registry = AdapterRegistry()
    hw = video_tower.cfg.grid
    video_width = video_tower.cfg.video_width
    for index in video_layers:
        adapter = TEDAdapter(
            adapter_rng(model.seed, 0, index),
            video_width,
            bottleneck_width(video_width, cfg.video_ratio),
            kt=cfg.kt,
            ks=cfg.ks,
            std=cfg.init_std,
        )
        fn = _ted_hook(adapter, placement.ted_mode, hw, cfg.sequential_order)
        video_tower.layer(index).install(adapter, placement.video_position, fn)
        registry.video[index] = adapter

    text_width = text_tower.cfg.text_width
    for index in text_layers:
        adapter = TextAdapter(
            adapter_rng(model.seed, 1, index),
            text_width,
            bottleneck_width(text_width, cfg.text_ratio),
            std=cfg.init_std,
        )
        fn = _text_hook(adapter)
        text_tower.layer(index).install(adapter, placement.text_position, fn)
        registry.text[index] = adapter

    model.assign_names()
    logger.info(
        "Installed %d TED-Adapters (%s, layers %s) and %d text adapters (layers %s): %d trainable",
        len(registry.video),
        placement.ted_mode,
        list(video_layers),
        len(registry.text),
        list(text_layers),
        registry.num_trainable(),
    )
    return registry


def _ted_hook(adapter: TEDAdapter, mode: str, hw: Tuple[int, int], order: str):
    return lambda z: ted_forward(z, adapter, mode, hw, order)


def _text_hook(adapter: TextAdapter):
    return lambda z: text_adapter_forward(z, adapter)


def zero_branch(adapter: TEDAdapter, branch: str) -> None:
    """Zero one branch's private parameters in place (``te`` or ``td``)"""
    names: Sequence[str]
    if branch == "te":
        names = ("conv1d_kernel", "conv1d_bias")
    elif branch == "td":
        names = ("conv2d_kernel", "conv2d_bias")
    else:
        raise ConfigurationError(f"Unknown TED branch: {branch}")
    for name in names:
        getattr(adapter, name).data[...] = 0.0
