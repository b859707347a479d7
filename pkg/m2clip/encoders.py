"""Frozen video and text towers with adapter insertion points."""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .exceptions import ConfigurationError, ContractError
from .nn import Linear, Module, TransformerLayer, init_normal
from .tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    embedding,
    getitem,
    mean,
)
from .tokenizer import TokenSequence, batch_ids

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    """Backbone shape.

    Attributes:
        video_layers: L_v, transformer layers in the video tower
        text_layers: L_l, transformer layers in the text tower
        video_width: d_v
        text_width: d_l
        joint_width: d_vl, width of the joint video-language space
        patch_size: P
        video_heads: attention heads per video layer
        text_heads: attention heads per text layer
        vocab_size: filled from the vocabulary when 0
        max_text_len: padded token sequence length
        num_frames: default clip length T
        image_size: H == W of rendered frames
        mlp_ratio: FFN expansion factor
        init_std: Gaussian gain for embedding tables and tokens
        seed: backbone initialisation seed
    """

    video_layers: int = 4
    text_layers: int = 4
    video_width: int = 64
    text_width: int = 48
    joint_width: int = 32
    patch_size: int = 8
    video_heads: int = 4
    text_heads: int = 4
    vocab_size: int = 0
    max_text_len: int = 12
    num_frames: int = 8
    image_size: int = 32
    mlp_ratio: int = 4
    init_std: float = 0.02
    seed: int = 0

    @property
    def grid(self) -> Tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w

    def validate(self) -> None:
        """Raise ConfigurationError on an inconsistent shape"""
        positive = {
            "video_layers": self.video_layers,
            "text_layers": self.text_layers,
            "video_width": self.video_width,
            "text_width": self.text_width,
            "joint_width": self.joint_width,
            "patch_size": self.patch_size,
            "video_heads": self.video_heads,
            "text_heads": self.text_heads,
            "num_frames": self.num_frames,
            "image_size": self.image_size,
            "mlp_ratio": self.mlp_ratio,
        }
        for key, value in positive.items():
            if value < 1:
                raise ConfigurationError(f"model.{key} must be positive, got {value}")
        if self.max_text_len < 2:
            raise ConfigurationError("model.max_text_len must be at least 2 (SOS and EOS)")
        if self.video_width % self.video_heads:
            raise ConfigurationError(
                f"model.video_width {self.video_width} not divisible by "
                f"model.video_heads {self.video_heads}"
            )
        if self.text_width % self.text_heads:
            raise ConfigurationError(
                f"model.text_width {self.text_width} not divisible by "
                f"model.text_heads {self.text_heads}"
            )
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"model.image_size {self.image_size} not divisible by "
                f"model.patch_size {self.patch_size}"
            )
        if self.init_std <= 0:
            raise ConfigurationError("model.init_std must be positive")


@dataclass
class VideoClip:
    """Normalised pixels ``[T, H, W, 3]``"""

    frames: np.ndarray

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]


@dataclass
class FrameFeatures:
    """Token states ``[..., T, 1+M, d_v]``; index 0 of each frame is the class token"""

    tokens: Tensor

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[-3]


@dataclass
class JointEmbedding:
    vec: Tensor


def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., T, H, W, 3] -> [..., T, M, P*P*3]`` with patches in row-major grid order.

    Raises:
        ConfigurationError: If H or W is not divisible by the patch size
    """
    *lead, height, width, channels = frames.shape
    if height % patch_size or width % patch_size:
        raise ConfigurationError(
            f"frame size {height}x{width} is not divisible by patch size {patch_size}"
        )
    gh, gw = height // patch_size, width // patch_size
    grid = frames.reshape(tuple(lead) + (gh, patch_size, gw, patch_size, channels))
    n = len(lead)
    order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    grid = grid.transpose(order)
    return grid.reshape(tuple(lead) + (gh * gw, patch_size * patch_size * channels))


class VideoEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.video_width
        self.cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch_size * cfg.patch_size * 3, d)
        self.class_token = Parameter(init_normal(rng, (d,), cfg.init_std), trainable=False)
        self.positional = Parameter(
            init_normal(rng, (1 + cfg.num_patches, d), cfg.init_std), trainable=False
        )
        for i in range(1, cfg.video_layers + 1):
            setattr(self, f"layer{i}", TransformerLayer(rng, d, cfg.video_heads, cfg.mlp_ratio))
        self.proj = Linear(rng, d, cfg.joint_width, bias=False)

    def layer(self, index: int) -> TransformerLayer:
        """1-based layer accessor"""
        return getattr(self, f"layer{index}")

    @property
    def layers(self) -> List[TransformerLayer]:
        return [self.layer(i) for i in range(1, self.cfg.video_layers + 1)]

    def __call__(self, frames: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Encode ``[..., T, H, W, 3]`` into ``(v [..., d_vl], frame_embeds [..., T, d_vl])``"""
        features = video_encoder_forward(patchify_and_embed(VideoClip(frames), self), self)
        frame_embeds = frame_embeddings(features, self)
        return mean(frame_embeds, axis=-2), frame_embeds


def patchify_and_embed(clip: VideoClip, encoder: VideoEncoder) -> FrameFeatures:
    """``[C_t, X_t] + e_v`` per frame, with a shared class token and positional table"""
    cfg = encoder.cfg
    patches = patchify(np.asarray(clip.frames, dtype=np.float64), cfg.patch_size)
    if patches.shape[-2] != cfg.num_patches:
        raise ConfigurationError(
            f"clip yields {patches.shape[-2]} patches, encoder expects {cfg.num_patches}"
        )
    embedded = encoder.patch_embed(as_tensor(patches))
    lead = embedded.shape[:-2]
    class_rows = add(np.zeros(lead + (1, cfg.video_width)), encoder.class_token)
    tokens = add(concat([class_rows, embedded], axis=-2), encoder.positional)
    return FrameFeatures(tokens)


def video_encoder_forward(x: FrameFeatures, encoder: VideoEncoder) -> FrameFeatures:
    """Run adapters then frozen layers; frames never mix inside a layer"""
    tokens = x.tokens
    for layer in encoder.layers:
        tokens = layer(tokens)
    return FrameFeatures(tokens)


def frame_embeddings(x: FrameFeatures, encoder: VideoEncoder) -> Tensor:
    """``v_t = h_v(c_t)`` with one projection shared across frames"""
    return encoder.proj(getitem(x.tokens, (Ellipsis, 0, slice(None))))


def project_and_pool(x: FrameFeatures, encoder: VideoEncoder) -> JointEmbedding:
    return JointEmbedding(mean(frame_embeddings(x, encoder), axis=-2))


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.vocab_size < 1:
            raise ConfigurationError("model.vocab_size must be set before building the text tower")
        d = cfg.text_width
        self.cfg = cfg
        self.token_embedding = Parameter(
            init_normal(rng, (cfg.vocab_size, d), cfg.init_std), trainable=False
        )
        self.positional = Parameter(
            init_normal(rng, (cfg.max_text_len, d), cfg.init_std), trainable=False
        )
        for i in range(1, cfg.text_layers + 1):
            setattr(self, f"layer{i}", TransformerLayer(rng, d, cfg.text_heads, cfg.mlp_ratio))
        self.proj = Linear(rng, d, cfg.joint_width, bias=False)

    def layer(self, index: int) -> TransformerLayer:
        return getattr(self, f"layer{index}")

    @property
    def layers(self) -> List[TransformerLayer]:
        return [self.layer(i) for i in range(1, self.cfg.text_layers + 1)]


def text_encoder_forward(ids: np.ndarray, encoder: TextEncoder) -> Tensor:
    """Token ids ``[..., N]`` to features ``[..., N, d_l]`` under a causal mask"""
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[-1]
    if length > encoder.cfg.max_text_len:
        raise ContractError(
            f"token sequence of length {length} exceeds max_text_len {encoder.cfg.max_text_len}"
        )
    z = add(embedding(encoder.token_embedding, ids), getitem(encoder.positional, slice(0, length)))
    mask = causal_mask(length)
    for layer in encoder.layers:
        z = layer(z, mask=mask)
    return z


def eos_positions(ids: np.ndarray, eos_id: int) -> np.ndarray:
    """Index of the first EOS in each row of ``ids``.

    Raises:
        ContractError: If a row has no EOS
    """
    ids = np.asarray(ids)
    hits = ids == eos_id
    missing = ~hits.any(axis=-1)
    if np.any(missing):
        raise ContractError("token sequence has no EOS token to pool from")
    return hits.argmax(axis=-1)


def project_text(z: Tensor, ids: np.ndarray, encoder: TextEncoder, eos_id: int) -> JointEmbedding:
    """``w = h_l(z[EOS])`` for features ``[..., N, d_l]``"""
    ids = np.asarray(ids)
    positions = eos_positions(ids, eos_id)
    if ids.ndim == 1:
        pooled = getitem(z, int(positions))
    else:
        flat_z = z.reshape(-1, ids.shape[-1], z.shape[-1])
        rows = np.arange(flat_z.shape[0])
        pooled = getitem(flat_z, (rows, positions.reshape(-1)))
        pooled = pooled.reshape(*ids.shape[:-1], z.shape[-1])
    return JointEmbedding(encoder.proj(pooled))


def encode_tokens(
    sequences: List[TokenSequence], encoder: TextEncoder, eos_id: int
) -> Tuple[Tensor, Tensor]:
    """Features and joint embeddings for a list of token sequences"""
    ids = batch_ids(sequences)
    z = text_encoder_forward(ids, encoder)
    return z, project_text(z, ids, encoder, eos_id).vec

