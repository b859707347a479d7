"""Multi-task decoder: contrastive, CMC, CMLM and VC heads plus loss aggregation."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adapters import TextAdapter, bottleneck_width, text_adapter_forward
from .exceptions import ConfigurationError, ContractError
from .nn import (
    AttentionWeights,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    TransformerLayer,
    multi_head_attention,
)
from .tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    cosine_similarity_matrix,
    cross_entropy,
    div,
    exp,
    log,
    maximum,
    mul,
    softmax,
    swapaxes,
    tsum,
)
from .tokenizer import TokenSequence

logger = logging.getLogger(__name__)

HEADS: Tuple[str, ...] = ("contrastive", "cmc", "cmlm", "vc")


@dataclass
class HeadConfig:
    """Which heads train and how their losses are weighted"""

    contrastive: bool = True
    cmc: bool = True
    cmlm: bool = True
    vc: bool = True
    contrastive_weight: float = 1.0
    cmc_weight: float = 1.0
    cmlm_weight: float = 1.0
    vc_weight: float = 1.0
    learn_temperature: bool = True
    init_temperature: float = 0.07
    min_temperature: float = 0.01

    @property
    def enabled(self) -> Dict[str, bool]:
        return {name: bool(getattr(self, name)) for name in HEADS}

    @property
    def weights(self) -> Dict[str, float]:
        return {name: float(getattr(self, f"{name}_weight")) for name in HEADS}

    def validate(self) -> None:
        if not any(self.enabled.values()):
            raise ConfigurationError("At least one head must be enabled")
        for name, weight in self.weights.items():
            if weight < 0:
                raise ConfigurationError(f"heads.{name}_weight must be non-negative, got {weight}")
        if self.min_temperature <= 0 or self.init_temperature < self.min_temperature:
            raise ConfigurationError(
                "heads.init_temperature must be >= heads.min_temperature > 0"
            )


@dataclass
class LabelSet:
    """Ordered class names with their prompted token sequences"""

    names: List[str]
    prompts: List[TokenSequence]
    embeddings: Optional[Tensor] = None

    def __len__(self) -> int:
        return len(self.names)

    def ids(self) -> np.ndarray:
        return np.stack([p.as_array() for p in self.prompts])


@dataclass
class SimilarityMatrix:
    """Cosine similarities before temperature scaling"""

    values: Tensor
    temperature: Tensor

    def logits(self) -> Tensor:
        return div(self.values, self.temperature)


@dataclass
class MultiTaskLoss:
    contrastive: Optional[Tensor] = None
    cmc: Optional[Tensor] = None
    cmlm: Optional[Tensor] = None
    vc: Optional[Tensor] = None
    weights: Dict[str, float] = field(default_factory=dict)
    total: Optional[Tensor] = None

    def part(self, name: str) -> Optional[Tensor]:
        return getattr(self, name)

    def as_floats(self) -> Dict[str, Optional[float]]:
        values = {name: self.part(name) for name in HEADS + ("total",)}
        return {name: (None if t is None else t.item()) for name, t in values.items()}


class Temperature(Module):
    """Log-parameterised temperature, clamped from below"""

    def __init__(self, init: float = 0.07, floor: float = 0.01, trainable: bool = True):
        value = np.float32(np.log(init)).astype(np.float64)
        self.log_tau = Parameter(np.array(value), trainable=trainable)
        self.floor = floor

    def __call__(self) -> Tensor:
        return maximum(exp(self.log_tau), self.floor)

    def value(self) -> float:
        return max(float(np.exp(self.log_tau.data)), self.floor)


class CMLMBlock(Module):
    """Frozen copy of the final text layer, cross-attending text to frames.

    Only the internal text adapter and the MLM projection train.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        source: TransformerLayer,
        joint_width: int,
        vocab_size: int,
        adapter_ratio: float = 0.25,
        std: float = 0.02,
    ):
        width = source.ln_1.gamma.shape[0]
        self.heads = source.heads
        self.ln_1 = _frozen_copy(source.ln_1, LayerNorm(width))
        self.attn = _frozen_copy(source.attn, AttentionWeights(rng, width))
        self.ln_2 = _frozen_copy(source.ln_2, LayerNorm(width))
        self.mlp = _frozen_copy(source.mlp, FeedForward(rng, width, source.mlp.fc1.weight.shape[1] // width))
        self.frame_map = Linear(rng, joint_width, width, bias=False)
        self.adapter = TextAdapter(rng, width, bottleneck_width(width, adapter_ratio), std=std)
        self.mlm_head = Linear(rng, width, vocab_size, trainable=True, std=std)

    def copies_match(self, source: TransformerLayer) -> bool:
        """True when every frozen copy still equals ``source`` bit for bit"""
        pairs = [
            (self.ln_1, source.ln_1),
            (self.attn, source.attn),
            (self.ln_2, source.ln_2),
            (self.mlp, source.mlp),
        ]
        for copy, original in pairs:
            for (_, a), (_, b) in zip(copy.named_parameters(), original.named_parameters()):
                if not np.array_equal(a.data, b.data):
                    return False
        return True


def _frozen_copy(source: Module, target: Module) -> Module:
    for (name, src), (_, dst) in zip(source.named_parameters(), target.named_parameters()):
        if src.shape != dst.shape:
            raise ConfigurationError(f"cannot copy {name}: {src.shape} vs {dst.shape}")
        dst.data = src.data.copy()
        dst.trainable = False
    return target


def contrastive_similarities(videos: Tensor, texts: Tensor, tau: Tensor) -> Tuple[Tensor, Tensor]:
    """Row-softmax of ``cos / tau`` in both directions, each ``[B, B]``"""
    logits = div(cosine_similarity_matrix(videos, texts), tau)
    return softmax(logits, axis=-1), softmax(swapaxes(logits, 0, 1), axis=-1)


def ground_truth_from_labels(labels: Sequence[int]) -> np.ndarray:
    """``1`` where two batch items share a label; rows sum to the number of positives"""
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    sums = matrix.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise ContractError("ground truth row has no positive pair")
    return matrix / sums


def _kl_rows(target: np.ndarray, predicted: Tensor) -> Tensor:
    """Mean over rows of ``KL(target_row || predicted_row)``"""
    positive = target > 0
    entropy_term = float(np.sum(target[positive] * np.log(target[positive])))
    cross = tsum(mul(target, log(maximum(predicted, 1e-300))))
    return (cross * -1.0 + entropy_term) * (1.0 / target.shape[0])


def contrastive_loss(p_v2t: Tensor, p_t2v: Tensor, ground_truth: np.ndarray) -> Tensor:
    """Mean of the two directional KL divergences to the label-aware ground truth.

    Rows of ``ground_truth`` are normalised to ``1/k`` over their ``k``
    positives; the text-to-video direction uses its transpose.

    Raises:
        ContractError: If a row has no positive pair
    """
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    v2t = _kl_rows(_normalize_rows(ground_truth), p_v2t)
    t2v = _kl_rows(_normalize_rows(ground_truth.T), p_t2v)
    return (v2t + t2v) * 0.5


def zero_shot_predict(v: Tensor, label_embeddings: Tensor, tau: Tensor) -> Tuple[np.ndarray, Tensor]:
    """Argmax over ``softmax(cos(v, w_c) / tau)``; ties go to the lowest index"""
    single = v.ndim == 1
    videos = v.reshape(1, -1) if single else v
    probs = softmax(div(cosine_similarity_matrix(videos, label_embeddings), tau), axis=-1)
    prediction = np.argmax(probs.data, axis=-1)
    if single:
        return prediction[0], probs.reshape(-1)
    return prediction, probs


def cmc_loss(videos: Tensor, label_embeddings: Tensor, targets: Sequence[int], tau: Tensor) -> Tensor:
    """1-in-C cross-entropy over cosine similarities to every label"""
    similarity = SimilarityMatrix(cosine_similarity_matrix(videos, label_embeddings), tau)
    return cross_entropy(similarity.logits(), np.asarray(targets, dtype=np.int64))


def cmlm_forward(text_feats: Tensor, frame_embeds: Tensor, block: CMLMBlock) -> Tensor:
    """Text features ``[..., N, d_l]`` attend to frames ``[..., T, d_vl]``; returns vocab logits"""
    frames = block.frame_map(frame_embeds)
    w_star = add(
        text_feats,
        multi_head_attention(block.ln_1(text_feats), block.ln_1(frames), block.attn, block.heads),
    )
    w_hat = text_adapter_forward(w_star, block.adapter)
    w_m = add(w_hat, block.mlp(block.ln_2(w_hat)))
    return block.mlm_head(w_m)


def cmlm_loss(
    logits: Tensor,
    original_ids: np.ndarray,
    mask_positions: Sequence[Sequence[int]],
) -> Optional[Tensor]:
    """Mean cross-entropy over masked positions; ``None`` when nothing is masked.

    ``logits`` is ``[B, N, V]`` (or ``[N, V]`` with a single position list).
    """
    original_ids = np.asarray(original_ids, dtype=np.int64)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        original_ids = original_ids.reshape(1, -1)
        mask_positions = [mask_positions]

    rows: List[int] = []
    cols: List[int] = []
    for b, positions in enumerate(mask_positions):
        rows.extend([b] * len(positions))
        cols.extend(int(p) for p in positions)
    if not rows:
        logger.warning("CMLM batch has no masked positions; head skipped")
        return None

    rows_arr, cols_arr = np.asarray(rows), np.asarray(cols)
    picked = logits[rows_arr, cols_arr]
    return cross_entropy(picked, original_ids[rows_arr, cols_arr])


def vc_forward_loss(v: Tensor, head: Linear, targets: Sequence[int]) -> Tuple[Tensor, Tensor]:
    logits = head(v)
    return logits, cross_entropy(logits, np.asarray(targets, dtype=np.int64))


def aggregate_losses(parts: MultiTaskLoss, enabled: Dict[str, bool]) -> Tensor:
    """Weighted sum over enabled heads that produced a loss.

    Raises:
        ConfigurationError: If every head is disabled
    """
    if not any(enabled.get(name, False) for name in HEADS):
        raise ConfigurationError("All heads are disabled; nothing to optimise")

    total: Optional[Tensor] = None
    for name in HEADS:
        loss = parts.part(name)
        if not enabled.get(name, False) or loss is None:
            continue
        weighted = loss * parts.weights.get(name, 1.0)
        total = weighted if total is None else add(total, weighted)
    if total is None:
        total = as_tensor(0.0)
    parts.total = total
    return total


class MultiTaskDecoder(Module):
    """Head parameters: temperature, CMLM block and VC classifier"""

    def __init__(
        self,
        rng: np.random.Generator,
        heads: HeadConfig,
        final_text_layer: TransformerLayer,
        joint_width: int,
        vocab_size: int,
        num_classes: int,
        adapter_ratio: float = 0.25,
    ):
        self.temperature = Temperature(
            heads.init_temperature, heads.min_temperature, trainable=heads.learn_temperature
        )
        self.cmlm = (
            CMLMBlock(rng, final_text_layer, joint_width, vocab_size, adapter_ratio)
            if heads.cmlm
            else None
        )
        self.vc_head = (
            Linear(rng, joint_width, num_classes, trainable=True, zero_init=True) if heads.vc else None
        )
