"""Supervised and zero-shot accuracy, masked-word accuracy, label correlation and parameter accounting."""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from m2clip.adapters import (
    bottleneck_width,
    parse_layer_set,
    ted_parameter_count,
    text_adapter_parameter_count,
)
from m2clip.exceptions import ConfigurationError, ContractError
from m2clip.model import M2Clip

from .synthetic import SyntheticDataset

logger = logging.getLogger(__name__)

EVAL_BATCH = 32


@dataclass
class SupervisedResult:
    path: str
    top1: float
    top5: float
    per_class: Dict[str, float] = field(default_factory=dict)
    per_family: Dict[str, float] = field(default_factory=dict)
    predictions: Optional[np.ndarray] = None


def collect_scores(model: M2Clip, data: SyntheticDataset, path: str, labels=None) -> np.ndarray:
    scores = [model.predict_scores(clips, path, labels) for clips, _ in data.batches(EVAL_BATCH)]
    return np.concatenate(scores, axis=0)


def ranked(scores: np.ndarray) -> np.ndarray:
    """Class indices best-first; equal scores keep the lower index first"""
    return np.argsort(-scores, axis=-1, kind="stable")


def _grouped_accuracy(correct: np.ndarray, groups: Sequence[str]) -> Dict[str, float]:
    totals: "OrderedDict[str, List[bool]]" = OrderedDict()
    for group, hit in zip(groups, correct):
        totals.setdefault(group, []).append(bool(hit))
    return {group: float(np.mean(hits)) for group, hits in totals.items()}


def evaluate_supervised(model: M2Clip, data: SyntheticDataset, path: str = "vc_head") -> SupervisedResult:
    """Top-1 and top-5 accuracy over ``data`` through ``path``.

    Args:
        model: Trained or untrained model
        data: Split whose labels index the model's training classes
        path: ``vc_head`` or ``cmc_similarity``

    Returns:
        Accuracies plus per-class and per-family breakdowns
    """
    if list(data.label_names) != list(model.labels.names):
        raise ContractError("Supervised evaluation needs a split over the model's training classes")
    scores = collect_scores(model, data, path)
    order = ranked(scores)
    k = min(5, scores.shape[-1])
    top1_hits = order[:, 0] == data.labels
    top5_hits = np.any(order[:, :k] == data.labels[:, None], axis=-1)

    names = [data.label_names[i] for i in data.labels]
    families = [data.families[i] for i in data.labels]
    result = SupervisedResult(
        path=path,
        top1=float(np.mean(top1_hits)),
        top5=float(np.mean(top5_hits)),
        per_class=_grouped_accuracy(top1_hits, names),
        per_family=_grouped_accuracy(top1_hits, families),
        predictions=order[:, 0],
    )
    logger.debug("%s: top1 %.4f top5 %.4f on %d clips", path, result.top1, result.top5, len(data))
    return result


@dataclass
class ZeroShotResult:
    top1: float
    predictions: np.ndarray
    label_names: List[str]
    per_class: Dict[str, float] = field(default_factory=dict)


def evaluate_zero_shot(
    model: M2Clip, holdout: SyntheticDataset, label_names: Optional[Sequence[str]] = None
) -> ZeroShotResult:
    """Top-1 of the cosine-similarity argmax over prompts for the holdout classes.

    ``label_names`` reorders the candidate labels; data labels are mapped
    through the names, so a permutation permutes the predicted indices.

    Raises:
        ContractError: If a holdout class was also a training class
    """
    names = list(label_names) if label_names is not None else list(holdout.label_names)
    overlap = sorted(set(names) & set(model.labels.names))
    if overlap:
        raise ContractError(f"Zero-shot classes overlap training classes: {overlap}")
    missing = sorted(set(holdout.label_names) - set(names))
    if missing:
        raise ContractError(f"Holdout classes missing from the candidate labels: {missing}")

    labels = model.label_set(names)
    scores = collect_scores(model, holdout, "cmc_similarity", labels)
    predictions = ranked(scores)[:, 0]
    truth = np.asarray([names.index(holdout.label_names[i]) for i in holdout.labels])
    hits = predictions == truth
    result = ZeroShotResult(
        top1=float(np.mean(hits)),
        predictions=predictions,
        label_names=names,
        per_class=_grouped_accuracy(hits, [names[i] for i in truth]),
    )
    logger.debug("zero-shot top1 %.4f over %d classes", result.top1, len(names))
    return result


@dataclass
class LabelCorrelation:
    """Cosine similarity between the prompted label embeddings, ``[C, C]``"""

    label_names: List[str]
    matrix: np.ndarray

    def off_diagonal(self) -> np.ndarray:
        return self.matrix[~np.eye(len(self.label_names), dtype=bool)]

    @property
    def mean_off_diagonal(self) -> float:
        values = self.off_diagonal()
        return float(np.mean(values)) if values.size else 0.0

    @property
    def max_off_diagonal(self) -> float:
        values = self.off_diagonal()
        return float(np.max(values)) if values.size else 0.0


def label_correlation(model: M2Clip, label_names: Optional[Sequence[str]] = None) -> LabelCorrelation:
    """Inter-class correlation of label features under the model's current text tower.

    Lower off-diagonal values mean the label embeddings are easier to tell
    apart. Defaults to the model's training classes.
    """
    names = list(label_names) if label_names is not None else list(model.labels.names)
    embeddings = model.encode_labels(model.label_set(names)).numpy()
    norms = np.maximum(np.linalg.norm(embeddings, axis=-1, keepdims=True), 1e-12)
    unit = embeddings / norms
    result = LabelCorrelation(names, unit @ unit.T)
    logger.debug("label correlation over %d classes: mean off-diagonal %.4f", len(names), result.mean_off_diagonal)
    return result


def masked_word_accuracy(model: M2Clip, data: SyntheticDataset, seed: int = 0) -> float:
    """Share of masked prompt words the CMLM head recovers from text plus frames"""
    if model.decoder.cmlm is None:
        raise ConfigurationError("masked_word_accuracy needs the CMLM head")
    rng = np.random.default_rng(seed)
    hits, total = 0, 0
    for clips, labels in data.batches(EVAL_BATCH):
        masked = model.masked_prompts(labels, rng)
        predicted = model.predict_masked(masked, clips)
        for row, (label, sequence) in enumerate(zip(labels, masked)):
            original = model.labels.prompts[int(label)].ids
            for position in sequence.mask_positions or []:
                hits += int(predicted[row, position] == original[position])
                total += 1
    return hits / total if total else 0.0


@dataclass
class ParameterCount:
    trainable: int
    frozen: int
    per_module: "OrderedDict[str, Tuple[int, int]]"

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


def module_key(name: str) -> str:
    """Group ``video.layer3.adapter.w_dn`` under ``video.layer3.adapter``, others under two components"""
    parts = name.split(".")
    if "adapter" in parts:
        return ".".join(parts[: parts.index("adapter") + 1])
    return ".".join(parts[:2])


def count_parameters(model: M2Clip) -> ParameterCount:
    per_module: "OrderedDict[str, Tuple[int, int]]" = OrderedDict()
    trainable = frozen = 0
    for name, param in model.named_parameters():
        key = module_key(name)
        t, f = per_module.get(key, (0, 0))
        if param.trainable:
            trainable += param.size
            t += param.size
        else:
            frozen += param.size
            f += param.size
        per_module[key] = (t, f)
    return ParameterCount(trainable, frozen, per_module)


def expected_trainable_parameters(cfg, vocab_size: int, num_classes: int) -> int:
    """Closed-form trainable count for an experiment config"""
    model, adapter, heads = cfg.model, cfg.adapter, cfg.heads
    video_layers = parse_layer_set(cfg.placement.video_layers, model.video_layers)
    text_layers = parse_layer_set(cfg.placement.text_layers, model.text_layers)

    count = len(video_layers) * ted_parameter_count(
        model.video_width, bottleneck_width(model.video_width, adapter.video_ratio), adapter.kt, adapter.ks
    )
    count += len(text_layers) * text_adapter_parameter_count(
        model.text_width, bottleneck_width(model.text_width, adapter.text_ratio)
    )
    if heads.learn_temperature:
        count += 1
    if heads.cmlm:
        count += text_adapter_parameter_count(
            model.text_width, bottleneck_width(model.text_width, cfg.cmlm.adapter_ratio)
        )
        count += model.text_width * vocab_size + vocab_size
    if heads.vc:
        count += model.joint_width * num_classes + num_classes
    return count
