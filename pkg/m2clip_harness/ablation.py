"""Ablation suites: each variant retrains from the same seed and data."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from m2clip.adapters import TED_MODES
from m2clip.exceptions import ConfigurationError

from .config import ExperimentConfig, apply_pairs
from .evaluation import count_parameters, evaluate_supervised, evaluate_zero_shot
from .reporting import aligned_table, format_cell, write_tsv
from .synthetic import DatasetSplits, build_splits
from .trainer import StepTracker, build_model, train

logger = logging.getLogger(__name__)

SUITES = ("ted_variants", "text_adapter_count", "head_subsets", "component_stack")
LAYER_PLACEMENTS = ("front_half", "back_half", "all")
FAMILIES = ("appearance", "motion", "rate")

_ONLY_CONTRASTIVE = (
    ("heads.contrastive", "true"),
    ("heads.cmc", "false"),
    ("heads.cmlm", "false"),
    ("heads.vc", "false"),
)


@dataclass(frozen=True)
class AblationVariant:
    name: str
    overrides: Tuple[Tuple[str, str], ...] = ()
    trained: bool = True


@dataclass
class AblationRecord:
    suite: str
    variant: str
    supervised_top1: float
    cmc_top1: float
    vc_top1: Optional[float]
    zeroshot_top1: Optional[float]
    trainable_params: int
    per_family: Dict[str, float] = field(default_factory=dict)

    def row(self) -> List:
        return [
            self.variant,
            self.supervised_top1,
            self.vc_top1,
            self.cmc_top1,
            self.zeroshot_top1,
            self.trainable_params,
        ] + [self.per_family.get(family) for family in FAMILIES]


TABLE_HEADER = (
    "variant",
    "supervised_top1",
    "vc_top1",
    "cmc_top1",
    "zeroshot_top1",
    "trainable_params",
) + tuple(f"{family}_top1" for family in FAMILIES)


@dataclass
class AblationResult:
    suite: str
    records: List[AblationRecord] = field(default_factory=list)

    def record(self, variant: str) -> AblationRecord:
        for record in self.records:
            if record.variant == variant:
                return record
        raise KeyError(variant)

    def format_table(self) -> str:
        return aligned_table(TABLE_HEADER, [r.row() for r in self.records], title=f"ablation: {self.suite}")

    def to_tsv(self) -> str:
        lines = ["\t".join(("suite",) + TABLE_HEADER)]
        for record in self.records:
            lines.append("\t".join(format_cell(v) for v in [self.suite] + record.row()))
        return "\n".join(lines) + "\n"

    def write(self, directory: Union[str, Path]) -> Dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        table = directory / f"ablation_{self.suite}.txt"
        table.write_text(self.format_table(), encoding="utf-8")
        tsv = write_tsv(
            directory / f"ablation_{self.suite}.tsv",
            ("suite",) + TABLE_HEADER,
            [[self.suite] + r.row() for r in self.records],
        )
        return {"table": table, "tsv": tsv}


def suite_variants(suite: str, base: ExperimentConfig) -> List[AblationVariant]:
    """Variants of ``suite`` in report order.

    Raises:
        ConfigurationError: On an unknown suite name
    """
    if suite == "ted_variants":
        return [
            AblationVariant(
                f"{mode}@{layers}",
                (("placement.ted_mode", mode), ("placement.video_layers", layers)),
            )
            for mode in TED_MODES
            for layers in LAYER_PLACEMENTS
        ]
    if suite == "text_adapter_count":
        return [
            AblationVariant(
                f"text_adapters={n}",
                (("placement.text_layers", "none" if n == 0 else f"deepest:{n}"),),
            )
            for n in range(base.model.text_layers + 1)
        ]
    if suite == "head_subsets":
        heads = ("contrastive", "cmc", "cmlm", "vc")
        variants = []
        for depth in range(1, len(heads) + 1):
            enabled = heads[:depth]
            name = "+".join(enabled)
            overrides = tuple((f"heads.{h}", "true" if h in enabled else "false") for h in heads)
            variants.append(AblationVariant(name, overrides))
        return variants
    if suite == "component_stack":
        no_adapters = (("placement.video_layers", "none"), ("placement.text_layers", "none"))
        text_layers = base.placement.text_layers if base.placement.text_layers not in ("", "none") else "deepest"
        return [
            AblationVariant("zero_shot_baseline", no_adapters + _ONLY_CONTRASTIVE, trained=False),
            AblationVariant(
                "+ted_adapter",
                (("placement.video_layers", "all"), ("placement.text_layers", "none")) + _ONLY_CONTRASTIVE,
            ),
            AblationVariant(
                "+text_adapter",
                (("placement.video_layers", "all"), ("placement.text_layers", text_layers)) + _ONLY_CONTRASTIVE,
            ),
            AblationVariant(
                "+multi_task_decoder",
                (
                    ("placement.video_layers", "all"),
                    ("placement.text_layers", text_layers),
                    ("heads.contrastive", "true"),
                    ("heads.cmc", "true"),
                    ("heads.cmlm", "true"),
                    ("heads.vc", "true"),
                ),
            ),
        ]
    raise ConfigurationError(f"Unknown ablation suite {suite!r}; expected one of {SUITES}")


def variant_config(base: ExperimentConfig, variant: AblationVariant) -> ExperimentConfig:
    cfg = apply_pairs(base.copy(), variant.overrides, f"ablation variant {variant.name}")
    return cfg.validate()


def run_variant(
    suite: str, variant: AblationVariant, base: ExperimentConfig, splits: DatasetSplits
) -> AblationRecord:
    cfg = variant_config(base, variant)
    model = build_model(cfg)
    if variant.trained:
        model, _ = train(model, splits, cfg, StepTracker())

    cmc = evaluate_supervised(model, splits.val, "cmc_similarity")
    vc = evaluate_supervised(model, splits.val, "vc_head") if model.decoder.vc_head is not None else None
    supervised = vc or cmc
    zeroshot = evaluate_zero_shot(model, splits.holdout).top1 if splits.holdout is not None else None
    record = AblationRecord(
        suite=suite,
        variant=variant.name,
        supervised_top1=supervised.top1,
        cmc_top1=cmc.top1,
        vc_top1=vc.top1 if vc else None,
        zeroshot_top1=zeroshot,
        trainable_params=count_parameters(model).trainable,
        per_family=dict(supervised.per_family),
    )
    logger.info(
        "[EVAL %s] supervised %.3f · zero-shot %s · %d trainable",
        variant.name,
        record.supervised_top1,
        "-" if zeroshot is None else f"{zeroshot:.3f}",
        record.trainable_params,
    )
    return record


def run_ablation(
    suite: str,
    base: ExperimentConfig,
    splits: Optional[DatasetSplits] = None,
    only: Optional[Sequence[str]] = None,
) -> AblationResult:
    """Train and evaluate every variant of ``suite`` on one shared dataset.

    Args:
        suite: One of ``SUITES``
        base: Config every variant starts from
        splits: Shared data; built from ``base`` when omitted
        only: Restrict to these variant names

    Returns:
        One record per variant, in suite order
    """
    base.validate()
    variants = suite_variants(suite, base)
    if only is not None:
        unknown = sorted(set(only) - {v.name for v in variants})
        if unknown:
            raise ConfigurationError(f"Unknown variants for {suite}: {unknown}")
        variants = [v for v in variants if v.name in only]

    splits = splits or build_splits(base.data, base.model, base.seed)
    logger.info("Ablation %s: %d variants", suite, len(variants))
    result = AblationResult(suite)
    for variant in variants:
        result.records.append(run_variant(suite, variant, base, splits))
    return result
