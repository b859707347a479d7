from typing import Dict, Iterator, List, Optional, Tuple
import logging
import time
import uuid
from contextlib import contextmanager

import numpy as np

from m2clip.decoder import HEADS, MultiTaskLoss
from m2clip.exceptions import NonFiniteError
from m2clip.model import M2Clip
from m2clip.optim import Optimizer, build_optimizer
from m2clip.tensor import ComputationTape, backward
from m2clip.tokenizer import Vocabulary

from .config import ExperimentConfig
from .evaluation import count_parameters, evaluate_supervised, evaluate_zero_shot
from .log_style import Style
from .reporting import MetricsRecord, MetricsReport
from .synthetic import DatasetSplits, label_corpus, select_classes

logger = logging.getLogger(__name__)


class StepTracker:
    """Tracks per-step timing and losses for one training session"""

    def __init__(self):
        self._step_history: Dict[str, Dict] = {}
        self._step_counter = 0
        self._session_id = str(uuid.uuid4())[:8]
        self.logger = logging.getLogger("m2clip_harness.steps")

    @property
    def session_id(self) -> str:
        return self._session_id

    @contextmanager
    def step(self, epoch: int) -> Iterator[Dict]:
        """Time one optimizer step; the caller fills ``losses`` in the yielded record"""
        step_id = f"{self._session_id}-{self._step_counter}"
        self._step_counter += 1
        info: Dict = {"step_id": step_id, "epoch": epoch, "losses": {}}
        start = time.perf_counter()
        try:
            yield info
        except Exception as e:
            info["error"] = str(e)
            self.logger.warning("[ERROR %s] %s - epoch %d", step_id, e, epoch)
            raise
        finally:
            info["duration_ms"] = (time.perf_counter() - start) * 1000
            self._step_history[step_id] = info

        total = info["losses"].get("total")
        self.logger.debug(
            "[STEP %s] epoch %d loss %s (%.1f ms)",
            step_id,
            epoch,
            "-" if total is None else f"{total:.5f}",
            info["duration_ms"],
        )

    def get_step_stats(self) -> Dict:
        """Summary statistics over every step of this session"""
        if not self._step_history:
            return {"count": 0, "total_duration_ms": 0, "avg_duration_ms": 0}

        durations = [s["duration_ms"] for s in self._step_history.values()]
        failures = sum(1 for s in self._step_history.values() if "error" in s)
        last = list(self._step_history.values())[-1]
        return {
            "count": len(durations),
            "total_duration_ms": sum(durations),
            "avg_duration_ms": sum(durations) / len(durations),
            "failures": failures,
            "last_loss": last["losses"].get("total"),
            "session_id": self._session_id,
        }

    def get_slowest_steps(self, limit: int = 5) -> List[Dict]:
        return sorted(self._step_history.values(), key=lambda s: s["duration_ms"], reverse=True)[:limit]

    def print_summary_report(self) -> None:
        stats = self.get_step_stats()
        if stats["count"] == 0:
            return

        self.logger.info(
            "%s⎯⎯⎯ %d steps · %.0fms · avg %.1fms%s",
            Style.GRAY,
            stats["count"],
            stats["total_duration_ms"],
            stats["avg_duration_ms"],
            Style.RESET,
        )
        if stats["failures"]:
            self.logger.info("%s    %s✗%s%d failed", Style.GRAY, Style.RED, Style.RESET, stats["failures"])

        if self.logger.isEnabledFor(logging.DEBUG):
            slowest = self.get_slowest_steps(1)
            if slowest:
                self.logger.debug(
                    "%s    Slowest: %s · %.0fms%s",
                    Style.GRAY,
                    slowest[0]["step_id"],
                    slowest[0]["duration_ms"],
                    Style.RESET,
                )


def build_vocabulary() -> Vocabulary:
    return Vocabulary.from_corpus(label_corpus())


def build_model(cfg: ExperimentConfig, vocab: Optional[Vocabulary] = None) -> M2Clip:
    """Model for ``cfg`` with its adapters installed.

    The class list and vocabulary are derived from the config, so the same
    config always rebuilds the same parameter layout.
    """
    vocab = vocab or build_vocabulary()
    train_specs, _ = select_classes(cfg.data.train_classes, cfg.data.holdout_classes)
    model = M2Clip(
        cfg.encoder_config(),
        vocab,
        [spec.name for spec in train_specs],
        heads=cfg.heads,
        cmlm=cfg.cmlm,
    )
    model.install_adapters(cfg.placement, cfg.adapter)
    model.experiment = cfg
    return model


def make_optimizer(model: M2Clip, cfg: ExperimentConfig) -> Optimizer:
    train = cfg.train
    if train.optimizer == "adam":
        return build_optimizer(
            "adam",
            model.trainable_parameters(),
            train.learning_rate,
            betas=(train.beta1, train.beta2),
            eps=train.eps,
        )
    return build_optimizer("sgd", model.trainable_parameters(), train.learning_rate, momentum=train.momentum)


def first_non_finite(model: M2Clip, tape: ComputationTape, clips: np.ndarray) -> str:
    """Name the earliest tensor holding NaN/Inf: inputs, parameters, then tape outputs in order"""
    if not np.all(np.isfinite(clips)):
        return "input clips"
    for name, param in model.named_parameters():
        if not np.all(np.isfinite(param.data)):
            return name
    for index, node in enumerate(tape.nodes):
        if not np.all(np.isfinite(node.output.data)):
            return f"{node.op} output (tape node {index})"
    return "loss"


def _check_losses(parts: MultiTaskLoss, model: M2Clip, tape: ComputationTape, clips: np.ndarray, where: str) -> None:
    values = parts.as_floats()
    if all(v is None or np.isfinite(v) for v in values.values()):
        return
    name = first_non_finite(model, tape, clips)
    logger.error("Non-finite loss %s; first non-finite tensor: %s", where, name)
    raise NonFiniteError(f"Non-finite loss {where}; first non-finite tensor: {name}", name)


def _check_gradients(model: M2Clip, where: str) -> None:
    for name, param in model.named_parameters():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            logger.error("Non-finite gradient %s in %s", where, name)
            raise NonFiniteError(f"Non-finite gradient {where} in {name}", name)


def evaluation_record(
    model: M2Clip,
    splits: DatasetSplits,
    epoch: int,
    step: int,
    losses: Dict[str, Optional[float]],
) -> MetricsRecord:
    counts = count_parameters(model)
    vc_top1 = evaluate_supervised(model, splits.val, "vc_head").top1 if model.decoder.vc_head else None
    cmc_top1 = evaluate_supervised(model, splits.val, "cmc_similarity").top1
    zeroshot = evaluate_zero_shot(model, splits.holdout).top1 if splits.holdout is not None else None
    return MetricsRecord(
        epoch=epoch,
        step=step,
        loss_total=losses.get("total") if losses.get("total") is not None else float("nan"),
        loss_contrastive=losses.get("contrastive"),
        loss_cmc=losses.get("cmc"),
        loss_cmlm=losses.get("cmlm"),
        loss_vc=losses.get("vc"),
        vc_top1=vc_top1,
        cmc_top1=cmc_top1,
        zeroshot_top1=zeroshot,
        trainable_params=counts.trainable,
        total_params=counts.total,
    )


def supervised_score(record: MetricsRecord) -> float:
    """VC-head top-1 when the head exists, else the CMC path"""
    return record.vc_top1 if record.vc_top1 is not None else record.cmc_top1


def _mean_losses(history: List[Dict[str, Optional[float]]]) -> Dict[str, Optional[float]]:
    means: Dict[str, Optional[float]] = {}
    for name in HEADS + ("total",):
        values = [h[name] for h in history if h.get(name) is not None]
        means[name] = float(np.mean(values)) if values else None
    return means


def train(
    model: M2Clip,
    splits: DatasetSplits,
    cfg: ExperimentConfig,
    tracker: Optional[StepTracker] = None,
) -> Tuple[M2Clip, MetricsReport]:
    """Optimise the trainable parameters on ``splits.train``.

    Every step runs both towers, recomputes the label embeddings and
    evaluates the enabled heads; only trainable parameters change. Metrics
    are recorded every ``train.eval_every`` epochs and after the last one.

    Args:
        model: Model with adapters installed
        splits: Train/val/holdout data
        cfg: Experiment configuration
        tracker: Optional step tracker for timing diagnostics

    Returns:
        The trained model and its metrics report

    Raises:
        NonFiniteError: If a loss or gradient becomes NaN/Inf
    """
    cfg.validate()
    tracker = tracker or StepTracker()
    report = MetricsReport()
    train_cfg = cfg.train
    if train_cfg.epochs == 0:
        logger.info("0 epochs requested; model left at initialisation")
        return model, report

    optimizer = make_optimizer(model, cfg)
    order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(11,)))
    mask_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(12,)))
    logger.info(
        "Training %d trainable tensors for %d epochs (batch %d, %s lr %g)",
        len(optimizer.params),
        train_cfg.epochs,
        train_cfg.batch_size,
        train_cfg.optimizer,
        train_cfg.learning_rate,
    )

    best_state: Optional[List[np.ndarray]] = None
    best_score = -1.0
    done = False
    for epoch in range(1, train_cfg.epochs + 1):
        history: List[Dict[str, Optional[float]]] = []
        for clips, labels in splits.train.batches(train_cfg.batch_size, order_rng):
            where = f"at epoch {epoch} step {model.step + 1}"
            with tracker.step(epoch) as info:
                optimizer.zero_grad()
                with ComputationTape() as tape:
                    parts = model.compute_losses(clips, labels, mask_rng)
                _check_losses(parts, model, tape, clips, where)
                backward(parts.total, tape)
                _check_gradients(model, where)
                optimizer.step()
                info["losses"] = parts.as_floats()
            history.append(info["losses"])
            model.step += 1
            if train_cfg.max_steps and model.step >= train_cfg.max_steps:
                done = True
                break

        losses = _mean_losses(history)
        logger.info(
            "[EPOCH %d] loss %.5f over %d steps",
            epoch,
            losses["total"] if losses["total"] is not None else float("nan"),
            len(history),
        )
        if done or epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs:
            record = evaluation_record(model, splits, epoch, model.step, losses)
            report.append(record)
            logger.info(
                "[EVAL %d] vc %s · cmc %s · zero-shot %s",
                epoch,
                "-" if record.vc_top1 is None else f"{record.vc_top1:.3f}",
                f"{record.cmc_top1:.3f}",
                "-" if record.zeroshot_top1 is None else f"{record.zeroshot_top1:.3f}",
            )
            # Ties keep the earlier epoch
            if train_cfg.keep_best and supervised_score(record) > best_score:
                best_score = supervised_score(record)
                best_state = [param.data.copy() for param in optimizer.params]
                report.selected_epoch = epoch
        if done:
            logger.info("Reached train.max_steps = %d", train_cfg.max_steps)
            break

    if best_state is not None and report.selected_epoch != report.last.epoch:
        for param, values in zip(optimizer.params, best_state):
            param.data = values
        logger.info(
            "[EVAL %d] kept trainable values of epoch %d (supervised %.3f)",
            report.last.epoch,
            report.selected_epoch,
            best_score,
        )
    optimizer.zero_grad()
    tracker.print_summary_report()
    return model, report
