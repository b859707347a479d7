"""``m2clip`` command line: train, eval, zeroshot, gradcheck, ablate, params, gen-data, label-correlation.

Exit codes: 0 success, 1 runtime failure (non-finite loss, corrupt
checkpoint, failed gradient check), 2 usage or configuration error.
"""

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from m2clip.exceptions import ConfigurationError, M2ClipError
from m2clip.gradcheck import finite_difference_check, perturb_parameters
from m2clip.model import M2Clip, PREDICTION_PATHS

from .ablation import SUITES, run_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_pairs, describe_keys, env_defaults, load_config, parse_overrides
from .evaluation import (
    count_parameters,
    evaluate_supervised,
    evaluate_zero_shot,
    expected_trainable_parameters,
    label_correlation,
)
from .log_style import configure_logging
from .reporting import aligned_table, summary_lines, write_tsv
from .synthetic import build_splits, generate_synthetic_dataset, save_dataset, select_classes
from .trainer import StepTracker, build_model, train

logger = logging.getLogger(__name__)

COMMANDS = ("train", "eval", "zeroshot", "gradcheck", "ablate", "params", "gen-data", "label-correlation")
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# Entries sampled per parameter unless --full asks for every one
GRADCHECK_ENTRIES = 16


@dataclass
class CommandInvocation:
    subcommand: str
    config_path: Optional[str] = None
    overrides: List[str] = field(default_factory=list)
    output_dir: str = "runs"
    checkpoint: Optional[str] = None
    options: Dict[str, object] = field(default_factory=dict)
    config: Optional[ExperimentConfig] = None


def _common_options(parser: argparse.ArgumentParser, defaults: Dict[str, Optional[str]]) -> None:
    parser.add_argument("--config", default=defaults["config"], help="experiment config file (key = value lines)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key; repeatable, applied after --config",
    )
    parser.add_argument("--output-dir", default=defaults["output_dir"], help="where reports and checkpoints go")


def build_parser(defaults: Optional[Dict[str, Optional[str]]] = None) -> argparse.ArgumentParser:
    defaults = defaults or env_defaults()
    parser = argparse.ArgumentParser(
        prog="m2clip",
        description="Multimodal multi-task adapting of frozen video-text encoders at desk scale",
    )
    parser.add_argument("--log-level", default=defaults["log_level"], help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-file", default=defaults["log_file"], help="also write plain-text logs here")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(
            name,
            help=help_text,
            description=help_text,
            epilog=describe_keys(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _common_options(sub, defaults)
        return sub

    add("train", "train adapters and heads, then save final.ckpt and metrics.tsv")

    sub = add("eval", "supervised top-1/top-5 on the val split")
    sub.add_argument("--checkpoint", help="trained checkpoint; untrained model when omitted")
    sub.add_argument("--path", choices=PREDICTION_PATHS + ("both",), default="both")

    sub = add("zeroshot", "zero-shot top-1 on the held-out classes")
    sub.add_argument("--checkpoint", help="trained checkpoint; untrained model when omitted")

    sub = add("gradcheck", "compare analytic gradients with central finite differences")
    sub.add_argument(
        "--max-entries", type=int, default=GRADCHECK_ENTRIES, help="entries sampled per parameter (0 = all)"
    )
    sub.add_argument("--full", action="store_true", help="check every entry of every trainable parameter")
    sub.add_argument("--tol", type=float, default=1e-4, help="max elementwise relative error per parameter")
    sub.add_argument("--fd-step", type=float, default=1e-5, help="central finite-difference step")
    sub.add_argument("--abs-floor", type=float, default=1e-5, help="lower bound of each relative-error denominator")
    sub.add_argument("--batch-size", type=int, default=2, help="clips in the checked batch")

    sub = add("ablate", "run an ablation suite and write its comparison table")
    sub.add_argument("--suite", choices=SUITES, required=True)
    sub.add_argument("--only", action="append", default=None, metavar="VARIANT", help="run only these variants")

    sub = add("params", "trainable/frozen parameter counts per module")
    sub.add_argument("--checkpoint", help="count a checkpoint's model instead of the config's")

    add("gen-data", "render the synthetic splits to .npy arrays")

    sub = add("label-correlation", "cosine matrix of the label embeddings before and after adapting")
    sub.add_argument("--checkpoint", help="adapted model; only the frozen backbone is reported when omitted")
    return parser


def parse_invocation(argv: Optional[Sequence[str]] = None) -> CommandInvocation:
    """Parse ``argv`` and load the config it names.

    Raises:
        SystemExit: With code 2 on a usage error (argparse)
        ConfigurationError: On an unknown key or bad value
    """
    args = build_parser().parse_args(argv)
    options = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config", "overrides", "output_dir", "checkpoint")
    }
    invocation = CommandInvocation(
        subcommand=args.command,
        config_path=args.config,
        overrides=list(args.overrides),
        output_dir=args.output_dir,
        checkpoint=getattr(args, "checkpoint", None),
        options=options,
    )
    invocation.config = load_config(invocation.config_path, invocation.overrides)
    return invocation


def _output_dir(inv: CommandInvocation) -> Path:
    path = Path(inv.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _model_for(inv: CommandInvocation) -> M2Clip:
    """Checkpointed model if one was given, else a fresh model from the config"""
    if inv.checkpoint:
        model = load_checkpoint(inv.checkpoint)
        if inv.overrides:
            # Model keys come from the checkpoint; overrides only reshape the data
            cfg = apply_pairs(model.experiment.copy(), parse_overrides(inv.overrides), "--set")
            model.experiment = cfg.validate()
        return model
    return build_model(inv.config)


def run_train(inv: CommandInvocation) -> int:
    cfg = inv.config
    out = _output_dir(inv)
    splits = build_splits(cfg.data, cfg.model, cfg.seed)
    model = build_model(cfg)
    tracker = StepTracker()
    model, report = train(model, splits, cfg, tracker)

    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    model.vocab.save(out / "vocab.txt")
    report.write(out / "metrics.tsv")
    save_checkpoint(model, out / "final.ckpt", cfg)

    selected = report.selected
    summary = {"steps": model.step, "checkpoint": out / "final.ckpt"}
    if selected is not None:
        summary.update(
            epoch=selected.epoch,
            loss=selected.loss_total,
            vc_top1=selected.vc_top1,
            cmc_top1=selected.cmc_top1,
            zeroshot_top1=selected.zeroshot_top1,
            trainable_params=selected.trainable_params,
        )
    print(summary_lines(summary))
    return EXIT_OK


def run_eval(inv: CommandInvocation) -> int:
    model = _model_for(inv)
    cfg = model.experiment
    splits = build_splits(cfg.data, cfg.model, cfg.seed)
    choice = inv.options.get("path", "both")
    paths = [p for p in PREDICTION_PATHS if choice in (p, "both")]
    if model.decoder.vc_head is None and "vc_head" in paths:
        if choice == "vc_head":
            raise ConfigurationError("vc_head path needs heads.vc = true")
        paths.remove("vc_head")

    families = sorted(set(splits.val.families))
    rows = []
    for path in paths:
        result = evaluate_supervised(model, splits.val, path)
        rows.append([path, result.top1, result.top5] + [result.per_family.get(f) for f in families])
    header = ["path", "top1", "top5"] + [f"{f}_top1" for f in families]
    write_tsv(_output_dir(inv) / "eval.tsv", header, rows)
    print(aligned_table(header, rows, title="supervised accuracy (val)"), end="")
    return EXIT_OK


def run_zeroshot(inv: CommandInvocation) -> int:
    model = _model_for(inv)
    cfg = model.experiment
    splits = build_splits(cfg.data, cfg.model, cfg.seed)
    if splits.holdout is None:
        raise ConfigurationError("zeroshot needs data.holdout_classes >= 1")
    result = evaluate_zero_shot(model, splits.holdout)
    rows = [[name, result.per_class.get(name)] for name in result.label_names]
    rows.append(["overall", result.top1])
    write_tsv(_output_dir(inv) / "zeroshot.tsv", ["class", "top1"], rows)
    title = f"zero-shot top-1 over {len(result.label_names)} held-out classes"
    print(aligned_table(["class", "top1"], rows, title=title), end="")
    return EXIT_OK


def run_gradcheck(inv: CommandInvocation) -> int:
    cfg = inv.config
    batch_size = int(inv.options["batch_size"])
    if batch_size < 1:
        raise ConfigurationError("--batch-size must be positive")
    max_entries = None if inv.options.get("full") else int(inv.options["max_entries"]) or None

    model = build_model(cfg)
    perturb_parameters(model.parameters(), np.random.default_rng(cfg.seed), cfg.adapter.init_std)

    train_specs, _ = select_classes(cfg.data.train_classes, cfg.data.holdout_classes)
    per_class = -(-batch_size // len(train_specs))
    data = generate_synthetic_dataset(
        train_specs,
        per_class,
        frames=cfg.model.num_frames,
        height=cfg.model.image_size,
        width=cfg.model.image_size,
        seed=cfg.seed,
        noise=cfg.data.noise,
    )
    # Round-robin over classes so the batch holds distinct labels
    order = np.argsort(np.arange(len(data)) % per_class, kind="stable")[:batch_size]
    clips, labels = data.clips[order], data.labels[order]

    def loss():
        return model.compute_losses(clips, labels, np.random.default_rng(cfg.seed)).total

    report = finite_difference_check(
        loss,
        model.parameters(),
        h=float(inv.options["fd_step"]),
        tol=float(inv.options["tol"]),
        max_entries=max_entries,
        rng=np.random.default_rng(cfg.seed),
        abs_floor=float(inv.options["abs_floor"]),
    )
    (_output_dir(inv) / "gradcheck.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(report.format_table())
    if not report.passed:
        logger.error(
            "Gradient check failed for %s (max relative error %.3e > %.1e)",
            ", ".join(e.name for e in report.failures()),
            report.max_rel_error,
            report.tol,
        )
        return EXIT_RUNTIME
    logger.info(
        "Gradient check passed: %d parameters, max relative error %.3e", len(report.entries), report.max_rel_error
    )
    return EXIT_OK


def run_ablate(inv: CommandInvocation) -> int:
    result = run_ablation(inv.options["suite"], inv.config, only=inv.options.get("only"))
    paths = result.write(_output_dir(inv))
    print(result.format_table(), end="")
    logger.info("Ablation table written to %s", paths["tsv"])
    return EXIT_OK


def run_params(inv: CommandInvocation) -> int:
    model = _model_for(inv)
    counts = count_parameters(model)
    rows = [[module, t, f] for module, (t, f) in counts.per_module.items()]
    rows.append(["total", counts.trainable, counts.frozen])
    write_tsv(_output_dir(inv) / "params.tsv", ["module", "trainable", "frozen"], rows)
    print(aligned_table(["module", "trainable", "frozen"], rows, title="parameters"), end="")

    expected = expected_trainable_parameters(model.experiment, len(model.vocab), len(model.labels))
    if expected != counts.trainable:
        logger.warning("Enumerated %d trainable parameters, closed form gives %d", counts.trainable, expected)
    return EXIT_OK


def run_gen_data(inv: CommandInvocation) -> int:
    cfg = inv.config
    out = _output_dir(inv)
    splits = build_splits(cfg.data, cfg.model, cfg.seed)
    rows = []
    for dataset in (splits.train, splits.val, splits.holdout):
        if dataset is None:
            continue
        paths = save_dataset(dataset, out)
        rows.append([dataset.split, len(dataset), len(dataset.label_names), str(paths["clips"].name)])
    print(aligned_table(["split", "clips", "classes", "file"], rows, title=f"synthetic data in {out}"), end="")
    return EXIT_OK


def run_label_correlation(inv: CommandInvocation) -> int:
    """Write ``label_correlation.tsv``: one ``[C, C]`` block per stage over train and holdout labels"""
    if inv.checkpoint:
        adapted = load_checkpoint(inv.checkpoint)
        # Zero up-projections leave the fresh model equal to the frozen backbone
        stages = [("frozen", build_model(adapted.experiment)), ("adapted", adapted)]
    else:
        stages = [("frozen", build_model(inv.config))]

    cfg = stages[0][1].experiment
    train_specs, holdout_specs = select_classes(cfg.data.train_classes, cfg.data.holdout_classes)
    names = [spec.name for spec in train_specs + holdout_specs]

    rows, summary = [], []
    for stage, model in stages:
        result = label_correlation(model, names)
        rows += [[stage, name] + list(row) for name, row in zip(names, result.matrix)]
        summary.append([stage, result.mean_off_diagonal, result.max_off_diagonal])
    write_tsv(_output_dir(inv) / "label_correlation.tsv", ["stage", "label"] + names, rows)
    header = ["stage", "mean_off_diagonal", "max_off_diagonal"]
    print(aligned_table(header, summary, title=f"label correlation over {len(names)} classes"), end="")
    return EXIT_OK


HANDLERS = {
    "train": run_train,
    "eval": run_eval,
    "zeroshot": run_zeroshot,
    "gradcheck": run_gradcheck,
    "ablate": run_ablate,
    "params": run_params,
    "gen-data": run_gen_data,
    "label-correlation": run_label_correlation,
}


def execute(inv: CommandInvocation) -> int:
    """Run one command and map its failure, if any, to an exit code"""
    if inv.config is None:
        try:
            inv.config = load_config(inv.config_path, inv.overrides)
        except ConfigurationError as e:
            logger.error("%s", e)
            return EXIT_USAGE
    try:
        return HANDLERS[inv.subcommand](inv)
    except ConfigurationError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except (M2ClipError, OSError) as e:
        logger.error("%s failed: %s", inv.subcommand, e)
        return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    defaults = env_defaults()
    args = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--log-level", default=defaults["log_level"])
    pre.add_argument("--log-file", default=defaults["log_file"])
    known, _ = pre.parse_known_args(args)
    configure_logging(known.log_level or "INFO", known.log_file)

    try:
        invocation = parse_invocation(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except ConfigurationError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    return execute(invocation)


if __name__ == "__main__":
    sys.exit(main())
