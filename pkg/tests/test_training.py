import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from m2clip.decoder import HEADS
from m2clip.exceptions import NonFiniteError
from m2clip.gradcheck import analytic_gradients, perturb_parameters
from m2clip.optim import build_optimizer
from m2clip.tensor import ComputationTape, backward
from m2clip_harness.evaluation import evaluate_supervised, evaluate_zero_shot, masked_word_accuracy
from m2clip_harness.synthetic import DatasetSplits
from m2clip_harness.trainer import StepTracker, build_model, first_non_finite, supervised_score, train

logger = logging.getLogger("test")


def snapshot(model):
    return {name: param.data.copy() for name, param in model.named_parameters()}


@pytest.fixture
def step_tracker():
    return StepTracker()


@pytest.mark.order(1)
def test_zero_epochs_leave_the_model_untouched(make_config, vocab, tiny_splits):
    logger.info("Starting zero-epoch training test")
    cfg = make_config(epochs=0)
    model = build_model(cfg, vocab)
    before = snapshot(model)
    model, report = train(model, tiny_splits, cfg)
    assert model.step == 0 and report.last is None
    after = snapshot(model)
    assert all(np.array_equal(before[name], after[name]) for name in before)


@pytest.mark.order(2)
def test_zero_learning_rate_changes_nothing(make_config, vocab, tiny_splits):
    cfg = make_config(learning_rate=0.0, optimizer="sgd")
    model = build_model(cfg, vocab)
    before = snapshot(model)
    model, _ = train(model, tiny_splits, cfg)
    assert model.step == 2
    after = snapshot(model)
    assert all(np.array_equal(before[name], after[name]) for name in before), "lr = 0 must not move parameters"


@pytest.mark.slow
@pytest.mark.order(3)
def test_training_moves_only_trainable_parameters(tiny_model, tiny_cfg, tiny_splits, step_tracker):
    logger.info("Starting frozen backbone training test")
    before = snapshot(tiny_model)
    model, report = train(tiny_model, tiny_splits, tiny_cfg, step_tracker)

    for name, param in model.named_parameters():
        if param.trainable:
            continue
        assert np.array_equal(before[name], param.data), f"Frozen parameter {name} changed during training"
    moved = [
        name
        for name, param in model.named_parameters()
        if param.trainable and not np.array_equal(before[name], param.data)
    ]
    assert any(name.startswith("video.") for name in moved), "TED-Adapters should receive updates"
    assert "decoder.vc_head.weight" in moved
    assert all(param.grad is None for param in model.parameters()), "Gradients are cleared after training"

    assert model.step == 2
    record = report.last
    assert record.epoch == 1 and record.step == 2
    assert np.isfinite(record.loss_total)
    assert record.vc_top1 is not None and record.zeroshot_top1 is not None
    assert record.trainable_params < record.total_params

    stats = step_tracker.get_step_stats()
    assert stats["count"] == 2 and stats["failures"] == 0
    assert stats["last_loss"] is not None
    assert len(step_tracker.get_slowest_steps(1)) == 1


@pytest.mark.slow
@pytest.mark.order(4)
def test_training_honours_max_steps(make_config, vocab, tiny_splits):
    cfg = make_config(epochs=5, max_steps=3, batch_size=2)
    model, report = train(build_model(cfg, vocab), tiny_splits, cfg)
    assert model.step == 3
    assert [r.step for r in report.records] == [3], "Stopping early still records one evaluation"
    assert report.last.epoch == 1


@pytest.mark.order(5)
def test_non_finite_input_is_named(make_config, vocab, tiny_splits, step_tracker):
    logger.info("Starting non-finite loss test")
    cfg = make_config()
    clips = tiny_splits.train.clips.copy()
    clips[0, 0, 0, 0, 0] = np.nan
    broken = DatasetSplits(
        train=replace(tiny_splits.train, clips=clips), val=tiny_splits.val, holdout=tiny_splits.holdout
    )
    with pytest.raises(NonFiniteError) as info:
        train(build_model(cfg, vocab), broken, cfg, step_tracker)
    assert info.value.tensor_name == "input clips"
    assert step_tracker.get_step_stats()["failures"] == 1


def test_first_non_finite_prefers_parameters_over_tape(tiny_model, tiny_splits):
    clips, labels = tiny_splits.train.clips[:2], tiny_splits.train.labels[:2]
    tiny_model.registry.video[1].w_dn.data[0, 0] = np.inf
    with ComputationTape() as tape:
        tiny_model.compute_losses(clips, labels, np.random.default_rng(0))
    assert first_non_finite(tiny_model, tape, clips) == "video.layer1.adapter.w_dn"


def test_sgd_step_follows_the_gradient(tiny_model, tiny_splits):
    params = tiny_model.trainable_parameters()
    optimizer = build_optimizer("sgd", params, 0.5)
    clips, labels = tiny_splits.train.clips[:4], tiny_splits.train.labels[:4]
    with ComputationTape() as tape:
        loss = tiny_model.compute_losses(clips, labels, np.random.default_rng(0)).total
    backward(loss, tape)
    head = tiny_model.decoder.vc_head.weight
    expected = (head.data - 0.5 * head.grad).astype(np.float32).astype(np.float64)
    optimizer.step()
    assert np.array_equal(head.data, expected)


@pytest.mark.slow
@pytest.mark.order(6)
def test_keep_best_restores_the_best_evaluated_epoch(make_config, vocab, tiny_splits):
    logger.info("Starting best-epoch selection test")
    cfg = make_config(epochs=4, learning_rate=5e-2)
    model, report = train(build_model(cfg, vocab), tiny_splits, cfg)
    scores = [supervised_score(record) for record in report.records]
    assert report.selected_epoch == report.records[scores.index(max(scores))].epoch, "Ties keep the earlier epoch"
    assert evaluate_supervised(model, tiny_splits.val, "vc_head").top1 == report.selected.vc_top1
    assert model.step == 8, "Restoring values does not rewind the step counter"

    cfg = make_config(epochs=2, keep_best=False)
    _, report = train(build_model(cfg, vocab), tiny_splits, cfg)
    assert report.selected_epoch is None and report.selected is report.last


@pytest.mark.slow
@pytest.mark.order(7)
def test_frozen_parameters_survive_a_hundred_steps(make_config, vocab, tiny_splits):
    cfg = make_config(epochs=60, max_steps=100, eval_every=25)
    model = build_model(cfg, vocab)
    before = snapshot(model)
    model, _ = train(model, tiny_splits, cfg)
    assert model.step == 100
    for name, param in model.named_parameters():
        if not param.trainable:
            assert param.data.tobytes() == before[name].tobytes(), f"Frozen parameter {name} changed"


def _head_weighted_model(make_config, vocab):
    cfg = make_config()
    cfg.heads.contrastive_weight = 0.5
    cfg.heads.cmc_weight = 1.5
    cfg.heads.cmlm_weight = 0.25
    cfg.heads.vc_weight = 2.0
    model = build_model(cfg, vocab)
    perturb_parameters(model.parameters(), np.random.default_rng(3))
    return model


def _loss_fn(model, clips, labels, name):
    # Fresh masking stream per call so every head sees the same masked prompts
    return lambda: model.compute_losses(clips, labels, np.random.default_rng(5)).part(name)


def test_total_gradient_is_the_weighted_sum_of_head_gradients(make_config, vocab, tiny_splits):
    logger.info("Starting gradient linearity test")
    model = _head_weighted_model(make_config, vocab)
    params = model.trainable_parameters()
    clips, labels = tiny_splits.train.clips[:4], tiny_splits.train.labels[:4]
    parts = model.compute_losses(clips, labels, np.random.default_rng(5))
    present = [name for name in HEADS if parts.part(name) is not None]
    assert "vc" in present and "contrastive" in present

    expected = [np.zeros_like(p.data) for p in params]
    for name in present:
        grads = analytic_gradients(_loss_fn(model, clips, labels, name), params)
        for acc, grad in zip(expected, grads):
            acc += parts.weights[name] * grad
    total = analytic_gradients(_loss_fn(model, clips, labels, "total"), params)
    for param, got, want in zip(params, total, expected):
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12, err_msg=param.name)


def test_disabling_vc_zeroes_only_its_share_of_the_gradient(make_config, vocab, tiny_splits):
    model = _head_weighted_model(make_config, vocab)
    params = model.trainable_parameters()
    clips, labels = tiny_splits.train.clips[:4], tiny_splits.train.labels[:4]
    full = analytic_gradients(_loss_fn(model, clips, labels, "total"), params)
    vc_only = analytic_gradients(_loss_fn(model, clips, labels, "vc"), params)

    model.heads.vc = False
    without = analytic_gradients(_loss_fn(model, clips, labels, "total"), params)
    head_params = {id(p) for p in model.decoder.vc_head.parameters()}
    for param, f, v, w in zip(params, full, vc_only, without):
        if id(param) in head_params:
            assert not np.any(w), f"{param.name} still receives gradient with the VC head off"
        else:
            np.testing.assert_allclose(w, f - 2.0 * v, rtol=1e-9, atol=1e-12, err_msg=param.name)


# ------------- DEFAULT CONFIG ACCEPTANCE -------------


@pytest.mark.slow
@pytest.mark.xdist_group("default_run")
def test_default_run_reaches_supervised_accuracy(default_run, default_splits):
    logger.info("Starting default-config supervised accuracy test")
    model = default_run.model
    vc = evaluate_supervised(model, default_splits.val, "vc_head")
    cmc = evaluate_supervised(model, default_splits.val, "cmc_similarity")
    assert vc.top1 >= 0.95, f"VC head top-1 {vc.top1:.3f}"
    assert cmc.top1 >= 0.90, f"CMC path top-1 {cmc.top1:.3f}"


@pytest.mark.slow
@pytest.mark.xdist_group("default_run")
def test_default_run_zero_shot_beats_chance(default_run, default_splits):
    holdout = default_splits.holdout
    chance = 1.0 / len(holdout.label_names)
    n = len(holdout)
    bar = chance + 3.0 * math.sqrt(chance * (1.0 - chance) / n)
    top1 = evaluate_zero_shot(default_run.model, holdout).top1
    assert top1 > bar, f"zero-shot top-1 {top1:.3f} not above {bar:.3f} over {n} clips"


@pytest.mark.slow
@pytest.mark.xdist_group("default_run")
def test_default_run_loss_falls_over_the_first_epochs(default_run):
    losses = [record.loss_total for record in default_run.report.records[:5]]
    assert len(losses) == 5
    assert all(later < earlier for earlier, later in zip(losses, losses[1:])), losses


@pytest.mark.slow
@pytest.mark.xdist_group("default_run")
def test_default_run_keeps_the_backbone_and_cmlm_copies(default_run, default_splits):
    model = default_run.model
    assert model.step >= 100
    for name, param in model.named_parameters():
        if not param.trainable:
            assert param.data.tobytes() == default_run.initial[name].tobytes(), f"Frozen parameter {name} changed"
    assert model.decoder.cmlm.copies_match(model.text.layer(model.cfg.text_layers))

    accuracy = masked_word_accuracy(model, default_splits.val)
    chance = 1.0 / len(model.vocab)
    assert accuracy > 2.0 * chance, f"masked-word accuracy {accuracy:.3f}, chance {chance:.4f}"
