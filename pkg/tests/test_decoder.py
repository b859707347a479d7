import logging
from dataclasses import replace

import numpy as np
import pytest
from assertpy import assert_that

from m2clip.decoder import (
    HEADS,
    HeadConfig,
    MultiTaskLoss,
    Temperature,
    aggregate_losses,
    cmc_loss,
    cmlm_forward,
    cmlm_loss,
    contrastive_loss,
    contrastive_similarities,
    ground_truth_from_labels,
    vc_forward_loss,
    zero_shot_predict,
)
from m2clip.exceptions import ConfigurationError, ContractError
from m2clip.model import CMLMConfig, M2Clip
from m2clip.nn import Linear
from m2clip.tensor import Tensor, as_tensor
from m2clip.tokenizer import normalize, prompt_for
from m2clip_harness.trainer import build_model

logger = logging.getLogger("test")


def test_contrastive_loss_uniform_predictions_give_ln2():
    logger.info("Starting contrastive KL reference test")
    uniform = Tensor(np.full((2, 2), 0.5))
    loss = contrastive_loss(uniform, uniform, np.eye(2)).item()
    assert abs(loss - np.log(2)) < 1e-12, f"Expected ln 2, got {loss}"

    shared = contrastive_loss(uniform, uniform, ground_truth_from_labels([3, 3])).item()
    assert abs(shared) < 1e-12, "Uniform prediction matches an all-positive ground truth exactly"


def test_contrastive_loss_needs_a_positive_per_row():
    uniform = Tensor(np.full((2, 2), 0.5))
    with pytest.raises(ContractError):
        contrastive_loss(uniform, uniform, np.array([[1.0, 1.0], [0.0, 0.0]]))


def test_ground_truth_marks_shared_labels():
    gt = ground_truth_from_labels([0, 1, 0])
    expected = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=np.float64)
    assert np.array_equal(gt, expected)


def test_contrastive_similarities_are_row_distributions(rng):
    logger.info("Starting contrastive similarity test")
    videos, texts = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
    p_v2t, p_t2v = contrastive_similarities(videos, texts, as_tensor(0.07))
    assert np.allclose(p_v2t.numpy().sum(axis=1), 1.0)
    assert np.allclose(p_t2v.numpy().sum(axis=1), 1.0)

    logits = (p_v2t.numpy(), p_t2v.numpy())
    swapped_v2t, _ = contrastive_similarities(texts, videos, as_tensor(0.07))
    assert np.allclose(swapped_v2t.numpy(), logits[1]), "t2v is the row-softmax of the transposed logits"


def test_zero_shot_argmax_is_temperature_invariant(rng):
    logger.info("Starting zero-shot temperature invariance test")
    videos, labels = Tensor(rng.normal(size=(10, 6))), Tensor(rng.normal(size=(5, 6)))
    cold, cold_probs = zero_shot_predict(videos, labels, as_tensor(0.01))
    warm, warm_probs = zero_shot_predict(videos, labels, as_tensor(10.0))
    assert np.array_equal(cold, warm), "Argmax must not depend on the temperature"
    assert np.allclose(warm_probs.numpy().sum(axis=-1), 1.0)
    assert cold_probs.numpy().max() > warm_probs.numpy().max()


def test_zero_shot_ties_go_to_lowest_index():
    labels = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    prediction, probs = zero_shot_predict(Tensor(np.array([1.0, 0.0])), labels, as_tensor(0.07))
    assert prediction == 0
    assert probs.shape == (3,)

    prediction, _ = zero_shot_predict(Tensor(np.array([1.0, 1.0])), labels, as_tensor(0.07))
    assert prediction == 0, "Equal similarities resolve to the first label"


def test_cmc_loss_matches_manual_cross_entropy(rng):
    logger.info("Starting CMC loss test")
    videos, labels = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    targets = [4, 0, 2]
    tau = 0.5
    loss = cmc_loss(Tensor(videos), Tensor(labels), targets, as_tensor(tau)).item()

    v = videos / np.linalg.norm(videos, axis=1, keepdims=True)
    w = labels / np.linalg.norm(labels, axis=1, keepdims=True)
    logits = v @ w.T / tau
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -np.mean(log_probs[np.arange(3), targets])
    assert abs(loss - expected) < 1e-10


def test_vc_head_starts_at_chance(rng):
    head = Linear(rng, 6, 4, trainable=True, zero_init=True)
    logits, loss = vc_forward_loss(Tensor(rng.normal(size=(3, 6))), head, [0, 1, 3])
    assert np.all(logits.numpy() == 0.0)
    assert abs(loss.item() - np.log(4)) < 1e-12


def test_cmlm_loss_without_masks_is_none():
    logits = Tensor(np.zeros((2, 4, 7)))
    assert cmlm_loss(logits, np.zeros((2, 4)), [[], []]) is None


def test_cmlm_loss_uniform_logits():
    logits = Tensor(np.zeros((2, 4, 7)))
    loss = cmlm_loss(logits, np.array([[0, 1, 2, 3], [4, 5, 6, 0]]), [[1], [0, 3]])
    assert abs(loss.item() - np.log(7)) < 1e-12
    single = cmlm_loss(Tensor(np.zeros((4, 7))), np.array([0, 1, 2, 3]), [2])
    assert abs(single.item() - np.log(7)) < 1e-12


def test_aggregate_losses_weights_enabled_heads():
    logger.info("Starting loss aggregation test")
    parts = MultiTaskLoss(
        contrastive=as_tensor(1.0),
        cmc=as_tensor(2.0),
        cmlm=None,
        vc=as_tensor(4.0),
        weights={"contrastive": 0.5, "cmc": 1.0, "cmlm": 1.0, "vc": 2.0},
    )
    enabled = {"contrastive": True, "cmc": True, "cmlm": True, "vc": False}
    total = aggregate_losses(parts, enabled)
    assert total.item() == 2.5, "Disabled heads and absent losses contribute nothing"
    assert parts.as_floats() == {"contrastive": 1.0, "cmc": 2.0, "cmlm": None, "vc": 4.0, "total": 2.5}

    with pytest.raises(ConfigurationError):
        aggregate_losses(parts, {name: False for name in HEADS})


def test_temperature_floor():
    logger.info("Starting temperature floor test")
    tau = Temperature(init=0.005, floor=0.01)
    assert tau.value() == 0.01
    assert tau().item() == 0.01
    warm = Temperature(init=0.07)
    assert_that(warm.value()).is_close_to(0.07, 1e-6)
    assert not Temperature(trainable=False).log_tau.trainable


def test_head_config_validation():
    with pytest.raises(ConfigurationError):
        HeadConfig(contrastive=False, cmc=False, cmlm=False, vc=False).validate()
    with pytest.raises(ConfigurationError):
        HeadConfig(vc_weight=-1.0).validate()
    with pytest.raises(ConfigurationError):
        HeadConfig(init_temperature=0.001).validate()


def test_cmlm_block_copies_final_text_layer(tiny_model):
    logger.info("Starting CMLM block copy test")
    block = tiny_model.decoder.cmlm
    final = tiny_model.text.layer(tiny_model.cfg.text_layers)
    assert block.copies_match(final), "Frozen copies must equal the final text layer"

    trainable = sorted(name for name, p in block.named_parameters() if p.trainable)
    assert trainable == sorted(
        ["adapter.w_dn", "adapter.b_dn", "adapter.w_up", "adapter.b_up", "mlm_head.weight", "mlm_head.bias"]
    ), f"Unexpected trainable CMLM parameters: {trainable}"

    block.attn.query.weight.data[0, 0] += 1.0
    assert not block.copies_match(final)


def test_cmlm_forward_shapes(tiny_model, tiny_splits):
    clips = tiny_splits.train.clips[:2]
    masked = tiny_model.masked_prompts([0, 1], np.random.default_rng(0))
    predicted = tiny_model.predict_masked(masked, clips)
    assert predicted.shape == (2, tiny_model.cfg.max_text_len)

    _, frame_embeds = tiny_model.encode_video(clips)
    z = Tensor(np.zeros((2, tiny_model.cfg.max_text_len, tiny_model.cfg.text_width)))
    logits = cmlm_forward(z, frame_embeds, tiny_model.decoder.cmlm)
    assert logits.shape == (2, tiny_model.cfg.max_text_len, len(tiny_model.vocab))


def test_label_words_only_masking(tiny_cfg, vocab):
    logger.info("Starting label-word masking test")
    model = M2Clip(
        tiny_cfg.encoder_config(),
        vocab,
        ["dark square moving up"],
        cmlm=CMLMConfig(mask_ratio=1.0, label_words_only=True),
    )
    masked = model.masked_prompts([0], np.random.default_rng(0))[0]
    template = len(normalize(prompt_for("")))
    assert masked.mask_positions == [template + 1, template + 2, template + 3, template + 4]


def test_compute_losses_covers_every_head(tiny_model, tiny_splits):
    logger.info("Starting multi-task loss test")
    clips, labels = tiny_splits.train.clips[:4], tiny_splits.train.labels[:4]
    parts = tiny_model.compute_losses(clips, labels, np.random.default_rng(0))
    values = parts.as_floats()
    for name in HEADS:
        assert values[name] is not None and np.isfinite(values[name]), f"{name} loss missing"
    assert abs(values["total"] - sum(values[name] for name in HEADS)) < 1e-10, "Unit weights sum the heads"
    assert abs(values["vc"] - np.log(len(tiny_model.labels))) < 1e-12, "Zero-init VC head starts at chance"


def test_disabled_heads_have_no_loss(make_config, vocab, tiny_splits):
    cfg = make_config()
    cfg.heads = replace(cfg.heads, cmc=False, cmlm=False, vc=False)
    model = build_model(cfg.validate(), vocab)
    assert model.decoder.cmlm is None and model.decoder.vc_head is None
    parts = model.compute_losses(tiny_splits.train.clips[:4], tiny_splits.train.labels[:4], np.random.default_rng(0))
    assert parts.cmc is None and parts.cmlm is None and parts.vc is None
    assert parts.total.item() == parts.contrastive.item()
    with pytest.raises(ConfigurationError):
        model.predict_scores(tiny_splits.train.clips[:2], "vc_head")
