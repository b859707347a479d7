import logging

import numpy as np
import pytest

from m2clip.adapters import TEDAdapter, TextAdapter, ted_forward, text_adapter_forward
from m2clip.exceptions import ContractError
from m2clip.gradcheck import finite_difference_check, perturb_parameters
from m2clip.nn import AttentionWeights, multi_head_attention
from m2clip.tensor import (
    Parameter,
    Tensor,
    add,
    conv1d_temporal,
    conv2d_spatial,
    cross_entropy,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    softmax,
    tsum,
)

logger = logging.getLogger("test")


def _weighted_sum(out, weights):
    return tsum(mul(out, weights))


PRIMITIVES = {
    "conv1d_temporal": lambda x, p: conv1d_temporal(x, p["kernel3"], p["bias"]),
    "conv2d_spatial": lambda x, p: conv2d_spatial(x, p["kernel4"], p["bias"]),
    "layer_norm": lambda x, p: layer_norm(matmul(x, p["mix"]), p["gamma"], p["bias"]),
    "matmul": lambda x, p: matmul(x, p["mix"]),
    "softmax": lambda x, p: softmax(matmul(x, p["mix"]), axis=-1),
    "log_softmax": lambda x, p: log_softmax(matmul(x, p["mix"]), axis=-1),
    "gelu": lambda x, p: gelu(matmul(x, p["mix"])),
    "l2_normalize": lambda x, p: l2_normalize(matmul(x, p["mix"])),
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op_name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(op_name, seed):
    logger.info("Starting gradient check for %s (seed %d)", op_name, seed)
    rng = np.random.default_rng(seed)
    channels = 3
    params = {
        "kernel3": Parameter(rng.normal(size=(3, channels, channels)), name="kernel3"),
        "kernel4": Parameter(rng.normal(size=(3, 3, channels, channels)), name="kernel4"),
        "mix": Parameter(rng.normal(size=(channels, channels)), name="mix"),
        "gamma": Parameter(rng.normal(1.0, 0.1, size=channels), name="gamma"),
        "bias": Parameter(rng.normal(size=channels), name="bias"),
    }
    x = Parameter(rng.normal(size=(4, 3, channels)), name="x")
    weights = rng.normal(size=(4, 3, channels))
    op = PRIMITIVES[op_name]

    report = finite_difference_check(lambda: _weighted_sum(op(x, params), weights), [x] + list(params.values()))
    logger.debug("\n%s", report.format_table())
    assert report.passed, f"{op_name} gradient mismatch: max relative error {report.max_rel_error:.3e}"


def test_cross_entropy_gradient(rng):
    logger.info("Starting cross-entropy gradient check")
    logits = Parameter(rng.normal(size=(4, 5)), name="logits")
    report = finite_difference_check(lambda: cross_entropy(logits, [0, 3, 3, 1]), [logits])
    assert report.passed, f"cross-entropy gradient mismatch: {report.max_rel_error:.3e}"


def test_matmul_gradients_for_both_operands(rng):
    a = Parameter(rng.normal(size=(2, 4, 3)), name="a")
    b = Parameter(rng.normal(size=(3, 5)), name="b")
    weights = rng.normal(size=(2, 4, 5))
    report = finite_difference_check(lambda: _weighted_sum(matmul(a, b), weights), [a, b])
    assert report.names() == ["a", "b"]
    assert report.passed, f"matmul gradient mismatch: {report.max_rel_error:.3e}"


def test_multi_head_attention_gradients(rng):
    logger.info("Starting attention gradient check")
    attention = AttentionWeights(rng, 8)
    for param in attention.parameters():
        param.trainable = True
    perturb_parameters(attention.parameters(), rng, std=0.1)
    attention.assign_names("attn.")
    q = Parameter(rng.normal(size=(2, 8)), name="q")
    kv = Parameter(rng.normal(size=(3, 8)), name="kv")
    weights = rng.normal(size=(2, 8))

    report = finite_difference_check(
        lambda: _weighted_sum(multi_head_attention(q, kv, attention, heads=2), weights),
        [q, kv] + attention.parameters(),
    )
    logger.debug("\n%s", report.format_table())
    assert len(report.entries) == 10
    assert report.passed, f"attention gradient mismatch for {[e.name for e in report.failures()]}"


def test_small_wrong_entry_fails_beside_a_large_one():
    logger.info("Starting elementwise relative error test")
    p = Parameter(np.array([0.3, -0.2]), name="p")
    scale = np.array([1.0, 1e-4])

    def partly_untracked():
        # The second entry's true slope is 1.5e-4; the tape only sees 1e-4 of it
        return add(tsum(mul(p, scale)), 5e-5 * p.data[1])

    report = finite_difference_check(partly_untracked, [p])
    assert not report.passed, "A 33% error on the small entry must not hide behind the large one"
    entry = report.entries[0]
    assert entry.checked == entry.total == 2
    assert entry.max_rel_error == pytest.approx(1.0 / 3.0, rel=1e-4)
    assert entry.max_abs_error == pytest.approx(5e-5, rel=1e-4)

    exact = finite_difference_check(lambda: tsum(mul(p, scale)), [p])
    assert exact.passed and exact.max_rel_error < 1e-6


def test_ted_adapter_gradients_in_every_mode(rng):
    logger.info("Starting TED-Adapter gradient check")
    adapter = TEDAdapter(rng, width=8, bottleneck=4)
    perturb_parameters(adapter.parameters(), rng, std=0.2)
    adapter.assign_names("ted.")
    z = Tensor(rng.normal(size=(3, 5, 8)))
    weights = rng.normal(size=(3, 5, 8))

    for mode in ("parallel", "sequential", "te_only", "td_only"):
        report = finite_difference_check(
            lambda: _weighted_sum(ted_forward(z, adapter, mode, (2, 2)), weights),
            adapter.parameters(),
            max_entries=6,
            rng=np.random.default_rng(0),
        )
        assert report.passed, f"{mode}: max relative error {report.max_rel_error:.3e}"


def test_text_adapter_gradients(rng):
    logger.info("Starting text adapter gradient check")
    adapter = TextAdapter(rng, width=6, bottleneck=2)
    perturb_parameters(adapter.parameters(), rng, std=0.3)
    z = Tensor(rng.normal(size=(4, 6)))
    weights = rng.normal(size=(4, 6))
    report = finite_difference_check(
        lambda: _weighted_sum(text_adapter_forward(z, adapter), weights), adapter.parameters()
    )
    assert report.passed, f"text adapter gradient mismatch: {report.max_rel_error:.3e}"


def test_untracked_dependence_is_reported(rng):
    logger.info("Starting gradient mismatch detection test")
    p = Parameter(rng.normal(size=3), name="p")

    def detached():
        # Reads p's values without recording, so the analytic gradient is zero
        return tsum(mul(Tensor(p.data), 2.0))

    report = finite_difference_check(detached, [p])
    assert not report.passed, "A zero analytic gradient against a non-zero numeric one must fail"
    assert report.names() == ["p"]
    assert "FAIL" in report.format_table()
    assert report.to_tsv().splitlines()[1].endswith("\t0"), "TSV row must flag the failure"


def test_frozen_parameters_are_skipped(rng):
    logger.info("Starting frozen parameter skip test")
    trainable = Parameter(rng.normal(size=2), name="trainable")
    frozen = Parameter(rng.normal(size=2), name="frozen", trainable=False)
    report = finite_difference_check(lambda: tsum(mul(trainable, frozen)), [trainable, frozen])
    assert report.names() == ["trainable"], f"Only trainable parameters are checked, got {report.names()}"
    assert report.passed


def test_bad_step_is_rejected():
    logger.info("Starting finite-difference step contract test")
    p = Parameter(np.ones(1))
    with pytest.raises(ContractError):
        finite_difference_check(lambda: tsum(p), [p], h=0.0)


def test_model_loss_gradients(tiny_model, tiny_splits):
    logger.info("Starting full-model gradient check")
    touched = perturb_parameters(tiny_model.parameters(), np.random.default_rng(3), std=0.05)
    assert touched == len(tiny_model.trainable_parameters()), "Every trainable tensor is perturbed"

    clips, labels = tiny_splits.train.clips[[0, 2, 4]], tiny_splits.train.labels[[0, 2, 4]]
    assert len(set(labels.tolist())) == 3, "Batch should hold distinct labels"

    def loss():
        return tiny_model.compute_losses(clips, labels, np.random.default_rng(0)).total

    report = finite_difference_check(
        loss, tiny_model.parameters(), max_entries=3, rng=np.random.default_rng(1), abs_floor=1e-5
    )
    logger.debug("\n%s", report.format_table())
    assert len(report.entries) == len(tiny_model.trainable_parameters())
    assert report.passed, f"Model gradients disagree for {[e.name for e in report.failures()]}"
