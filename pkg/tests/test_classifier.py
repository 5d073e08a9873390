import math

import numpy as np
import pytest

from idnorm import diffcore as dc
from idnorm.classifier import (VARIANTS, ClaLossWeights, ClassifierConfig, ClassifierModel,
                               ClassifierTrainConfig, DenseBlock, IdentityBlock, StreamData,
                               cla_loss, classify, matched_hidden, predict, task_loss,
                               train_classifier, variant_config)
from idnorm.errors import ConfigurationError, DimensionError, TargetRangeError
from idnorm.moe import GateDecision, MoEBlock, MoEConfig
from idnorm.nn import OptimizerConfig, mlp_param_count
from idnorm.tasks import AU_DETECT, AU_INTENSITY, FER, TaskSpec

SMALL = ClassifierConfig(sample_dim=8, feature_hidden=16, feature_dim=6, expert_hidden=8)


def model_for(kind, config=SMALL, seed=0):
    return ClassifierModel(config, TaskSpec(kind), np.random.default_rng(seed))


@pytest.mark.parametrize("kind", [AU_DETECT, AU_INTENSITY, FER])
def test_output_shape_and_decisions(kind):
    model = model_for(kind)
    x = np.random.default_rng(1).normal(size=(5, 8))
    out, decisions = classify(x, x, model)
    assert out.shape == (5, TaskSpec(kind).n_labels) and np.all(np.isfinite(out.data))
    assert set(decisions) == {"m_i.normalized", "m_i.original", "m_o"}
    for d in decisions.values():
        assert np.all((d.gates.data > 0).sum(axis=1) == 2)
        assert np.max(np.abs(d.probs.data.sum(axis=1) - 1)) < 1e-9
        assert np.all(d.gates.data.sum(axis=1) <= 1 + 1e-15)


def test_streams_are_not_interchangeable():
    model = model_for(FER)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    ab, _ = classify(a, b, model)
    ba, _ = classify(b, a, model)
    assert not np.allclose(ab.data, ba.data)
    ids = [{id(p) for p in blk.parameters()} for blk in model.input_blocks]
    assert not ids[0] & ids[1]


def test_eval_mode_is_deterministic():
    model = model_for(AU_DETECT)
    x = np.random.default_rng(3).normal(size=(4, 8))
    a, _ = classify(x, x, model, training=False)
    b, _ = classify(x, x, model, training=False)
    assert np.array_equal(a.data, b.data)


def test_stream_dimension_mismatch():
    with pytest.raises(DimensionError):
        classify(np.ones((2, 8)), np.ones((2, 7)), model_for(FER))


def test_saturated_predictions_have_tiny_loss():
    fer = TaskSpec(FER)
    logits = np.full((3, 7), -10.0)
    logits[np.arange(3), [0, 4, 6]] = 10.0
    assert task_loss(logits, np.array([0, 4, 6]), fer).item() < 1e-6
    au = TaskSpec(AU_DETECT)
    t = np.random.default_rng(4).integers(0, 2, (3, 12))
    assert task_loss(np.where(t == 1, 20.0, -20.0), t, au).item() < 1e-6
    inten = TaskSpec(AU_INTENSITY)
    y = np.random.default_rng(5).uniform(0, 5, (3, 5))
    assert task_loss(y, y, inten).item() == 0.0


def test_target_validation():
    with pytest.raises(TargetRangeError):
        task_loss(np.zeros((2, 7)), np.array([0, 7]), TaskSpec(FER))
    with pytest.raises(TargetRangeError):
        task_loss(np.zeros((1, 12)), np.full((1, 12), 2), TaskSpec(AU_DETECT))
    with pytest.raises(TargetRangeError):
        task_loss(np.zeros((1, 5)), np.full((1, 5), 5.5), TaskSpec(AU_INTENSITY))


def test_cla_loss_matches_hand_sum():
    task = TaskSpec(FER, 3)
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    targets = np.array([1, 2])
    probs = np.array([[0.5, 0.3, 0.2, 0.0], [0.1, 0.6, 0.2, 0.1]])
    gates = np.array([[0.5, 0.3, 0.0, 0.0], [0.0, 0.6, 0.2, 0.0]])
    d = GateDecision(dc.Value(probs), np.array([[0, 1], [1, 2]]), dc.Value(gates))
    w = ClaLossWeights(imp=0.001, gl=0.001)
    total, b = cla_loss(logits, targets, {"m_o": d}, task, w)

    ce = 0.0
    for row, t in zip(logits, targets):
        ce += -(row[t] - math.log(sum(math.exp(v) for v in row)))
    ce /= 2
    imp = [0.5, 0.9, 0.2, 0.0]
    mean = sum(imp) / 4
    cv2 = (sum((v - mean) ** 2 for v in imp) / 4) / mean ** 2
    H = lambda p: -sum(v * math.log(v) for v in p if v > 0)
    marginal = [(probs[0][j] + probs[1][j]) / 2 for j in range(4)]
    hand = ce + 0.001 * cv2 + 0.001 * (-H(marginal) + (H(probs[0]) + H(probs[1])) / 2)
    assert abs(total.item() - hand) < 1e-10
    assert abs(sum(b.weighted.values()) - b.total) < 1e-10


def test_default_loss_weights():
    w = ClaLossWeights()
    assert (w.imp, w.gl) == (0.001, 0.001)


def test_variants():
    assert variant_config("full") == ClassifierConfig()
    assert variant_config("m=4") == ClassifierConfig()
    assert variant_config("m=1").k == 1
    assert variant_config("m=0").input_block == "identity"
    assert variant_config("no_Mi").input_block == "mlp"
    assert variant_config("no_Mo").output_block == "mlp"
    with pytest.raises(ConfigurationError):
        variant_config("bogus")
    for v in VARIANTS:
        model_for(FER, variant_config(v, SMALL))


def test_single_expert_gates_are_one():
    model = model_for(FER, variant_config("m=1", SMALL))
    _, decisions = classify(np.ones((3, 8)), np.ones((3, 8)), model)
    for d in decisions.values():
        assert np.array_equal(d.gates.data, np.ones((3, 1)))


def test_dense_baseline_matches_moe_parameter_count():
    for dim in (32, 64):
        moe = MoEBlock(dim, MoEConfig(4, 2, 32), np.random.default_rng(0))
        dense = DenseBlock(dim, matched_hidden(dim, MoEConfig(4, 2, 32)), np.random.default_rng(0))
        assert abs(dense.num_parameters() - moe.num_parameters()) <= 2 * dim + 1
    assert isinstance(model_for(FER, variant_config("m=0", SMALL)).output_block, IdentityBlock)
    assert mlp_param_count(2, 3, 4) == 2 * 3 + 3 + 3 * 4 + 4


def fer_batch(n=32, seed=0):
    rng = np.random.default_rng(seed)
    return StreamData(rng.normal(size=(n, 8)), rng.normal(size=(n, 8)), rng.integers(0, 7, n))


def test_zero_learning_rate_leaves_parameters_unchanged():
    model = model_for(FER)
    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    cfg = ClassifierTrainConfig(epochs=1, batch_size=8, optimizer=OptimizerConfig(lr=0.0))
    train_classifier(fer_batch(), model, TaskSpec(FER), ClaLossWeights(), cfg,
                     np.random.default_rng(0))
    assert before == {k: v.tobytes() for k, v in model.state_dict().items()}


def test_overfits_a_single_batch():
    data = fer_batch(32, seed=1)
    model = model_for(FER, seed=2)
    cfg = ClassifierTrainConfig(epochs=500, batch_size=32, optimizer=OptimizerConfig(lr=1e-2))
    train_classifier(data, model, TaskSpec(FER), ClaLossWeights(), cfg, dc.make_rng(0, "o"))
    pred = predict(model, data.I_n, data.I_o).argmax(axis=1)
    assert np.mean(pred == data.targets) == 1.0


def test_training_is_bit_reproducible():
    finals = []
    for _ in range(2):
        model = model_for(AU_DETECT, seed=3)
        rng = np.random.default_rng(4)
        data = StreamData(rng.normal(size=(40, 8)), rng.normal(size=(40, 8)),
                          rng.integers(0, 2, (40, 12)))
        cfg = ClassifierTrainConfig(epochs=3, batch_size=16)
        train_classifier(data, model, TaskSpec(AU_DETECT), ClaLossWeights(), cfg,
                         dc.make_rng(5, "t"))
        finals.append(predict(model, data.I_n, data.I_o).tobytes())
    assert finals[0] == finals[1]


def test_unselected_experts_receive_zero_gradient_during_training():
    model = model_for(FER, seed=6)
    seen = []

    def check(step, m, decisions):
        blocks = {"m_i.normalized": m.input_blocks[0], "m_i.original": m.input_blocks[1],
                  "m_o": m.output_block}
        for name, d in decisions.items():
            used = set(d.selected.ravel())
            for e, expert in enumerate(blocks[name].experts):
                if e not in used:
                    seen.append(all(not p.grad.any() for p in expert.parameters()))

    cfg = ClassifierTrainConfig(epochs=20, batch_size=2)
    train_classifier(fer_batch(8), model, TaskSpec(FER), ClaLossWeights(), cfg,
                     dc.make_rng(0, "s"), on_step=check)
    assert seen and all(seen)


def test_adding_constant_to_logits_keeps_argmax():
    logits = np.random.default_rng(7).normal(size=(10, 7))
    assert np.array_equal(logits.argmax(1), (logits + 3.3).argmax(1))
