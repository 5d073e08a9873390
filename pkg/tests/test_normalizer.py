import numpy as np
import pytest

from idnorm import diffcore as dc
from idnorm.errors import DimensionError, NonFiniteLossError, NumericDomainError
from idnorm.gradsuite import normalizer_case, discriminator_case
from idnorm.gradcheck import check_gradients
from idnorm.nn import OptimizerConfig
from idnorm.normalizer import (LOSS_TERMS, Discriminator, EmbedderSuite, LinearEmbedder,
                               NormalizerConfig, NormalizerModel, NormalizerTrainConfig,
                               NormLossWeights, discriminator_loss, generator_adversarial_loss,
                               norm_loss, normalize, train_normalizer)
from idnorm.synthdata import FactorConfig, factor_readout, generate_pool
from idnorm.tasks import TaskSpec

S = 6


def hand_suite():
    """Embedders that read fixed coordinates, plus a linear discriminator."""
    eye = np.eye(S)
    suite = EmbedderSuite(
        identity=LinearEmbedder(eye[:2]),
        expression=LinearEmbedder(eye[2:5]),
        eyebrow=LinearEmbedder(eye[2:3]),
        perceptual=LinearEmbedder(2.0 * eye),
        contour=LinearEmbedder(eye[[0, 1, 5]]),
        discriminator=Discriminator(S, 3, np.random.default_rng(0)),
    )
    return suite


def hand_disc(pair, d):
    h = pair @ d.net.fc1.weight.data + d.net.fc1.bias.data
    from scipy.special import ndtr
    h = h * ndtr(h)
    return (h @ d.net.fc2.weight.data + d.net.fc2.bias.data)[..., 0]


def test_norm_loss_perfect_reconstruction():
    suite = hand_suite()
    I = np.random.default_rng(1).normal(size=(2, S))
    _, b = norm_loss(I, I, I, suite, NormLossWeights(), True)
    for term in ("rec", "perc", "lm", "exp", "eye"):
        assert b.raw[term] == 0.0
    assert abs(b.raw["id"]) < 1e-15


def test_orthogonal_identity_embeddings_give_unit_loss():
    suite = hand_suite()
    I_t = np.array([1.0, 0, 0, 0, 0, 0])
    I_n = np.array([0.0, 1, 0, 0, 0, 0])
    _, b = norm_loss(I_t, I_t, I_n, suite, NormLossWeights())
    assert b.raw["id"] == 1.0


def test_norm_loss_matches_hand_sum():
    suite = hand_suite()
    rng = np.random.default_rng(2)
    I_o, I_t, I_n = rng.normal(size=(3, 4, S))
    forced = np.array([True, False, True, False])
    w = NormLossWeights()
    total, b = norm_loss(I_o, I_t, I_n, suite, w, forced)
    nrm = lambda v: np.sqrt((v ** 2).sum(-1))
    cos = (I_t[:, :2] * I_n[:, :2]).sum(-1) / (nrm(I_t[:, :2]) * nrm(I_n[:, :2]))
    expect = {
        "adv": -hand_disc(np.concatenate([I_t, I_n], -1), suite.discriminator).mean(),
        "rec": (nrm(I_n - I_t) * forced).mean(),
        "perc": nrm(2 * I_t - 2 * I_n).mean(),
        "id": (1 - cos).mean(),
        "lm": nrm(I_t[:, [0, 1, 5]] - I_n[:, [0, 1, 5]]).mean(),
        "exp": nrm(I_o[:, 2:5] - I_n[:, 2:5]).mean(),
        "eye": np.abs(I_o[:, 2] - I_n[:, 2]).mean(),
    }
    lam = {"adv": 1, "rec": 10, "perc": 5, "id": 10, "lm": 5000, "exp": 5000, "eye": 10}
    for term in LOSS_TERMS:
        assert abs(b.raw[term] - expect[term]) < 1e-12, term
    hand_total = sum(lam[t] * expect[t] for t in LOSS_TERMS)
    assert abs(total.item() - hand_total) < 1e-10 * max(1.0, abs(hand_total))
    assert abs(sum(b.weighted.values()) - b.total) < 1e-10


def test_weights_match_published_values():
    w = NormLossWeights()
    assert (w.rec, w.perc, w.id, w.lm, w.exp, w.eye) == (10, 5, 10, 5000, 5000, 10)
    with pytest.raises(ValueError):
        NormLossWeights(rec=-1)


def test_zero_norm_identity_embedding_errors():
    suite = hand_suite()
    I = np.array([0.0, 0, 1, 1, 1, 1])
    with pytest.raises(NumericDomainError):
        norm_loss(I, I, I, suite, NormLossWeights())


def test_discriminator_loss_examples():
    class Const:
        def __init__(self, real, fake):
            self.real, self.fake = real, fake

        def __call__(self, pair):
            v = self.real if pair.data[0, 0] > 0 else self.fake
            return dc.Value(np.full(pair.shape[0], v))

    real = np.ones((3, 4))
    fake = -np.ones((3, 4))
    assert discriminator_loss(real, fake, Const(1.0, -1.0)).item() == 0.0
    assert discriminator_loss(real, fake, Const(0.0, 0.0)).item() == 2.0
    assert generator_adversarial_loss(np.zeros(3)).item() == 0.0


def test_normalize_shapes_and_errors():
    model = NormalizerModel(NormalizerConfig(), np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=64)
    out = normalize(x, x, model)
    assert out.shape == (64,) and np.all(np.isfinite(out.data))
    assert normalize(np.ones((5, 64)), np.ones((5, 64)), model).shape == (5, 64)
    with pytest.raises(DimensionError):
        normalize(np.ones(63), np.ones(63), model)


def test_encoder_is_shared():
    model = NormalizerModel(NormalizerConfig(), np.random.default_rng(5))
    names = [n for n, _ in model.named_parameters()]
    assert sum(n.startswith("encoder.") for n in names) == 4


def test_gradient_through_normalize():
    for seed in (0, 1):
        builder, params = normalizer_case(dc.make_rng(seed, "test-norm"))
        assert check_gradients(builder, params, max_entries=6).passed
        builder, params = discriminator_case(dc.make_rng(seed, "test-disc"))
        assert check_gradients(builder, params).passed


def small_setup(seed=0):
    fc = FactorConfig()
    pool = generate_pool(fc, TaskSpec("fer"), 20, 400, dc.make_rng(seed, "pool"))
    model = NormalizerModel(NormalizerConfig(), dc.make_rng(seed, "model"))
    suite = EmbedderSuite.build(fc, dc.make_rng(seed, "suite"))
    return fc, pool, model, suite


def test_zero_learning_rate_keeps_parameters_bit_exact():
    _, pool, model, suite = small_setup()
    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    cfg = NormalizerTrainConfig(steps=1, optimizer=OptimizerConfig(lr=0.0, beta1=0.0, beta2=0.99))
    train_normalizer(pool, model, suite, NormLossWeights(), cfg, dc.make_rng(0, "t"))
    after = {k: v.tobytes() for k, v in model.state_dict().items()}
    assert before == after


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        _, pool, model, suite = small_setup()
        _, curves = train_normalizer(pool, model, suite, NormLossWeights(),
                                     NormalizerTrainConfig(steps=5), dc.make_rng(1, "t"))
        runs.append(curves.rows)
    assert runs[0] == runs[1]


def test_non_finite_loss_names_the_term():
    _, pool, model, suite = small_setup()
    model.decoder.fc2.bias.data[0] = np.inf
    with pytest.raises(NonFiniteLossError) as err:
        with np.errstate(invalid="ignore"):
            train_normalizer(pool, model, suite, NormLossWeights(), NormalizerTrainConfig(steps=1),
                             dc.make_rng(0, "t"))
    assert err.value.term in LOSS_TERMS


@pytest.mark.slow
def test_default_run_shrinks_expression_and_identity_losses():
    """2000 default steps: final L_exp and L_id under 20% of their step-0 values."""
    fc = FactorConfig()
    pool = generate_pool(fc, TaskSpec("fer"), 200, 5000, dc.make_rng(0, "pool"))
    model = NormalizerModel(NormalizerConfig(), dc.make_rng(0, "normalizer-init"))
    suite = EmbedderSuite.build(fc, dc.make_rng(0, "embedders"))
    _, curves = train_normalizer(pool, model, suite, NormLossWeights(), NormalizerTrainConfig(),
                                 dc.make_rng(0, "normalizer-train"))
    for term in ("exp", "id"):
        s = curves.series(term)
        # per-batch values are noisy; compare the first and last 50-step windows
        assert s[-50:].mean() < 0.2 * s[:50].mean(), (term, s[:50].mean(), s[-50:].mean())
