"""The full gradient-verification suite: every primitive and composite block.

Each case builds a scalar loss from freshly drawn parameters for a given seed.
Primitive losses contract the output with a fixed random weight tensor so
that invariances (softmax rows summing to 1, for instance) cannot hide a wrong
gradient behind a zero.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .attention import AttentionConfig, EmmParams, emm_forward
from .classifier import ClaLossWeights, ClassifierConfig, ClassifierModel, classify, cla_loss
from .gradcheck import check_gradients
from .moe import MoEBlock, MoEConfig, global_local_losses, importance_loss
from .normalizer import (EmbedderSuite, NormalizerConfig, NormalizerModel, NormLossWeights,
                         discriminator_loss, norm_loss, normalize)
from .synthdata import FactorConfig
from .tasks import AU_DETECT, AU_INTENSITY, FER, TaskSpec

SHAPES = [(3, 4), (2, 5), (5, 3), (4, 4), (1, 6), (6, 2)]


def _weighted(out, rng):
    w = rng.normal(size=out.shape)
    return dc.sum(out * w)


def _unary(fn, positive=False, min_dim=1):
    def case(rng, shape):
        if shape[-1] < min_dim:
            shape = shape[:-1] + (min_dim,)
        data = rng.normal(size=shape)
        if positive:
            data = np.abs(data) + 0.5
        x = dc.parameter(data)
        return (lambda: _weighted(fn(x), np.random.default_rng(7))), {"x": x}
    return case


def _binary(fn, same_shape=True):
    def case(rng, shape):
        a = dc.parameter(rng.normal(size=shape))
        b_shape = shape if same_shape else shape[-1:]
        b = dc.parameter(rng.normal(size=b_shape))
        return (lambda: _weighted(fn(a, b), np.random.default_rng(7))), {"a": a, "b": b}
    return case


def _matmul_case(rng, shape):
    a = dc.parameter(rng.normal(size=shape))
    b = dc.parameter(rng.normal(size=(shape[-1], 3)))
    return (lambda: _weighted(dc.matmul(a, b), np.random.default_rng(7))), {"a": a, "b": b}


def _concat_case(rng, shape):
    a = dc.parameter(rng.normal(size=shape))
    b = dc.parameter(rng.normal(size=shape[:-1] + (2,)))
    return (lambda: _weighted(dc.concat([a, b], axis=-1), np.random.default_rng(7))), \
        {"a": a, "b": b}


def _layer_norm_case(rng, shape):
    # with d = 2 every normalized row is (-1, 1) and the gradient is pure roundoff
    shape = shape[:-1] + (max(shape[-1], 3),)
    x = dc.parameter(rng.normal(size=shape))
    g = dc.parameter(rng.normal(size=shape[-1:]))
    b = dc.parameter(rng.normal(size=shape[-1:]))
    return (lambda: _weighted(dc.layer_norm(x, g, b), np.random.default_rng(7))), \
        {"x": x, "gain": g, "bias": b}


def _cosine_case(rng, shape):
    a = dc.parameter(rng.normal(size=shape))
    b = dc.parameter(rng.normal(size=shape))
    return (lambda: _weighted(dc.cosine_similarity(a, b), np.random.default_rng(7))), \
        {"a": a, "b": b}


def _entropy_case(rng, shape):
    x = dc.parameter(rng.normal(size=shape))
    return (lambda: _weighted(dc.entropy(dc.softmax(x, axis=-1)), np.random.default_rng(7))), \
        {"x": x}


PRIMITIVES = {
    "matmul": _matmul_case,
    "add": _binary(dc.add, same_shape=False),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul),
    "div": lambda rng, shape: _binary(lambda a, b: a / (dc.square(b) + 0.5))(rng, shape),
    "concat": _concat_case,
    "mean": _unary(lambda x: dc.mean(x, axis=-1)),
    "sum": _unary(lambda x: dc.sum(x, axis=0)),
    "std": _unary(lambda x: dc.std(x, axis=-1), min_dim=2),
    "square": _unary(dc.square),
    "exp": _unary(dc.exp),
    "log": _unary(dc.log, positive=True),
    "sqrt": _unary(dc.sqrt, positive=True),
    "relu": _unary(dc.relu),
    "gelu": _unary(dc.gelu),
    "softplus": _unary(dc.softplus),
    "sigmoid": _unary(dc.sigmoid),
    "tanh": _unary(dc.tanh),
    "softmax": _unary(lambda x: dc.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: dc.log_softmax(x, axis=-1)),
    "layer_norm": _layer_norm_case,
    "l2_norm": _unary(lambda x: dc.l2_norm(x, axis=-1)),
    "cosine_similarity": _cosine_case,
    "entropy": _entropy_case,
    "transpose": _unary(dc.transpose),
}


# ----------------------------------------------------------------- composites

def emm_case(rng):
    config = AttentionConfig(model_dim=8, num_heads=2)
    params = EmmParams(config, rng)
    e_t = dc.parameter(rng.normal(size=(4, 8)))
    e_o = dc.parameter(rng.normal(size=(4, 8)))
    w = rng.normal(size=(4, 8))
    named = dict(params.named_parameters())
    named.update({"e_t": e_t, "e_o": e_o})
    return (lambda: dc.sum(emm_forward(e_t, e_o, params, config) * w)), named


def moe_case(rng):
    config = MoEConfig(m=4, k=2, expert_hidden=6, noise_enabled=False)
    block = MoEBlock(5, config, rng)
    # a wider router spreads the logits so finite steps never flip the top-k set
    block.router.w_g.data *= 10.0
    x = dc.parameter(rng.normal(size=(6, 5)))
    w = rng.normal(size=(6, 5))

    def build():
        y, d = block(x, training=False)
        g, l = global_local_losses(d)
        return dc.sum(y * w) + importance_loss(d) + g + l

    named = dict(block.named_parameters())
    named["x"] = x
    return build, named


def classifier_case(rng, kind=FER):
    task = TaskSpec(kind, 3)
    config = ClassifierConfig(sample_dim=6, feature_hidden=8, feature_dim=4, m=4, k=2,
                              expert_hidden=5, noise_enabled=False)
    model = ClassifierModel(config, task, rng)
    for block in model.input_blocks + [model.output_block]:
        block.router.w_g.data *= 10.0
    I_n = rng.normal(size=(5, 6))
    I_o = rng.normal(size=(5, 6))
    if kind == FER:
        targets = rng.integers(0, 3, 5)
    elif kind == AU_DETECT:
        targets = rng.integers(0, 2, (5, 3))
    else:
        targets = rng.uniform(0, 5, (5, 3))
    weights = ClaLossWeights(imp=0.1, gl=0.1)

    def build():
        out, decisions = classify(I_n, I_o, model, task, training=False)
        return cla_loss(out, targets, decisions, task, weights)[0]

    return build, dict(model.named_parameters())


def _tiny_normalizer(rng):
    fc = FactorConfig(dim_identity=2, dim_expression=3, dim_pose=1, dim_background=1,
                      sample_dim=8, world_seed=int(rng.integers(1 << 30)))
    config = NormalizerConfig(sample_dim=8, n_patches=2, model_dim=4, num_heads=2,
                              encoder_hidden=6, decoder_hidden=6, disc_hidden=5)
    model = NormalizerModel(config, rng)
    suite = EmbedderSuite.build(fc, rng, eyebrow_channels=2, disc_hidden=5)
    I_o = rng.normal(size=(3, 8))
    I_t = rng.normal(size=(3, 8))
    I_r = rng.normal(size=(3, 8))
    return model, suite, I_o, I_t, I_r


def normalizer_case(rng):
    """Generator objective w.r.t. every normalizer parameter."""
    model, suite, I_o, I_t, _ = _tiny_normalizer(rng)
    forced = np.array([True, False, False])

    def build():
        I_n = normalize(I_o, I_t, model)
        return norm_loss(I_o, I_t, I_n, suite, NormLossWeights(), forced)[0]

    return build, dict(model.named_parameters())


def discriminator_case(rng):
    """Hinge objective w.r.t. the discriminator, with the generated sample in the graph.

    Checked apart from the generator total: the large weights there would bury
    the discriminator's small share of the loss in finite-difference roundoff.
    """
    model, suite, I_o, I_t, I_r = _tiny_normalizer(rng)

    def build():
        I_n = normalize(I_o, I_t, model)
        return discriminator_loss(np.concatenate([I_t, I_r], -1),
                                  dc.concat([dc.as_value(I_t), I_n]), suite.discriminator)

    return build, dict(suite.discriminator.named_parameters())


COMPOSITES = {
    "emm": emm_case,
    "moe": moe_case,
    "classifier[fer]": lambda rng: classifier_case(rng, FER),
    "classifier[au-detect]": lambda rng: classifier_case(rng, AU_DETECT),
    "classifier[au-intensity]": lambda rng: classifier_case(rng, AU_INTENSITY),
    "normalizer_loss": normalizer_case,
    "discriminator_loss": discriminator_case,
}


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: object

    @property
    def passed(self):
        return self.report.passed


def run_suite(seeds=range(5), tolerance=1e-4, max_entries=8, names=None):
    """Check every case on every seed; returns ``(results, seconds)``."""
    start = time.perf_counter()
    results = []
    for seed in seeds:
        for i, (name, case) in enumerate(PRIMITIVES.items()):
            if names and name not in names:
                continue
            rng = dc.make_rng(seed, "grad", name)
            builder, params = case(rng, SHAPES[(seed + i) % len(SHAPES)])
            results.append(SuiteResult(name, seed, check_gradients(builder, params, tolerance)))
        for name, case in COMPOSITES.items():
            if names and name not in names:
                continue
            rng = dc.make_rng(seed, "grad", name)
            builder, params = case(rng)
            report = check_gradients(builder, params, tolerance, max_entries=max_entries,
                                     rng=dc.make_rng(seed, "grad-probe", name))
            results.append(SuiteResult(name, seed, report))
    return results, time.perf_counter() - start
