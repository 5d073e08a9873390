"""Twin-stream expression classifier with mixture-of-experts refinement.

A shared feature extractor embeds the normalized and the original sample.
Each stream then passes through its own input MoE block, the two results are
concatenated, refined by an output MoE block and mapped to task outputs by a
linear head.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, DimensionError, NonFiniteLossError, TargetRangeError
from .metrics import evaluate_outputs
from .moe import MoEBlock, MoEConfig, global_local_losses, importance_loss
from .nn import MLP, Adam, Linear, Module, OptimizerConfig, mlp_param_count
from .tasks import AU_DETECT, AU_INTENSITY, FER, TaskSpec

log = logging.getLogger(__name__)

# base learning rates reported for fine-tuning pretrained backbones
REFERENCE_LEARNING_RATES = {AU_DETECT: 1e-4, AU_INTENSITY: 1e-3, FER: 2e-5}
# from-scratch desk-scale models need larger steps
DEFAULT_LEARNING_RATES = {AU_DETECT: 2e-3, AU_INTENSITY: 2e-3, FER: 2e-3}

BLOCK_KINDS = ("moe", "mlp", "identity")


@dataclass(frozen=True)
class ClaLossWeights:
    imp: float = 0.001
    gl: float = 0.001

    def __post_init__(self):
        if self.imp < 0 or self.gl < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class ClassifierConfig:
    sample_dim: int = 64
    feature_hidden: int = 64
    feature_dim: int = 32
    m: int = 4
    k: int = 2
    expert_hidden: int = 32
    noise_enabled: bool = True
    input_block: str = "moe"
    output_block: str = "moe"
    freeze_extractor: bool = False

    def __post_init__(self):
        for kind in (self.input_block, self.output_block):
            if kind not in BLOCK_KINDS:
                raise ConfigurationError(f"unknown block kind {kind!r}")

    def moe(self):
        return MoEConfig(m=self.m, k=self.k, expert_hidden=self.expert_hidden,
                         noise_enabled=self.noise_enabled)


VARIANTS = ("full", "no_Mi", "no_Mo", "no_both", "m=0", "m=1", "m=2", "m=4", "m=8")


def variant_config(variant, base: ClassifierConfig | None = None):
    """Classifier config for an ablation variant.

    ``no_*`` variants swap MoE blocks for dense MLPs of matched parameter count;
    ``m=0`` drops the expert layers entirely (identity blocks); ``m=j`` uses j
    experts with top-min(2, j) routing.
    """
    base = base or ClassifierConfig()
    if variant == "full":
        return base
    if variant == "no_Mi":
        return replace(base, input_block="mlp")
    if variant == "no_Mo":
        return replace(base, output_block="mlp")
    if variant in ("no_both", "no_Mi&Mo"):
        return replace(base, input_block="mlp", output_block="mlp")
    match = re.fullmatch(r"m=(\d+)", variant)
    if match:
        m = int(match.group(1))
        if m == 0:
            return replace(base, input_block="identity", output_block="identity")
        return replace(base, m=m, k=min(base.k, m))
    raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# -------------------------------------------------------------------- blocks

class DenseBlock(Module):
    """Plain MLP sized to match a MoE block's parameter count."""

    def __init__(self, dim, hidden, rng):
        self.net = MLP(dim, hidden, dim, rng)

    def __call__(self, x, rng=None, training=False):
        return self.net(x), None


class IdentityBlock(Module):
    def __call__(self, x, rng=None, training=False):
        return x, None


def matched_hidden(dim, moe_config: MoEConfig):
    moe_params = moe_config.m * mlp_param_count(dim, moe_config.expert_hidden, dim) \
        + 2 * dim * moe_config.m
    return max(1, int(round((moe_params - dim) / (2 * dim + 1))))


def make_block(kind, dim, config: ClassifierConfig, rng):
    if kind == "moe":
        return MoEBlock(dim, config.moe(), rng)
    if kind == "mlp":
        return DenseBlock(dim, matched_hidden(dim, config.moe()), rng)
    return IdentityBlock()


class ClassifierModel(Module):
    def __init__(self, config: ClassifierConfig, task: TaskSpec, rng):
        self.config = config
        self.task = task
        d = config.feature_dim
        self.extractor = MLP(config.sample_dim, config.feature_hidden, d, rng)
        # one block per stream, never shared: [normalized, original]
        self.input_blocks = [make_block(config.input_block, d, config, rng),
                             make_block(config.input_block, d, config, rng)]
        self.output_block = make_block(config.output_block, 2 * d, config, rng)
        self.head = Linear(2 * d, task.n_labels, rng)

    def trainable_parameters(self):
        if not self.config.freeze_extractor:
            return self.parameters()
        frozen = {id(p) for p in self.extractor.parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def expert_parameters(self):
        """``{(block_name, expert_index): [Values]}`` for every MoE block."""
        out = {}
        blocks = {"m_i.normalized": self.input_blocks[0], "m_i.original": self.input_blocks[1],
                  "m_o": self.output_block}
        for name, block in blocks.items():
            if isinstance(block, MoEBlock):
                for e, expert in enumerate(block.experts):
                    out[(name, e)] = expert.parameters()
        return out


BLOCK_NAMES = ("m_i.normalized", "m_i.original", "m_o")


def classify(I_n, I_o, model: ClassifierModel, task: TaskSpec | None = None, rng=None,
             training=False):
    """Head outputs and a ``{block_name: GateDecision}`` map for the MoE blocks."""
    task = task or model.task
    I_n, I_o = dc.as_value(I_n), dc.as_value(I_o)
    S = model.config.sample_dim
    if I_n.shape != I_o.shape or I_n.shape[-1] != S:
        raise DimensionError(f"streams must both be [..., {S}], got {I_n.shape} and {I_o.shape}")
    if task.n_labels != model.task.n_labels:
        raise DimensionError(f"model head has {model.task.n_labels} outputs, task needs "
                             f"{task.n_labels}")
    e_n = model.extractor(I_n)
    e_o = model.extractor(I_o)
    h_n, d_n = model.input_blocks[0](e_n, rng, training)
    h_o, d_o = model.input_blocks[1](e_o, rng, training)
    fused, d_c = model.output_block(dc.concat([h_n, h_o], axis=-1), rng, training)
    decisions = {name: d for name, d in zip(BLOCK_NAMES, (d_n, d_o, d_c)) if d is not None}
    return model.head(fused), decisions


# -------------------------------------------------------------------- losses

def _validate_targets(targets, task, n_rows):
    t = np.asarray(targets)
    if task.kind == FER:
        if t.shape != (n_rows,):
            raise TargetRangeError(f"FER targets must be class indices of shape ({n_rows},)")
        if np.any(t < 0) or np.any(t >= task.n_labels) or np.any(t != np.round(t)):
            raise TargetRangeError(f"FER targets must be integers in [0, {task.n_labels})")
        return t.astype(np.intp)
    if t.shape != (n_rows, task.n_labels):
        raise TargetRangeError(f"targets must have shape ({n_rows}, {task.n_labels}), got {t.shape}")
    if task.kind == AU_DETECT and not np.all((t == 0) | (t == 1)):
        raise TargetRangeError("AU detection targets must be 0/1")
    if task.kind == AU_INTENSITY and (np.any(t < 0) or np.any(t > task.intensity_scale_max)):
        raise TargetRangeError(f"intensity targets must lie in [0, {task.intensity_scale_max}]")
    return t.astype(np.float64)


def task_loss(outputs, targets, task: TaskSpec):
    """BCE per AU (detection), squared error (intensity) or softmax cross-entropy (FER)."""
    outputs = dc.as_value(outputs)
    if outputs.ndim == 1:
        outputs = dc.reshape(outputs, (1,) + outputs.shape)
        targets = np.asarray(targets)[None]
    t = _validate_targets(targets, task, outputs.shape[0])
    if task.kind == AU_DETECT:
        return dc.mean(dc.softplus(outputs) - outputs * t)
    if task.kind == AU_INTENSITY:
        return dc.mean(dc.square(outputs - t))
    logp = dc.log_softmax(outputs, axis=-1)
    onehot = np.zeros(outputs.shape)
    onehot[np.arange(len(t)), t] = 1.0
    return -dc.mean(dc.sum(logp * onehot, axis=-1))


@dataclass
class ClaBreakdown:
    raw: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    total: float = 0.0


def cla_loss(outputs, targets, decisions, task: TaskSpec, weights: ClaLossWeights):
    """Task loss plus importance and global/local routing terms over every MoE block."""
    if isinstance(decisions, dict):
        decisions = list(decisions.values())
    total = task_loss(outputs, targets, task)
    out = ClaBreakdown()
    out.raw["cla"] = out.weighted["cla"] = total.item()
    imp_sum = glob_sum = local_sum = None
    for d in decisions:
        imp = importance_loss(d)
        g, l = global_local_losses(d)
        imp_sum = imp if imp_sum is None else imp_sum + imp
        glob_sum = g if glob_sum is None else glob_sum + g
        local_sum = l if local_sum is None else local_sum + l
    if decisions:
        terms = (("imp", imp_sum, weights.imp), ("global", glob_sum, weights.gl),
                 ("local", local_sum, weights.gl))
        for name, raw, lam in terms:
            weighted = raw * lam
            total = total + weighted
            out.raw[name] = raw.item()
            out.weighted[name] = weighted.item()
    else:
        for name in ("imp", "global", "local"):
            out.raw[name] = out.weighted[name] = 0.0
    out.total = total.item()
    return total, out


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 40
    batch_size: int = 128
    optimizer: OptimizerConfig = OptimizerConfig(lr=2e-3)


@dataclass
class StreamData:
    """Aligned arrays of normalized inputs, original inputs and targets."""

    I_n: np.ndarray
    I_o: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if not (len(self.I_n) == len(self.I_o) == len(self.targets)):
            raise DimensionError("stream arrays must have equal length")

    def __len__(self):
        return len(self.I_o)


def predict(model: ClassifierModel, I_n, I_o, batch_size=1024, return_decisions=False):
    """Noise-free head outputs as a numpy array."""
    I_n = np.asarray(I_n, dtype=np.float64)
    I_o = np.asarray(I_o, dtype=np.float64)
    outs, decs = [], []
    for start in range(0, len(I_o), batch_size):
        sl = slice(start, start + batch_size)
        y, d = classify(I_n[sl], I_o[sl], model, training=False)
        outs.append(y.data)
        decs.append(d)
    out = np.concatenate(outs, axis=0) if outs else np.zeros((0, model.task.n_labels))
    return (out, decs) if return_decisions else out


def train_classifier(data: StreamData, model: ClassifierModel, task: TaskSpec,
                     weights: ClaLossWeights, train_config: ClassifierTrainConfig, rng,
                     eval_data: StreamData | None = None, on_step=None):
    """Minibatch Adam training with routing noise on.

    ``on_step(step, model, decisions)`` is called after every backward pass and
    before the parameter update. Returns a list of per-epoch rows.
    """
    cfg = train_config
    opt = Adam(model.trainable_parameters(), cfg.optimizer)
    model.zero_grad()
    history = []
    n = len(data)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums, batches = {}, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            outputs, decisions = classify(data.I_n[idx], data.I_o[idx], model, task, rng,
                                          training=True)
            total, breakdown = cla_loss(outputs, data.targets[idx], decisions, task, weights)
            if not np.isfinite(breakdown.total):
                bad = next((k for k, v in breakdown.raw.items() if not np.isfinite(v)), "total")
                raise NonFiniteLossError(bad, step, breakdown.raw.get(bad, breakdown.total))
            total.backward()
            if on_step is not None:
                on_step(step, model, decisions)
            opt.step()
            for key, value in breakdown.weighted.items():
                sums[key] = sums.get(key, 0.0) + value
            sums["total"] = sums.get("total", 0.0) + breakdown.total
            batches += 1
            step += 1
        row = {"epoch": epoch, **{k: v / max(batches, 1) for k, v in sums.items()}}
        if eval_data is not None:
            _, agg, headline = evaluate_outputs(predict(model, eval_data.I_n, eval_data.I_o),
                                                eval_data.targets, task)
            row["eval_" + headline] = agg[headline]
        history.append(row)
        log.debug("epoch %d %s", epoch, row)
    return model, history
