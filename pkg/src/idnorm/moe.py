"""Sparse mixture-of-experts block with a noisy top-k router.

Routing: ``logits = x W_g + eps * softplus(x W_noise)`` with ``eps ~ N(0, 1)``
per expert while noise is enabled; ``probs = softmax(logits)``; the gates keep
the k largest probabilities as they are and zero the rest. Selection is a hard
mask, so gradients reach ``W_g``/``W_noise`` only through the kept softmax
values. Ties resolve to the lowest expert index.

Only experts selected by at least one row are evaluated, and each expert only
sees the rows that selected it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, DegenerateInputError, EmptyInputError
from .nn import MLP, Module


@dataclass(frozen=True)
class MoEConfig:
    m: int = 4
    k: int = 2
    expert_hidden: int = 64
    noise_enabled: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError(f"need at least one expert, got m={self.m}")
        if not 1 <= self.k <= self.m:
            raise ConfigurationError(f"top-k needs 1 <= k <= m, got k={self.k}, m={self.m}")


class RouterParams(Module):
    def __init__(self, dim, m, rng, scale=0.1):
        self.w_g = dc.parameter(rng.normal(0.0, scale / np.sqrt(dim), (dim, m)))
        self.w_noise = dc.parameter(rng.normal(0.0, scale / np.sqrt(dim), (dim, m)))


@dataclass
class GateDecision:
    """Routing outcome for a batch of rows.

    probs: Value [B, m], full softmax distribution.
    selected: int array [B, k], chosen experts in descending probability.
    gates: Value [B, m], probs masked to the selected experts.
    """

    probs: dc.Value
    selected: np.ndarray
    gates: dc.Value

    def __len__(self):
        return self.probs.shape[0]

    @property
    def m(self):
        return self.probs.shape[1]

    @property
    def mask(self):
        mask = np.zeros(self.probs.shape)
        np.put_along_axis(mask, self.selected, 1.0, axis=1)
        return mask


def top_k_indices(probs, k):
    """Indices of the k largest entries per row, lowest index first among ties."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def route(x, params: RouterParams, config: MoEConfig, rng=None, noise=None):
    """Noisy top-k gating for ``x`` of shape [d] or [B, d]."""
    if config.k > config.m:
        raise ConfigurationError(f"k={config.k} exceeds m={config.m}")
    x = dc.as_value(x)
    if x.ndim == 1:
        x = dc.reshape(x, (1, x.shape[0]))
    logits = dc.matmul(x, params.w_g)
    use_noise = config.noise_enabled if noise is None else noise
    if use_noise:
        if rng is None:
            raise ConfigurationError("noisy routing needs an rng")
        eps = rng.standard_normal(logits.shape)
        logits = logits + dc.softplus(dc.matmul(x, params.w_noise)) * eps
    probs = dc.softmax(logits, axis=-1)
    selected = top_k_indices(probs.data, config.k)
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    return GateDecision(probs=probs, selected=selected, gates=probs * mask)


class MoEBlock(Module):
    def __init__(self, dim, config: MoEConfig, rng):
        self.config = config
        self.router = RouterParams(dim, config.m, rng)
        self.experts = [MLP(dim, config.expert_hidden, dim, rng) for _ in range(config.m)]

    def __call__(self, x, rng=None, training=False):
        noise = self.config.noise_enabled and training
        return moe_forward(x, self.experts, self.router, self.config, rng, noise=noise)


def moe_forward(x, experts, router, config: MoEConfig, rng=None, noise=None, decision=None):
    """Return ``(y, decision)`` with ``y = sum_e gate_e * expert_e(x)`` over selected experts.

    A precomputed ``decision`` may be injected to bypass the router.
    """
    x = dc.as_value(x)
    single = x.ndim == 1
    if single:
        x = dc.reshape(x, (1, x.shape[0]))
    if decision is None:
        decision = route(x, router, config, rng, noise=noise)
    mask = decision.mask
    n = x.shape[0]
    y = None
    for e, expert in enumerate(experts):
        rows = np.flatnonzero(mask[:, e])
        if rows.size == 0:
            continue
        out = expert(dc.gather_rows(x, rows))
        gate = dc.gather_rows(decision.gates[:, e:e + 1], rows)
        contrib = dc.scatter_rows(out * gate, rows, n)
        y = contrib if y is None else y + contrib
    if single:
        y = dc.reshape(y, (y.shape[1],))
    return y, decision


def stack_decisions(decisions):
    if isinstance(decisions, GateDecision):
        return decisions
    decisions = list(decisions)
    if not decisions:
        raise EmptyInputError("no gate decisions")
    if len(decisions) == 1:
        return decisions[0]
    return GateDecision(
        probs=dc.concat([d.probs for d in decisions], axis=0),
        selected=np.concatenate([d.selected for d in decisions], axis=0),
        gates=dc.concat([d.gates for d in decisions], axis=0),
    )


def cv_squared(values):
    """Squared coefficient of variation with the population (divide-by-n) variance."""
    values = dc.as_value(values)
    mu = dc.mean(values)
    if mu.item() == 0.0:
        raise DegenerateInputError("coefficient of variation of an all-zero vector")
    var = dc.mean(dc.square(values - mu))
    return var / dc.square(mu)


def importance_loss(decisions):
    """CV^2 of per-expert gate mass summed over the batch."""
    d = stack_decisions(decisions)
    if len(d) == 0:
        raise EmptyInputError("importance loss of an empty batch")
    return cv_squared(dc.sum(d.gates, axis=0))


def global_local_losses(decisions):
    """``(-H(mean_i p_i), mean_i H(p_i))`` over the full routing distributions."""
    d = stack_decisions(decisions)
    if len(d) == 0:
        raise EmptyInputError("entropy losses of an empty batch")
    marginal = dc.mean(d.probs, axis=0)
    return -dc.entropy(marginal), dc.mean(dc.entropy(d.probs, axis=-1))


# ------------------------------------------------------------------ telemetry

def selection_frequency(decisions, labels, n_labels=None):
    """Per-label expert selection frequency.

    ``labels`` is either a class index vector or a binary [B, n_labels] matrix.
    Row j is the fraction of samples carrying label j that routed to each expert.
    """
    d = stack_decisions(decisions)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        n_labels = n_labels or int(labels.max()) + 1
        onehot = np.zeros((labels.size, n_labels))
        onehot[np.arange(labels.size), labels.astype(int)] = 1.0
        labels = onehot
    counts = labels.T @ d.mask
    totals = labels.sum(axis=0)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, counts / np.maximum(totals, 1), 0.0)


def write_selection_csv(path, matrix, label_names=None, header=None):
    matrix = np.asarray(matrix)
    label_names = label_names or [f"label_{j}" for j in range(matrix.shape[0])]
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        w = csv.writer(fh)
        w.writerow(["label"] + [f"expert_{e}" for e in range(matrix.shape[1])])
        for name, row in zip(label_names, matrix):
            w.writerow([name] + [repr(float(v)) for v in row])
