"""Synthetic identity-entangled observations with known generating factors.

Each observation is a fixed full-rank linear mix of four factor blocks:
identity (one vector per identity), expression (label-conditioned prototype plus
Gaussian jitter), pose (per sample) and background (per identity, as if every
subject were recorded in one setting). The mixing is known, so any observation
can be read back into its factors by least squares.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from functools import cached_property

import numpy as np

from .diffcore import make_rng
from .errors import ConfigurationError, DimensionError
from .tasks import AU_DETECT, AU_INTENSITY, FER, TaskSpec

DATASET_FORMAT_VERSION = 1
FACTOR_NAMES = ("identity", "expression", "pose", "background")


@dataclass(frozen=True)
class FactorConfig:
    n_identities: int = 25
    dim_identity: int = 16
    dim_expression: int = 24
    dim_pose: int = 4
    dim_background: int = 8
    sample_dim: int = 64
    observation_noise_std: float = 0.0
    identity_scale: float = 2.5
    background_scale: float = 2.5
    pose_scale: float = 1.0
    expression_scale: float = 1.0
    expression_jitter: float = 1.5
    au_pair_cooccurrence: float = 0.7
    nonlinear: bool = False
    world_seed: int = 0

    def __post_init__(self):
        if self.sample_dim < self.factor_dim:
            raise ConfigurationError(
                f"sample_dim={self.sample_dim} is smaller than the {self.factor_dim} factor dims")
        if np.linalg.matrix_rank(self.mixing) < self.factor_dim:
            raise ConfigurationError("mixing map is rank deficient")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def dims(self):
        return (self.dim_identity, self.dim_expression, self.dim_pose, self.dim_background)

    @property
    def factor_dim(self):
        return sum(self.dims)

    @property
    def slices(self):
        out, start = {}, 0
        for name, d in zip(FACTOR_NAMES, self.dims):
            out[name] = slice(start, start + d)
            start += d
        return out

    @cached_property
    def mixing(self):
        rng = make_rng(self.world_seed, "mixing")
        return rng.normal(size=(self.sample_dim, self.factor_dim)) / np.sqrt(self.factor_dim)

    @cached_property
    def readout_matrix(self):
        return np.linalg.pinv(self.mixing)

    @cached_property
    def _warp(self):
        rng = make_rng(self.world_seed, "warp")
        return rng.uniform(0.5, 2.0, self.sample_dim)

    def expression_basis(self, task: TaskSpec):
        """Prototypes (FER) or per-AU directions, ``[n_labels, dim_expression]``."""
        rng = make_rng(self.world_seed, "expression", task.kind, task.n_labels)
        return rng.normal(size=(task.n_labels, self.dim_expression)) * self.expression_scale


@dataclass
class FactorSample:
    identity_id: int
    identity: np.ndarray
    expression: np.ndarray
    pose: np.ndarray
    background: np.ndarray
    observed: np.ndarray
    label: np.ndarray

    @property
    def factors(self):
        return np.concatenate([self.identity, self.expression, self.pose, self.background])


class FactorDataset:
    """Column-oriented set of samples; indexing yields :class:`FactorSample`."""

    def __init__(self, config, task, identity_id, identity, expression, pose, background,
                 observed, labels):
        self.config = config
        self.task = task
        self.identity_id = np.asarray(identity_id, dtype=np.int64)
        self.identity = np.asarray(identity, dtype=np.float64)
        self.expression = np.asarray(expression, dtype=np.float64)
        self.pose = np.asarray(pose, dtype=np.float64)
        self.background = np.asarray(background, dtype=np.float64)
        self.observed = np.asarray(observed, dtype=np.float64)
        self.labels = np.asarray(labels)

    def __len__(self):
        return len(self.identity_id)

    def __getitem__(self, i):
        return FactorSample(int(self.identity_id[i]), self.identity[i], self.expression[i],
                            self.pose[i], self.background[i], self.observed[i], self.labels[i])

    @property
    def factors(self):
        return np.concatenate([self.identity, self.expression, self.pose, self.background], axis=1)

    @property
    def identities(self):
        return np.unique(self.identity_id)

    def subset(self, idx):
        idx = np.asarray(idx)
        return FactorDataset(self.config, self.task, self.identity_id[idx], self.identity[idx],
                             self.expression[idx], self.pose[idx], self.background[idx],
                             self.observed[idx], self.labels[idx])


def render(factors, config: FactorConfig, rng=None):
    """Map factor rows to observations.

    The row-wise reduction keeps every row bit-identical regardless of how many
    rows are rendered together.
    """
    factors = np.atleast_2d(np.asarray(factors, dtype=np.float64))
    z = (factors[:, None, :] * config.mixing[None, :, :]).sum(axis=-1)
    if config.nonlinear:
        z = z + 0.3 * np.tanh(config._warp * z)
    if config.observation_noise_std > 0 and rng is not None:
        z = z + rng.normal(0.0, config.observation_noise_std, z.shape)
    return z


def factor_readout(observed, config: FactorConfig):
    """Least-squares factor estimates, as a dict of ``[n, dim]`` arrays (or 1-d for one row)."""
    observed = np.asarray(observed, dtype=np.float64)
    single = observed.ndim == 1
    if observed.shape[-1] != config.sample_dim:
        raise DimensionError(f"observation width {observed.shape[-1]} != {config.sample_dim}")
    est = np.atleast_2d(observed) @ config.readout_matrix.T
    out = {name: est[:, s] for name, s in config.slices.items()}
    return {k: v[0] for k, v in out.items()} if single else out


def _labels_and_expression(config, task, n, rng):
    basis = config.expression_basis(task)
    jitter = rng.normal(size=(n, config.dim_expression)) * config.expression_jitter
    if task.kind == FER:
        labels = rng.permutation(np.arange(n) % task.n_labels)
        return labels, basis[labels] + jitter
    if task.kind == AU_DETECT:
        bits = (rng.random((n, task.n_labels)) < 0.5).astype(np.int64)
        if task.n_labels >= 2:
            # second AU follows the first with the configured co-occurrence rate
            follow = rng.random(n) < config.au_pair_cooccurrence
            bits[:, 1] = np.where(follow, bits[:, 0], 1 - bits[:, 0])
        return bits, (2.0 * bits - 1.0) @ basis + jitter
    levels = np.stack([rng.permutation(np.arange(n) % (task.intensity_scale_max + 1))
                       for _ in range(task.n_labels)], axis=1).astype(np.float64)
    centred = 2.0 * levels / task.intensity_scale_max - 1.0
    return levels, centred @ basis + jitter


def _draw_identities(config, n, rng):
    identity = rng.normal(size=(n, config.dim_identity)) * config.identity_scale
    background = rng.normal(size=(n, config.dim_background)) * config.background_scale
    return identity, background


def _sample_set(config, task, ids, identity, background, n, rng):
    who = rng.permutation(np.arange(n) % len(ids)) if n else np.zeros(0, dtype=np.int64)
    labels, expression = _labels_and_expression(config, task, n, rng)
    pose = rng.normal(size=(n, config.dim_pose)) * config.pose_scale
    factors = np.concatenate([identity[who], expression, pose, background[who]], axis=1)
    observed = render(factors, config, rng) if n else np.zeros((0, config.sample_dim))
    return FactorDataset(config, task, np.asarray(ids)[who], identity[who], expression, pose,
                         background[who], observed, labels)


def generate(config: FactorConfig, task: TaskSpec, n_samples, identity_split=(20, 5), rng=None):
    """Train/test sets over disjoint identities.

    Samples are divided between the splits in proportion to their identity counts.
    """
    n_train_ids, n_test_ids = identity_split
    if config.n_identities < n_train_ids + n_test_ids:
        raise ConfigurationError(
            f"{config.n_identities} identities cannot cover a {n_train_ids}/{n_test_ids} split")
    rng = rng if rng is not None else make_rng(0, "generate")
    identity, background = _draw_identities(config, config.n_identities, rng)
    order = rng.permutation(config.n_identities)
    train_ids, test_ids = order[:n_train_ids], order[n_train_ids:n_train_ids + n_test_ids]
    n_train = int(round(n_samples * n_train_ids / (n_train_ids + n_test_ids)))
    train = _sample_set(config, task, train_ids, identity[train_ids], background[train_ids],
                        n_train, rng)
    test = _sample_set(config, task, test_ids, identity[test_ids], background[test_ids],
                       n_samples - n_train, rng)
    return train, test


def generate_pool(config: FactorConfig, task: TaskSpec, n_identities, n_samples, rng,
                  id_offset=100_000):
    """A separate population of fresh identities (used to pre-train the normalizer)."""
    identity, background = _draw_identities(config, n_identities, rng)
    ids = np.arange(n_identities) + id_offset
    return _sample_set(config, task, ids, identity, background, n_samples, rng)


def oracle_normalize(sample, target, config: FactorConfig, rng=None):
    """Swap identity, pose and background for the target's, keeping expression.

    ``sample`` is a FactorSample or FactorDataset; ``target`` a FactorSample.
    """
    if isinstance(sample, FactorDataset):
        n = len(sample)
        expression = sample.expression.copy()
        identity = np.tile(target.identity, (n, 1))
        pose = np.tile(target.pose, (n, 1))
        background = np.tile(target.background, (n, 1))
        factors = np.concatenate([identity, expression, pose, background], axis=1)
        observed = render(factors, config, rng)
        return FactorDataset(config, sample.task, np.full(n, target.identity_id), identity,
                             expression, pose, background, observed, sample.labels.copy())
    factors = np.concatenate([target.identity, sample.expression, target.pose, target.background])
    observed = render(factors, config, rng)[0]
    return FactorSample(target.identity_id, target.identity.copy(), sample.expression.copy(),
                        target.pose.copy(), target.background.copy(), observed,
                        np.copy(sample.label))


# ------------------------------------------------------------- serialization

def save_jsonl(path, dataset: FactorDataset, header=None):
    """One JSON record per line, preceded by a versioned header line."""
    head = {"format_version": DATASET_FORMAT_VERSION, "kind": "factor-dataset",
            "task": dataset.task.kind, "n_labels": dataset.task.n_labels,
            "factor_config": dataset.config.to_dict(), "n_records": len(dataset)}
    head.update(header or {})
    with open(path, "w") as fh:
        fh.write(json.dumps(head) + "\n")
        for i in range(len(dataset)):
            s = dataset[i]
            fh.write(json.dumps({
                "identity_id": s.identity_id,
                "identity": s.identity.tolist(),
                "expression": s.expression.tolist(),
                "pose": s.pose.tolist(),
                "background": s.background.tolist(),
                "observed": s.observed.tolist(),
                "label": np.asarray(s.label).tolist(),
            }) + "\n")


def load_jsonl(path):
    with open(path) as fh:
        head = json.loads(fh.readline())
        if head.get("format_version") != DATASET_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported dataset format {head.get('format_version')!r}")
        records = [json.loads(line) for line in fh if line.strip()]
    config = FactorConfig.from_dict(head["factor_config"])
    task = TaskSpec(head["task"], head["n_labels"])

    def col(key, width):
        if not records:
            return np.zeros((0, width))
        return np.array([r[key] for r in records], dtype=np.float64)

    labels = np.array([r["label"] for r in records])
    return FactorDataset(config, task, [r["identity_id"] for r in records],
                         col("identity", config.dim_identity),
                         col("expression", config.dim_expression),
                         col("pose", config.dim_pose),
                         col("background", config.dim_background),
                         col("observed", config.sample_dim), labels), head
