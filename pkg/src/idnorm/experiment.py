"""Seeded experiment orchestration and comparison reports.

One experiment trains and evaluates a classifier on an unseen-identity split for
every seed in its list, under one pipeline variant:

* ``idn-trained``: the normalized stream comes from a normalizer pre-trained on a
  separate pool of identities,
* ``idn-oracle``: the normalized stream is the exact factor substitution,
* ``no-idn``: the original stream feeds both input blocks.

Each seed writes into its own directory. ``report`` reduces finished runs into
median/min/max tables.
"""
from __future__ import annotations

import json
import logging
import time
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .classifier import (BLOCK_NAMES, ClaLossWeights, ClassifierConfig, ClassifierModel,
                         ClassifierTrainConfig, StreamData, predict, train_classifier,
                         variant_config)
from .diffcore import make_rng
from .errors import ConfigurationError, IncompatibleRunsError, StageError
from .io import config_hash, load_checkpoint, save_checkpoint, write_config, write_csv, \
    write_curves
from .metrics import evaluate_outputs
from .moe import selection_frequency, write_selection_csv
from .normalizer import (EmbedderSuite, NormalizerConfig, NormalizerModel,
                         NormalizerTrainConfig, NormLossWeights, normalize_array,
                         train_normalizer)
from .nn import OptimizerConfig
from .synthdata import FactorConfig, generate, generate_pool, oracle_normalize
from .tasks import TaskSpec

log = logging.getLogger(__name__)

PIPELINES = ("idn-trained", "idn-oracle", "no-idn")
# longer, decaying schedule for the normalizer used inside experiments
PRETRAIN_SCHEDULE = NormalizerTrainConfig(
    steps=6000, lr_schedule="linear", optimizer=OptimizerConfig(lr=1.5e-3, beta1=0.0, beta2=0.99))
REPORT_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "fer"
    n_labels: int = 0
    pipeline: str = "idn-oracle"
    model_variant: str = "full"
    seeds: tuple = (0, 1, 2, 3, 4)
    n_samples: int = 10_000
    identity_split: tuple = (20, 5)
    pool_identities: int = 200
    pool_samples: int = 5000
    data: FactorConfig = FactorConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    cla_train: ClassifierTrainConfig = ClassifierTrainConfig()
    cla_weights: ClaLossWeights = ClaLossWeights()
    normalizer: NormalizerConfig = NormalizerConfig()
    norm_train: NormalizerTrainConfig = PRETRAIN_SCHEDULE
    norm_weights: NormLossWeights = NormLossWeights()

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigurationError(f"unknown pipeline {self.pipeline!r}; expected {PIPELINES}")
        if not self.seeds:
            raise ConfigurationError("seed list is empty")
        variant_config(self.model_variant)  # validates the name
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "identity_split", tuple(self.identity_split))

    @property
    def task_spec(self):
        return TaskSpec(self.task, self.n_labels)

    @property
    def classifier_config(self):
        return variant_config(self.model_variant, self.classifier)

    def to_flat(self):
        return _flatten(self)

    @classmethod
    def from_flat(cls, flat):
        return _build(cls, flat)

    @property
    def hash(self):
        return config_hash(self.to_flat())

    def with_overrides(self, **kw):
        return replace(self, **kw)


def _flatten(obj, prefix=""):
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            out.update(_flatten(value, key + "."))
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def _build(cls, flat, prefix=""):
    hints = typing.get_type_hints(cls)
    known = {prefix + f.name for f in fields(cls)}
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        kind = hints[f.name]
        if is_dataclass(kind):
            sub = {k: v for k, v in flat.items() if k.startswith(key + ".")}
            if sub:
                kwargs[f.name] = _build(kind, sub, key + ".")
        elif key in flat:
            value = flat[key]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    unknown = [k for k in flat if k not in known and not any(
        k.startswith(p + ".") for p in known)]
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return cls(**kwargs)


# --------------------------------------------------------------- the report

@dataclass
class MetricsReport:
    per_label: dict
    aggregate: dict
    headline: str
    seed: int
    config_hash: str
    task: str
    pipeline: str
    model_variant: str
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def score(self):
        return self.aggregate[self.headline]

    def to_json(self):
        """Deterministic rendering; wall-clock is kept out so reruns match byte for byte."""
        doc = {"format_version": REPORT_VERSION, **asdict(self)}
        doc.pop("wall_clock")
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.pop("format_version", None) != REPORT_VERSION:
            raise ConfigurationError("unsupported metrics report version")
        return cls(**doc)


# ------------------------------------------------------------------ stages

def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_stage("data")
def build_data(config: ExperimentConfig, seed):
    """Train/test split, the common normalization target and the normalizer pool."""
    task = config.task_spec
    train, test = generate(config.data, task, config.n_samples, config.identity_split,
                           make_rng(seed, "data"))
    target = generate_pool(config.data, task, 1, 1, make_rng(seed, "target"),
                           id_offset=900_000)[0]
    return train, test, target


@_stage("normalizer")
def pretrain_normalizer(config: ExperimentConfig, seed, out_dir=None):
    """Normalizer trained on a fresh pool of identities disjoint from the split."""
    task = config.task_spec
    pool = generate_pool(config.data, task, config.pool_identities, config.pool_samples,
                         make_rng(seed, "pool"))
    model = NormalizerModel(config.normalizer, make_rng(seed, "normalizer-init"))
    suite = EmbedderSuite.build(config.data, make_rng(seed, "embedders"),
                                disc_hidden=config.normalizer.disc_hidden)
    model, curves = train_normalizer(pool, model, suite, config.norm_weights, config.norm_train,
                                     make_rng(seed, "normalizer-train"))
    if out_dir is not None:
        meta = {"config_hash": config.hash, "seed": seed}
        save_checkpoint(out_dir / "normalizer.json", model, config.to_flat(), "normalizer",
                        {"seed": seed})
        write_curves(out_dir / "normalizer_curves.csv", curves.rows, meta)
    return model


@_stage("streams")
def build_streams(config: ExperimentConfig, train, test, target, normalizer=None):
    if config.pipeline == "no-idn":
        n_tr, n_te = train.observed, test.observed
    elif config.pipeline == "idn-oracle":
        n_tr = oracle_normalize(train, target, config.data).observed
        n_te = oracle_normalize(test, target, config.data).observed
    else:
        n_tr = normalize_array(train.observed, target.observed, normalizer)
        n_te = normalize_array(test.observed, target.observed, normalizer)
    return (StreamData(n_tr, train.observed, train.labels),
            StreamData(n_te, test.observed, test.labels))


@_stage("classifier")
def fit_classifier(config: ExperimentConfig, seed, data: StreamData):
    cla_cfg = config.classifier_config
    # seeded by the block layout, so aliases of one layout ("full", "m=4") train identically
    layout = config_hash(_flatten(cla_cfg))
    model = ClassifierModel(cla_cfg, config.task_spec, make_rng(seed, "classifier", layout))
    model, history = train_classifier(data, model, config.task_spec, config.cla_weights,
                                      config.cla_train, make_rng(seed, "classifier-train"))
    return model, history


@_stage("eval")
def evaluate(config: ExperimentConfig, seed, model, data: StreamData):
    outputs, decisions = predict(model, data.I_n, data.I_o, return_decisions=True)
    per_label, aggregate, headline = evaluate_outputs(outputs, data.targets, config.task_spec)
    report = MetricsReport(per_label, aggregate, headline, seed, config.hash, config.task,
                           config.pipeline, config.model_variant)
    return report, decisions


def run_dir(out_root, config: ExperimentConfig, seed):
    name = f"{config.task}__{config.pipeline}__{config.model_variant.replace('=', '')}"
    return Path(out_root) / name / f"seed_{seed}"


def run_seed(config: ExperimentConfig, seed, out_root=None, normalizer=None):
    """Train and evaluate one seed; persists artefacts when ``out_root`` is given."""
    start = time.perf_counter()
    out_dir = None
    if out_root is not None:
        out_dir = run_dir(out_root, config, seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config(out_dir / "config.txt", config.to_flat())
    train, test, target = build_data(config, seed)
    if config.pipeline == "idn-trained" and normalizer is None:
        normalizer = pretrain_normalizer(config, seed, out_dir)
    train_s, test_s = build_streams(config, train, test, target, normalizer)
    model, history = fit_classifier(config, seed, train_s)
    report, decisions = evaluate(config, seed, model, test_s)
    report.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        _persist(out_dir, config, seed, report, history, model, decisions, test_s)
    log.info("%s %s seed %d: %s=%.4f (%.1fs)", config.pipeline, config.model_variant, seed,
             report.headline, report.score, report.wall_clock)
    return report


@_stage("report")
def _persist(out_dir, config, seed, report, history, model, decisions, test_s):
    meta = {"config_hash": config.hash, "seed": seed}
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")
    rows = []
    for group, scores in report.per_label.items():
        for label, value in scores.items():
            rows.append((group, label, value))
    for key, value in report.aggregate.items():
        rows.append(("aggregate", key, value))
    write_csv(out_dir / "metrics.csv", ["group", "label", "value"], rows, meta)
    if history:
        keys = list(history[0])
        write_csv(out_dir / "epochs.csv", keys, [[r[k] for k in keys] for r in history], meta)
    save_checkpoint(out_dir / "classifier.json", model, config.to_flat(), "classifier",
                    {"seed": seed})
    task = config.task_spec
    for name in BLOCK_NAMES:
        per_batch = [d[name] for d in decisions if name in d]
        if not per_batch:
            continue
        freq = selection_frequency(per_batch, test_s.targets, task.n_labels)
        write_selection_csv(out_dir / f"gates_{name}.csv", freq, task.label_names,
                            {"format_version": 1, **meta, "block": name})
    (out_dir / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock}))


def run_experiment(config: ExperimentConfig, out_root=None):
    """All seeds of one configuration; returns the per-seed reports."""
    return [run_seed(config, seed, out_root) for seed in config.seeds]


def run_comparison(config: ExperimentConfig, pipelines=PIPELINES, out_root=None):
    """Several pipelines over shared seeds; the trained normalizer is built once per seed."""
    reports = {p: [] for p in pipelines}
    for seed in config.seeds:
        normalizer = None
        for p in pipelines:
            cfg = replace(config, pipeline=p)
            if p == "idn-trained" and normalizer is None:
                out_dir = run_dir(out_root, cfg, seed) if out_root is not None else None
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                normalizer = pretrain_normalizer(cfg, seed, out_dir)
            reports[p].append(run_seed(cfg, seed, out_root, normalizer))
    return reports


def ablate(model_variant, config: ExperimentConfig, out_root=None):
    """Train and evaluate one classifier variant under the config's seeds and budget."""
    return run_experiment(replace(config, model_variant=model_variant), out_root)


def load_normalizer(path):
    state, doc = load_checkpoint(path, kind="normalizer")
    config = ExperimentConfig.from_flat(doc["config"])
    model = NormalizerModel(config.normalizer, make_rng(0, "normalizer-init"))
    model.load_state_dict(state)
    return model, config


# ----------------------------------------------------------------- reporting

@dataclass
class ComparisonRow:
    key: str
    task: str
    metric: str
    scores: dict  # seed -> score

    @property
    def values(self):
        return np.array([self.scores[s] for s in sorted(self.scores)])

    @property
    def median(self):
        return float(np.median(self.values))


def collect_reports(run_dirs):
    """Read ``metrics.json`` from run directories (or any parent of them)."""
    reports = []
    for d in run_dirs:
        d = Path(d)
        paths = [d / "metrics.json"] if (d / "metrics.json").exists() else \
            sorted(d.rglob("metrics.json"))
        for p in paths:
            reports.append(MetricsReport.from_json(p.read_text()))
    if not reports:
        raise ConfigurationError("no completed runs found")
    return reports


def comparison_table(reports):
    """Rows keyed by pipeline/variant with per-seed scores; refuses mixed tasks."""
    tasks = sorted({r.task for r in reports})
    if len(tasks) > 1:
        raise IncompatibleRunsError(
            f"runs mix tasks {tasks}; metrics are not comparable across tasks")
    rows = {}
    for r in reports:
        key = f"{r.pipeline}/{r.model_variant}"
        row = rows.setdefault(key, ComparisonRow(key, r.task, r.headline, {}))
        row.scores[r.seed] = r.score
    return list(rows.values())


def render_table(rows):
    seeds = sorted({s for r in rows for s in r.scores})
    header = ["variant", "metric"] + [f"seed_{s}" for s in seeds] + ["median", "min", "max"]
    body = []
    for r in rows:
        cells = [r.key, r.metric]
        cells += [f"{r.scores[s]:.4f}" if s in r.scores else "-" for s in seeds]
        v = r.values
        cells += [f"{np.median(v):.4f}", f"{v.min():.4f}", f"{v.max():.4f}"]
        body.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in [header] + body]
    return "\n".join(lines) + "\n", header, body


def report(run_dirs, out_dir=None):
    """Aligned-text comparison (returned) plus ``report.txt`` / ``report.csv`` if ``out_dir``."""
    rows = comparison_table(collect_reports(run_dirs))
    text, header, body = render_table(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text)
        hashes = sorted({r.config_hash for r in collect_reports(run_dirs)})
        write_csv(out_dir / "report.csv", header, body,
                  {"task": rows[0].task, "config_hashes": ";".join(hashes)})
    return text, rows

