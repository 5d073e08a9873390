import numpy as np
import pytest
from scipy.stats import chi2_contingency

from idnorm.diffcore import make_rng
from idnorm.errors import ConfigurationError
from idnorm.synthdata import (FactorConfig, factor_readout, generate, load_jsonl,
                              oracle_normalize, render, save_jsonl)
from idnorm.tasks import AU_DETECT, AU_INTENSITY, FER, TaskSpec

FC = FactorConfig()


def test_config_checks():
    with pytest.raises(ConfigurationError):
        FactorConfig(sample_dim=40)
    assert np.linalg.matrix_rank(FC.mixing) == FC.factor_dim == 52
    assert FactorConfig.from_dict(FC.to_dict()) == FC


def test_empty_generation():
    train, test = generate(FC, TaskSpec(FER), 0, rng=make_rng(0))
    assert len(train) == len(test) == 0


def test_too_few_identities():
    with pytest.raises(ConfigurationError):
        generate(FactorConfig(n_identities=10), TaskSpec(FER), 100)


@pytest.mark.parametrize("kind", [FER, AU_DETECT, AU_INTENSITY])
def test_split_is_identity_disjoint_and_readout_exact(kind):
    train, test = generate(FC, TaskSpec(kind), 500, rng=make_rng(1, kind))
    assert not set(train.identity_id) & set(test.identity_id)
    assert len(train.identities) == 20 and len(test.identities) == 5
    est = factor_readout(train.observed, FC)
    for name in ("identity", "expression", "pose", "background"):
        assert np.max(np.abs(est[name] - getattr(train, name))) < 1e-9


def test_labels_balanced():
    n = 10_000
    train, _ = generate(FC, TaskSpec(FER), n, rng=make_rng(2))
    counts = np.bincount(train.labels, minlength=7)
    assert np.all(np.abs(counts - counts.mean()) <= 0.1 * counts.mean())
    au, _ = generate(FC, TaskSpec(AU_DETECT), n, rng=make_rng(3))
    rates = au.labels.mean(axis=0)
    assert np.all(np.abs(rates - 0.5) <= 0.05)
    # the first AU pair co-occurs at the configured rate
    agree = np.mean(au.labels[:, 0] == au.labels[:, 1])
    assert abs(agree - FC.au_pair_cooccurrence) < 0.03
    inten, _ = generate(FC, TaskSpec(AU_INTENSITY), n, rng=make_rng(4))
    for j in range(5):
        c = np.bincount(inten.labels[:, j].astype(int), minlength=6)
        assert np.all(np.abs(c - c.mean()) <= 0.1 * c.mean())


def test_labels_independent_of_nuisance_factors():
    train, test = generate(FC, TaskSpec(FER), 10_000, identity_split=(20, 5), rng=make_rng(5))
    table = np.zeros((20, 7))
    ids = {v: i for i, v in enumerate(train.identities)}
    for who, y in zip(train.identity_id, train.labels):
        table[ids[who], y] += 1
    assert chi2_contingency(table).pvalue > 0.01
    quadrant = (train.pose[:, 0] > 0).astype(int) * 2 + (train.pose[:, 1] > 0)
    table = np.zeros((4, 7))
    np.add.at(table, (quadrant, train.labels), 1)
    assert chi2_contingency(table).pvalue > 0.01


def test_generation_is_seed_deterministic():
    a, _ = generate(FC, TaskSpec(AU_DETECT), 300, rng=make_rng(6))
    b, _ = generate(FC, TaskSpec(AU_DETECT), 300, rng=make_rng(6))
    assert a.observed.tobytes() == b.observed.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_render_rows_do_not_depend_on_batch():
    f = np.random.default_rng(7).normal(size=(9, 52))
    assert render(f, FC)[4].tobytes() == render(f[4:5], FC)[0].tobytes()


def test_oracle_normalize_examples():
    train, _ = generate(FC, TaskSpec(FER), 100, rng=make_rng(8))
    s, t = train[0], train[1]
    same = oracle_normalize(s, s, FC)
    assert same.observed.tobytes() == s.observed.tobytes()
    out = oracle_normalize(s, t, FC)
    est = factor_readout(out.observed, FC)
    assert np.max(np.abs(est["expression"] - s.expression)) < 1e-9
    assert np.max(np.abs(est["identity"] - t.identity)) < 1e-9
    assert np.max(np.abs(est["pose"] - t.pose)) < 1e-9
    assert np.max(np.abs(est["background"] - t.background)) < 1e-9
    batch = oracle_normalize(train, t, FC)
    assert batch.observed[0].tobytes() == out.observed.tobytes()


def test_noisy_readout_within_calibrated_bound():
    """Each read-out coordinate is pinv_row . noise, so |err| < 5 sigma ||pinv_row||."""
    sigma = 0.01
    cfg = FactorConfig(observation_noise_std=sigma)
    train, _ = generate(cfg, TaskSpec(FER), 1000, rng=make_rng(9))
    est = np.concatenate([factor_readout(train.observed, cfg)[k] for k in
                          ("identity", "expression", "pose", "background")], axis=1)
    err = np.abs(est - train.factors)
    bound = 5 * sigma * np.linalg.norm(cfg.readout_matrix, axis=1)
    assert np.all(err < bound[None, :])


def test_nonlinear_variant_is_approximate():
    cfg = FactorConfig(nonlinear=True)
    train, _ = generate(cfg, TaskSpec(FER), 200, rng=make_rng(10))
    est = factor_readout(train.observed, cfg)
    err = np.abs(est["expression"] - train.expression).mean()
    assert 1e-3 < err < 1.0


def test_jsonl_roundtrip(tmp_path):
    train, _ = generate(FC, TaskSpec(AU_DETECT), 50, rng=make_rng(11))
    path = tmp_path / "d.jsonl"
    save_jsonl(path, train, {"seed": 11})
    loaded, head = load_jsonl(path)
    assert head["format_version"] == 1 and head["seed"] == 11
    assert np.array_equal(loaded.observed, train.observed)
    assert np.array_equal(loaded.labels, train.labels)
    assert loaded.config == FC
