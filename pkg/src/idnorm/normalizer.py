"""Identity normalization at vector scale.

A shared encoder turns the original and target samples into patch embeddings,
the merging module fuses them, and a decoder emits the normalized sample.
Training combines a hinge adversarial term with reconstruction, perceptual,
identity, contour, expression and eyebrow terms computed by fixed embedders.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .attention import AttentionConfig, EmmParams, emm_forward
from .errors import DimensionError, NonFiniteLossError
from .nn import MLP, Adam, Linear, Module, OptimizerConfig
from .synthdata import FactorConfig

log = logging.getLogger(__name__)

LOSS_TERMS = ("adv", "rec", "perc", "id", "lm", "exp", "eye")


@dataclass(frozen=True)
class NormLossWeights:
    rec: float = 10.0
    perc: float = 5.0
    id: float = 10.0
    lm: float = 5000.0
    exp: float = 5000.0
    eye: float = 10.0

    def __post_init__(self):
        for name in ("rec", "perc", "id", "lm", "exp", "eye"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass(frozen=True)
class NormalizerConfig:
    sample_dim: int = 64
    n_patches: int = 16
    model_dim: int = 32
    num_heads: int = 4
    encoder_hidden: int = 128
    decoder_hidden: int = 128
    disc_hidden: int = 64

    @property
    def attention(self):
        return AttentionConfig(self.model_dim, self.num_heads)


# ------------------------------------------------------------------ embedders

class LinearEmbedder:
    """Fixed map ``x -> x @ W.T``; never trained."""

    def __init__(self, matrix, name=""):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.name = name

    @property
    def out_dim(self):
        return self.matrix.shape[0]

    def __call__(self, x):
        return dc.matmul(x, self.matrix.T)


class Discriminator(Module):
    """Two-layer MLP scoring a concatenated ``[I_t, I_x]`` pair."""

    def __init__(self, sample_dim, hidden, rng):
        self.net = MLP(2 * sample_dim, hidden, 1, rng)

    def __call__(self, pair):
        return dc.reshape(self.net(pair), pair.shape[:-1])


@dataclass
class EmbedderSuite:
    identity: LinearEmbedder
    expression: LinearEmbedder
    eyebrow: LinearEmbedder
    perceptual: LinearEmbedder
    contour: LinearEmbedder
    discriminator: Discriminator

    @classmethod
    def build(cls, factor_config: FactorConfig, rng, eyebrow_channels=4, disc_hidden=64):
        """Embedders composed of random linear maps over the known factor read-out.

        identity reads identity factors, expression reads expression factors,
        eyebrow reads the first ``eyebrow_channels`` expression channels, contour
        reads identity and pose, and perceptual mixes the whole observation.
        """
        readout = factor_config.readout_matrix
        sl = factor_config.slices

        def reader(rows, out_dim):
            block = readout[rows]
            mix = rng.normal(size=(out_dim, block.shape[0])) / np.sqrt(block.shape[0])
            return mix @ block

        exp_rows = np.arange(sl["expression"].start, sl["expression"].stop)
        contour_rows = np.r_[np.arange(sl["identity"].start, sl["identity"].stop),
                             np.arange(sl["pose"].start, sl["pose"].stop)]
        S = factor_config.sample_dim
        return cls(
            identity=LinearEmbedder(reader(sl["identity"], factor_config.dim_identity), "identity"),
            expression=LinearEmbedder(reader(exp_rows, factor_config.dim_expression), "expression"),
            eyebrow=LinearEmbedder(reader(exp_rows[:eyebrow_channels], eyebrow_channels), "eyebrow"),
            perceptual=LinearEmbedder(rng.normal(size=(S, S)) / np.sqrt(S), "perceptual"),
            contour=LinearEmbedder(reader(contour_rows, len(contour_rows)), "contour"),
            discriminator=Discriminator(S, disc_hidden, rng),
        )


# --------------------------------------------------------------------- model

class NormalizerModel(Module):
    """Encoder and decoder are MLPs with a linear shortcut; the world they
    invert is nearly linear and the shortcut lets training find that map fast."""

    def __init__(self, config: NormalizerConfig, rng):
        self.config = config
        N, L = config.n_patches, config.model_dim
        self.encoder = MLP(config.sample_dim, config.encoder_hidden, N * L, rng)
        self.encoder_skip = Linear(config.sample_dim, N * L, rng)
        self.positions = dc.parameter(rng.normal(0.0, 1.0, (N, L)))
        self.emm = EmmParams(config.attention, rng, out_scale=0.5)
        self.decoder = MLP(N * L, config.decoder_hidden, config.sample_dim, rng)
        self.decoder_skip = Linear(N * L, config.sample_dim, rng)

    def encode(self, x):
        """Shared encoder: sample vectors -> ``[..., N, L]`` patch embeddings."""
        c = self.config
        e = self.encoder(x) + self.encoder_skip(x)
        return dc.reshape(e, x.shape[:-1] + (c.n_patches, c.model_dim)) + self.positions

    def decode(self, e):
        c = self.config
        flat = dc.reshape(e, e.shape[:-2] + (c.n_patches * c.model_dim,))
        return self.decoder(flat) + self.decoder_skip(flat)


def normalize(I_o, I_t, model: NormalizerModel):
    """``D_f(EMM(E_s(I_t), E_s(I_o)))`` for single samples or batches."""
    I_o, I_t = dc.as_value(I_o), dc.as_value(I_t)
    S = model.config.sample_dim
    if I_o.shape[-1] != S or I_t.shape[-1] != S:
        raise DimensionError(f"normalize expects width {S}, got {I_o.shape} and {I_t.shape}")
    if I_o.shape != I_t.shape:
        raise DimensionError(f"original and target disagree: {I_o.shape} vs {I_t.shape}")
    e_o = model.encode(I_o)
    e_t = model.encode(I_t)
    e_n = emm_forward(e_t, e_o, model.emm, model.config.attention)
    return model.decode(e_n)


# -------------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    raw: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    total: float = 0.0


def _pair(a, b):
    return dc.concat([a, b], axis=-1)


def _batch_mean(v):
    return dc.mean(v) if v.ndim else v


def norm_loss(I_o, I_t, I_n, suite: EmbedderSuite, weights: NormLossWeights,
              is_reconstruction_pair=False):
    """Weighted generator objective and its per-term breakdown.

    Every term is averaged over the batch. ``is_reconstruction_pair`` (bool or
    per-row bool array) gates the reconstruction term.
    """
    I_o, I_t, I_n = dc.as_value(I_o), dc.as_value(I_t), dc.as_value(I_n)
    rec_mask = np.broadcast_to(np.asarray(is_reconstruction_pair, dtype=np.float64),
                               I_n.shape[:-1])
    raw = {
        "adv": -_batch_mean(suite.discriminator(_pair(I_t, I_n))),
        "rec": _batch_mean(dc.l2_norm(I_n - I_t) * rec_mask),
        "perc": _batch_mean(dc.l2_norm(suite.perceptual(I_t) - suite.perceptual(I_n))),
        "id": _batch_mean(1.0 - dc.cosine_similarity(suite.identity(I_t), suite.identity(I_n))),
        "lm": _batch_mean(dc.l2_norm(suite.contour(I_t) - suite.contour(I_n))),
        "exp": _batch_mean(dc.l2_norm(suite.expression(I_o) - suite.expression(I_n))),
        "eye": _batch_mean(dc.l2_norm(suite.eyebrow(I_o) - suite.eyebrow(I_n))),
    }
    lam = {"adv": 1.0, "rec": weights.rec, "perc": weights.perc, "id": weights.id,
           "lm": weights.lm, "exp": weights.exp, "eye": weights.eye}
    total = None
    breakdown = LossBreakdown()
    for name in LOSS_TERMS:
        term = raw[name] * lam[name]
        total = term if total is None else total + term
        breakdown.raw[name] = raw[name].item()
        breakdown.weighted[name] = term.item()
    breakdown.total = total.item()
    return total, breakdown


def discriminator_loss(real_pair, fake_pair, discriminator):
    """Hinge objective: mean relu(1 - D(real)) + mean relu(1 + D(fake))."""
    d_real = discriminator(dc.as_value(real_pair))
    d_fake = discriminator(dc.as_value(fake_pair))
    return _batch_mean(dc.relu(1.0 - d_real)) + _batch_mean(dc.relu(1.0 + d_fake))


def generator_adversarial_loss(fake_scores):
    return -_batch_mean(dc.as_value(fake_scores))


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class NormalizerTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    p_rec: float = 0.2
    lr_schedule: str = "constant"  # or "linear": decay to zero at the last step
    optimizer: OptimizerConfig = OptimizerConfig(lr=1e-3, beta1=0.0, beta2=0.99)
    log_every: int = 0


# reference setting for image-scale training from pretrained backbones
REFERENCE_OPTIMIZER = OptimizerConfig(lr=1e-4, beta1=0.0, beta2=0.99)


@dataclass
class NormalizerCurves:
    rows: list = field(default_factory=list)

    def add(self, step, breakdown: LossBreakdown, d_loss):
        for name in LOSS_TERMS:
            self.rows.append((step, name, breakdown.raw[name]))
        self.rows.append((step, "total", breakdown.total))
        self.rows.append((step, "disc", d_loss))

    def series(self, term):
        return np.array([v for _, t, v in self.rows if t == term])


def _same_identity_partner(identity_id, rng, by_identity):
    pool = by_identity[identity_id]
    return pool[rng.integers(len(pool))]


def train_normalizer(dataset, model: NormalizerModel, suite: EmbedderSuite,
                     weights: NormLossWeights, train_config: NormalizerTrainConfig, rng):
    """Alternate generator and discriminator steps on randomly drawn pairs.

    Each pair draws I_o and I_t independently; with probability ``p_rec`` the
    pair is forced to I_o = I_t and the reconstruction term switches on. The
    discriminator's real pairs are ``[I_t, I_r]`` with I_r another sample of the
    target's identity.
    """
    cfg = train_config
    g_opt = Adam(model.parameters(), cfg.optimizer)
    d_opt = Adam(suite.discriminator.parameters(), cfg.optimizer)
    curves = NormalizerCurves()
    X = dataset.observed
    by_identity = {}
    for i, ident in enumerate(dataset.identity_id):
        by_identity.setdefault(int(ident), []).append(i)
    B = cfg.batch_size

    for step in range(cfg.steps):
        if cfg.lr_schedule == "linear":
            g_opt.lr_scale = d_opt.lr_scale = 1.0 - step / cfg.steps
        io_idx = rng.integers(0, len(X), B)
        it_idx = rng.integers(0, len(X), B)
        forced = rng.random(B) < cfg.p_rec
        io_idx = np.where(forced, it_idx, io_idx)
        real_idx = np.array([_same_identity_partner(int(dataset.identity_id[i]), rng, by_identity)
                             for i in it_idx])
        I_o, I_t, I_r = X[io_idx], X[it_idx], X[real_idx]

        g_opt.zero_grad()
        suite.discriminator.zero_grad()
        I_n = normalize(I_o, I_t, model)
        total, breakdown = norm_loss(I_o, I_t, I_n, suite, weights, forced)
        for name in LOSS_TERMS:
            if not np.isfinite(breakdown.raw[name]):
                raise NonFiniteLossError(name, step, breakdown.raw[name])
        total.backward()
        g_opt.step()

        d_opt.zero_grad()
        d_loss = discriminator_loss(np.concatenate([I_t, I_r], axis=-1),
                                    np.concatenate([I_t, I_n.data], axis=-1),
                                    suite.discriminator)
        if not np.isfinite(d_loss.item()):
            raise NonFiniteLossError("disc", step, d_loss.item())
        d_loss.backward()
        d_opt.step()

        curves.add(step, breakdown, d_loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("normalizer step %d total %.4f exp %.4f id %.4f", step, breakdown.total,
                     breakdown.raw["exp"], breakdown.raw["id"])
    return model, curves


def normalize_array(X_o, I_t, model, batch_size=512):
    """Run ``normalize`` over a numpy array of originals against one fixed target."""
    X_o = np.asarray(X_o, dtype=np.float64)
    out = np.empty_like(X_o)
    for start in range(0, len(X_o), batch_size):
        chunk = X_o[start:start + batch_size]
        target = np.broadcast_to(I_t, chunk.shape)
        out[start:start + batch_size] = normalize(chunk, target, model).data
    return out
