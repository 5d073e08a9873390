"""Multi-head cross-attention and the expression merging module.

The merging module fuses two patch-embedding streams: queries come from the
target stream, keys and values from the original stream, and the target
stream's own values are added back per head before the output projection.
The fused result then passes LN -> MLP (residual) and two pre-LN transformer
blocks.

Inputs are ``[N, L]`` patch matrices, optionally with a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, DimensionError, EmptyInputError
from .nn import MLP, Module


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 32
    num_heads: int = 4

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ConfigurationError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigurationError(
                f"num_heads={self.num_heads} does not divide model_dim={self.model_dim}")

    @property
    def d_k(self):
        return self.model_dim // self.num_heads


class AttentionProjections(Module):
    """Q, K, V and output projections, each ``L x L`` and split across heads by columns."""

    def __init__(self, config: AttentionConfig, rng, out_scale=1.0):
        L = config.model_dim
        s = 1.0 / np.sqrt(L)
        self.wq = dc.parameter(rng.normal(0.0, s, (L, L)))
        self.wk = dc.parameter(rng.normal(0.0, s, (L, L)))
        self.wv = dc.parameter(rng.normal(0.0, s, (L, L)))
        self.wo = dc.parameter(rng.normal(0.0, s * out_scale, (L, L)))


def _split_heads(x, config):
    # [..., N, L] -> [..., h, N, d_k]
    shape = x.shape[:-1] + (config.num_heads, config.d_k)
    return dc.swapaxes(dc.reshape(x, shape), -3, -2)


def _merge_heads(x):
    # [..., h, N, d_k] -> [..., N, L]
    x = dc.swapaxes(x, -3, -2)
    return dc.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _check_pair(e_t, e_o, config):
    if e_t.ndim < 2 or e_o.ndim < 2:
        raise DimensionError(f"expected [N, L] patch matrices, got {e_t.shape} and {e_o.shape}")
    if e_t.shape != e_o.shape:
        raise DimensionError(f"patch streams disagree: {e_t.shape} vs {e_o.shape}")
    if e_t.shape[-2] == 0:
        raise EmptyInputError("cross attention over zero patches")
    if e_t.shape[-1] != config.model_dim:
        raise DimensionError(f"embedding width {e_t.shape[-1]} != model_dim {config.model_dim}")


def cross_attention(e_t, e_o, params: AttentionProjections, config: AttentionConfig,
                    return_weights=False):
    """softmax(Q_t K_o^T / sqrt(d_k)) V_o + V_t per head, heads concatenated and projected."""
    e_t, e_o = dc.as_value(e_t), dc.as_value(e_o)
    _check_pair(e_t, e_o, config)
    q = _split_heads(dc.matmul(e_t, params.wq), config)
    k = _split_heads(dc.matmul(e_o, params.wk), config)
    v_o = _split_heads(dc.matmul(e_o, params.wv), config)
    v_t = _split_heads(dc.matmul(e_t, params.wv), config)
    scores = dc.matmul(q, dc.transpose(k)) * (1.0 / np.sqrt(config.d_k))
    weights = dc.softmax(scores, axis=-1)
    fused = dc.matmul(weights, v_o) + v_t
    out = dc.matmul(_merge_heads(fused), params.wo)
    if return_weights:
        return out, weights
    return out


def self_attention(x, params: AttentionProjections, config: AttentionConfig):
    q = _split_heads(dc.matmul(x, params.wq), config)
    k = _split_heads(dc.matmul(x, params.wk), config)
    v = _split_heads(dc.matmul(x, params.wv), config)
    weights = dc.softmax(dc.matmul(q, dc.transpose(k)) * (1.0 / np.sqrt(config.d_k)), axis=-1)
    return dc.matmul(_merge_heads(dc.matmul(weights, v)), params.wo)


class LayerNormParams(Module):
    def __init__(self, dim):
        self.gain = dc.parameter(np.ones(dim))
        self.bias = dc.parameter(np.zeros(dim))

    def __call__(self, x):
        return dc.layer_norm(x, self.gain, self.bias)


class TransformerBlock(Module):
    """Pre-LN block: x + SA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, config: AttentionConfig, rng, mlp_ratio=4, out_scale=1.0):
        L = config.model_dim
        self.ln1 = LayerNormParams(L)
        self.attn = AttentionProjections(config, rng, out_scale=out_scale)
        self.ln2 = LayerNormParams(L)
        self.mlp = MLP(L, mlp_ratio * L, L, rng, out_scale=out_scale)

    def __call__(self, x, config):
        x = x + self_attention(self.ln1(x), self.attn, config)
        return x + self.mlp(self.ln2(x))


class EmmParams(Module):
    def __init__(self, config: AttentionConfig, rng, n_blocks=2, mlp_ratio=4, out_scale=1.0):
        L = config.model_dim
        self.cross = AttentionProjections(config, rng)
        self.ln = LayerNormParams(L)
        self.mlp = MLP(L, mlp_ratio * L, L, rng, out_scale=out_scale)
        self.blocks = [TransformerBlock(config, rng, mlp_ratio, out_scale) for _ in range(n_blocks)]


def emm_forward(e_t, e_o, params: EmmParams, config: AttentionConfig):
    """Fuse original-stream expression content into the target stream."""
    fused = cross_attention(e_t, e_o, params.cross, config)
    x = fused + params.mlp(params.ln(fused))
    for block in params.blocks:
        x = block(x, config)
    return x
