"""Parameter containers, dense layers and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


class Module:
    """Anything holding parameters as attributes (Values, Modules or lists of them)."""

    def named_parameters(self, prefix=""):
        for name, attr in vars(self).items():
            yield from _walk(attr, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def _walk(attr, name):
    if isinstance(attr, dc.Value):
        if attr.requires_grad:
            yield name, attr
    elif isinstance(attr, Module):
        yield from attr.named_parameters(prefix=name + ".")
    elif isinstance(attr, (list, tuple)):
        for i, item in enumerate(attr):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, scale=1.0):
        self.weight = dc.parameter(rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))
        self.bias = dc.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = dc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Two dense layers with a GELU in between."""

    def __init__(self, n_in, n_hidden, n_out, rng, out_scale=1.0):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng, scale=out_scale)

    def __call__(self, x):
        return self.fc2(dc.gelu(self.fc1(x)))


def mlp_param_count(n_in, n_hidden, n_out):
    return n_in * n_hidden + n_hidden + n_hidden * n_out + n_out


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params, config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.lr_scale = 1.0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= (c.lr * self.lr_scale) * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
