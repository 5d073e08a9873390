"""Walk through noisy top-k routing and the three balancing losses.

    python demos/routing_walkthrough.py
"""
import math

import numpy as np

from idnorm import diffcore as dc
from idnorm.moe import (GateDecision, MoEBlock, MoEConfig, global_local_losses,
                        importance_loss, route)

rng = np.random.default_rng(0)
config = MoEConfig(m=4, k=2, expert_hidden=8)
block = MoEBlock(6, config, rng)
x = rng.normal(size=(5, 6))

# clean routing: softmax over the gate logits, keep the two largest, no renormalisation
clean = route(x, block.router, MoEConfig(4, 2, noise_enabled=False))
print("probabilities\n", np.round(clean.probs.data, 3))
print("selected experts per row\n", clean.selected)
print("gates (row sums stay below 1)\n", np.round(clean.gates.data, 3))

# training-time routing perturbs the logits, so selections can differ
noisy = route(x, block.router, config, rng=np.random.default_rng(1))
print("noisy selections\n", noisy.selected)

# the block output only touches the chosen experts
y, decision = block(x, rng=np.random.default_rng(1), training=True)
dc.sum(y).backward()
used = set(decision.selected.ravel().tolist())
for e, expert in enumerate(block.experts):
    touched = any(p.grad.any() for p in expert.parameters())
    print(f"expert {e}: selected={e in used} got gradient={touched}")


def decision(probs, gates):
    return GateDecision(dc.Value(np.asarray(probs, float)), np.zeros((len(probs), 1), int),
                        dc.Value(np.asarray(gates, float)))


onehot = np.eye(4)[[0, 0, 0, 1]]
print("importance loss, even load:", importance_loss(decision(np.full((4, 4), .25),
                                                              np.full((4, 4), .25))).item())
print("importance loss, load (3,1,0,0):", importance_loss(decision(onehot, onehot)).item())
g, l = global_local_losses(decision(np.full((4, 4), .25), np.zeros((4, 4))))
print(f"uniform routing: global {g.item():.4f}, local {l.item():.4f} (ln 4 = {math.log(4):.4f})")
g, l = global_local_losses(decision(onehot, onehot))
print(f"confident routing: global {g.item():.4f}, local {l.item():.4f}")
