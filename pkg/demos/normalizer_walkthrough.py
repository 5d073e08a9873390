"""Train the identity normalizer on synthetic faces and inspect what it swapped.

The synthetic generator knows every sample's identity and expression factors,
so we can read them back out of the normalizer's output and check that the
expression came from the source face and the identity from the target face.

    python demos/normalizer_walkthrough.py [steps]
"""
import sys
import time

import numpy as np

from idnorm.diffcore import make_rng
from idnorm.normalizer import (EmbedderSuite, NormalizerConfig, NormalizerModel,
                               NormalizerTrainConfig, NormLossWeights, normalize,
                               train_normalizer)
from idnorm.synthdata import FactorConfig, factor_readout, generate_pool
from idnorm.tasks import TaskSpec

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
fc = FactorConfig()
task = TaskSpec("fer")
pool = generate_pool(fc, task, 200, 5000, make_rng(0, "pool"))
held = generate_pool(fc, task, 20, 400, make_rng(0, "held"), id_offset=500_000)

model = NormalizerModel(NormalizerConfig(), make_rng(0, "init"))
suite = EmbedderSuite.build(fc, make_rng(0, "embedders"))
start = time.perf_counter()
model, curves = train_normalizer(pool, model, suite, NormLossWeights(),
                                 NormalizerTrainConfig(steps=steps), make_rng(0, "train"))
print(f"{steps} steps in {time.perf_counter() - start:.0f}s")
for term in ("exp", "id", "lm", "perc", "adv", "disc"):
    s = curves.series(term)
    print(f"  {term:5s} first 50 steps {s[:50].mean():9.4f}   last 50 steps {s[-50:].mean():9.4f}")

rng = np.random.default_rng(1)
a, b = rng.integers(0, len(held), (2, 600))
keep = held.identity_id[a] != held.identity_id[b]
I_o, I_t = held.observed[a[keep]], held.observed[b[keep]]
I_n = normalize(I_o, I_t, model).data
f_o, f_t, f_n = (factor_readout(x, fc) for x in (I_o, I_t, I_n))


def dist(p, q, key):
    return np.linalg.norm(p[key] - q[key], axis=1)


# copying the target would lose the expression; copying the source would keep the identity
exp_ratio = dist(f_n, f_o, "expression") / dist(f_t, f_o, "expression")
id_ratio = dist(f_n, f_t, "identity") / dist(f_o, f_t, "identity")
print(f"held-out pairs: {len(I_o)}")
print(f"expression closer to source than a copy of the target: {np.mean(exp_ratio < 1):.1%} "
      f"(median error ratio {np.median(exp_ratio):.3f})")
print(f"identity closer to target than a copy of the source:   {np.mean(id_ratio < 1):.1%} "
      f"(median error ratio {np.median(id_ratio):.3f})")
