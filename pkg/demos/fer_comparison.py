"""Does identity normalization help an emotion classifier on unseen people?

Trains the classifier three ways (original faces only, faces normalized by the
exact synthetic oracle, faces normalized by a trained normalizer) and prints
the comparison table. The default is a quick two-seed run on 3000 samples;
pass --full for the five-seed, 10^4-sample setting.

    python demos/fer_comparison.py [--full] [--out DIR]
"""
import argparse
from dataclasses import replace

from idnorm.classifier import ClassifierTrainConfig
from idnorm.experiment import ExperimentConfig, report, run_comparison
from idnorm.normalizer import NormalizerTrainConfig

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", default="runs/demo_fer")
args = parser.parse_args()

config = ExperimentConfig()
if not args.full:
    config = replace(config, seeds=(0, 1), n_samples=3000,
                     cla_train=ClassifierTrainConfig(epochs=20),
                     norm_train=replace(config.norm_train, steps=2000))

run_comparison(config, out_root=args.out)
text, _ = report([args.out], args.out)
print(text)
