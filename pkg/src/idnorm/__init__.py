"""Identity-normalized expression analysis at desk scale.

Stage one normalizes every sample to a common target identity; stage two
classifies expressions from the normalized and original streams through
mixture-of-experts blocks. Everything runs on a small reverse-mode autodiff
core over float64 numpy arrays.
"""
from .classifier import (ClaLossWeights, ClassifierConfig, ClassifierModel, cla_loss, classify,
                         predict, train_classifier)
from .diffcore import Value, make_rng
from .experiment import ExperimentConfig, MetricsReport, report, run_experiment
from .moe import GateDecision, MoEConfig, global_local_losses, importance_loss, moe_forward, route
from .normalizer import (EmbedderSuite, NormalizerModel, NormLossWeights, norm_loss, normalize,
                         train_normalizer)
from .synthdata import FactorConfig, FactorSample, factor_readout, generate, oracle_normalize
from .tasks import AU_DETECT, AU_INTENSITY, FER, TaskSpec

__version__ = "0.1.0"
