"""Unsupervised outlier detection by IWAE training with adaptive loss truncation and batch increment."""

from .baselines import OdimConfig, odim_train_and_score, plain_score
from .core import HyperParams, TrainResult, score_heldout, train
from .data import Dataset, SynthSpec, gen_synthetic, load_csv, minmax_scale, split_ssod
from .estimator import ALTBI, ODIM
from .metrics import evaluate, pr_auc, roc_auc
from .optim import DpConfig

__version__ = "0.1.0"

__all__ = [
    "ALTBI", "ODIM", "Dataset", "DpConfig", "HyperParams", "OdimConfig", "SynthSpec", "TrainResult",
    "evaluate", "gen_synthetic", "load_csv", "minmax_scale", "odim_train_and_score", "plain_score",
    "pr_auc", "roc_auc", "score_heldout", "split_ssod", "train",
]
