"""Temporal heterogeneous graphs over audio/video segment features.

Core pieces: a small reverse-mode tensor engine (``tensor``), the THGF
feature-file format (``features``), Gaussian/Hawkes-weighted graph
construction (``graphs``), the cross-modal graph network (``model``), the
joint focal + contrastive objective (``losses``), ranking metrics
(``metrics``), the training loop (``training``), a synthetic dataset
generator (``synth``), and finite-difference verification
(``verification``).  The HTTP surface lives in ``thgraph.service``; the CLI
in ``thgraph.cli`` is a thin client over it.
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, grad_check  # noqa: E402,F401
from .features import FeatureSequence, read_feature_file, write_feature_file, load_manifest  # noqa: E402,F401
from .graphs import GraphConfig, TemporalHeteroGraph, build_graph  # noqa: E402,F401
from .model import AvGraphModel, ModelConfig, model_forward  # noqa: E402,F401
from .losses import LossConfig, contrastive_loss, focal_loss, total_loss  # noqa: E402,F401
from .metrics import auc_roc, mean_average_precision, ranking_report  # noqa: E402,F401
from .synth import SynthSpec, generate  # noqa: E402,F401
from .training import TrainConfig, evaluate, train  # noqa: E402,F401
