"""Metric-learning out-of-distribution detection on small image datasets."""

from .detector import (ClassCentroids, classify, compute_centroids, max_softmax_score, ood_score,
                       pca_project)
from .errors import ConfigurationError, FormatError, TrainingDivergedError, UsageError
from .kernels import BACKEND
from .losses import (LossOutput, PairBatch, PairSchedule, batch_metric_loss, build_pairs,
                     contrastive_pair_loss, cross_entropy_loss, odm_pair_loss)
from .metrics import (MetricsReport, ScoreRecord, aupr, aupr_in, aupr_out, auroc, detection_error,
                      evaluate, fpr_at_tpr, threshold_at_tpr)
from .nn import EmbeddingNetwork, build_network, finite_difference_gradient
from .optim import OptimizerState, optimizer_step

__version__ = "0.1.0"
