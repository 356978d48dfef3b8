"""ETF-subspace energy scoring and a synthetic open-world detection benchmark."""

from .energy import batch_subspace_scores, head_score, logsumexp, score_subspaces
from .etf import EtfFrame, build_simplex_etf, split_subspaces
from .evaluate import EvalReport, average_precision, h_score, unknown_recall
from .experiment import ExperimentConfig, default_config, load_config, run_ablation, run_experiment
from .losses import LossWeights, ekd_loss, energy_margin_loss, eus_loss, total_loss
from .matching import PseudoConfig, pseudo_count, select_pseudo_unknowns
from .sim import TrainConfig, WorldConfig, generate_world, train_task

__version__ = "0.1.0"
