"""Pretraining, continual training, evaluation, ablations and run bookkeeping."""

from .config import ExperimentConfig
from .evaluation import EVAL_MODES, evaluate
from .pipeline import ABLATIONS, RunManifest, obtain_base, run_ablation, run_pipeline, train_pool
from .pretrain import PretrainError, make_task, pretrain_base
from .training import continual_train

__all__ = ["ABLATIONS", "EVAL_MODES", "ExperimentConfig", "PretrainError", "RunManifest", "continual_train",
           "evaluate", "make_task", "obtain_base", "pretrain_base", "run_ablation", "run_pipeline", "train_pool"]
