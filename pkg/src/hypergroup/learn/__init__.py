"""Networks, objectives and training loops for grouped multi-agent learning."""
from .train import (METRIC_FIELDS, GroupingTracker, Trainer, TrainingAborted, build_model,
                    evaluate, select_actions, train_run)

__all__ = ["METRIC_FIELDS", "GroupingTracker", "Trainer", "TrainingAborted", "build_model",
           "evaluate", "select_actions", "train_run"]
