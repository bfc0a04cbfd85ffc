"""Desk-scale lab for single-task data poisoning in class-incremental
continual learning: synthetic task streams, corruption-based attacks, a
deterministic training engine, and a task-vector rollback defense."""

from .attacks import PoisonSpec, choose_poisoned_classes, poison_task, preset
from .config import ExperimentPlan, load_config, parse_config
from .corruptions import CorruptionKind
from .data import Sample, StreamSpec, TaskDataset, make_stream, synth_class_pool
from .defense import DetectorState, calibrate_alpha, detect, guarded_run, pr_curve
from .methods import (MethodConfig, eval_class_il, joint_train, report_delta, report_tables,
                      run_stream, train_task)

__all__ = [
    "PoisonSpec", "choose_poisoned_classes", "poison_task", "preset",
    "ExperimentPlan", "load_config", "parse_config", "CorruptionKind",
    "Sample", "StreamSpec", "TaskDataset", "make_stream", "synth_class_pool",
    "DetectorState", "calibrate_alpha", "detect", "guarded_run", "pr_curve",
    "MethodConfig", "eval_class_il", "joint_train", "report_delta", "report_tables",
    "run_stream", "train_task",
]
