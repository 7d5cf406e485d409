"""Demonstration curation from policy rollouts.

Train a mixture-density behavior-cloning policy on heterogeneous scripted
demos, fit success classifiers on its rollouts at several checkpoints, pick
one by cross-validation, drop demos whose mean success probability falls at
or below the learned threshold, and retrain.
"""

from .curator import CurationConfig, CurationResult, DegenerateFilterError, curate
from .datamodel import DemoDataset, RolloutSet, Trajectory, build_mixture, load_jsonl, save_jsonl
from .envsim import EnvConfig, StrategyTag, calibrate, script_demo
from .pipeline import ExperimentConfig, emit_report, run_ablation_suite, run_experiment
from .policy import MdnPolicy, SuccessStats, TrainRun, collect_rollouts, evaluate_policy, train_bc

__all__ = [
    "CurationConfig", "CurationResult", "DegenerateFilterError", "curate",
    "DemoDataset", "RolloutSet", "Trajectory", "build_mixture", "load_jsonl", "save_jsonl",
    "EnvConfig", "StrategyTag", "calibrate", "script_demo",
    "ExperimentConfig", "emit_report", "run_ablation_suite", "run_experiment",
    "MdnPolicy", "SuccessStats", "TrainRun", "collect_rollouts", "evaluate_policy", "train_bc",
]
