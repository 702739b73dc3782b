"""Synthetic domain-shift benchmark for class-residual transport."""

from .config import METHODS, ExperimentConfig, load_config
from .pipeline import EvalReport, run_fewshot, run_merged_ablation, run_pipeline

__all__ = ["METHODS", "ExperimentConfig", "load_config", "EvalReport", "run_pipeline", "run_merged_ablation", "run_fewshot"]
