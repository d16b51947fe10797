"""Search-enhanced recommendation through user-code graphs over LLM preference codes."""

from .config import ABLATIONS, TrainConfig, load_config
from .data import Dataset, SynthConfig, generate_synthetic_dataset, leave_one_out_split, load_dataset
from .metrics import MetricsReport, evaluate
from .training import Recommender, run_ablation, run_pipeline, run_stage_one, sweep, train

__all__ = [
    "ABLATIONS",
    "Dataset",
    "MetricsReport",
    "Recommender",
    "SynthConfig",
    "TrainConfig",
    "evaluate",
    "generate_synthetic_dataset",
    "leave_one_out_split",
    "load_config",
    "load_dataset",
    "run_ablation",
    "run_pipeline",
    "run_stage_one",
    "sweep",
    "train",
]
