"""Hybrid zeroth-/first-order optimization lab for dual-branch continual learning."""

from .allocation import AllocationPolicy, LayerPattern, make_policy
from .data import DataConfig, build_task_stream, make_dataset
from .harness import RunConfig, RunMetrics, aggregate_seeds, run_stream
from .memory import MemoryReport, memory_footprint
from .model import ModelConfig, init_model
from .optim import STRATEGIES, ZOConfig

__version__ = "0.1.0"

__all__ = [
    "AllocationPolicy",
    "DataConfig",
    "LayerPattern",
    "MemoryReport",
    "ModelConfig",
    "RunConfig",
    "RunMetrics",
    "STRATEGIES",
    "ZOConfig",
    "aggregate_seeds",
    "build_task_stream",
    "init_model",
    "make_dataset",
    "make_policy",
    "memory_footprint",
    "run_stream",
]
