"""Active learning for anchor-user prediction across two social networks."""

__version__ = "0.1.0"

from .active import run_algorithm1, run_repeated, split_dataset, train_at_ratio
from .config import ExperimentConfig, load_config
from .context import structural_context
from .graph import SocialGraph, TwinNetworkDataset, generate_twin_networks

__all__ = ["ExperimentConfig", "SocialGraph", "TwinNetworkDataset", "generate_twin_networks",
           "load_config", "run_algorithm1", "run_repeated", "split_dataset", "structural_context",
           "train_at_ratio"]
