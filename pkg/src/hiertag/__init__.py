"""Joint-training heads for two-level hierarchical multi-label tagging."""

from .hierarchy import Hierarchy, LabelState, induce_coarse_labels, load_hierarchy, parse_hierarchy
from .heads import HeadModel, Prediction, Variant, init_model, predict
from .data import Dataset, SynthConfig, generate, load_dataset, save_dataset, stratified_split
from .trainer import TrainConfig, grid_search, multi_seed, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "HeadModel", "Hierarchy", "LabelState", "Prediction", "SynthConfig", "TrainConfig",
    "Variant", "generate", "grid_search", "induce_coarse_labels", "init_model", "load_dataset",
    "load_hierarchy", "multi_seed", "parse_hierarchy", "predict", "save_dataset", "stratified_split",
    "train",
]
