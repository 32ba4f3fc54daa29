"""Density-ratio weighted behavioral cloning for contaminated offline datasets."""

from .trajdata import Dataset, SplitSpec, Trajectory, concat, load_dataset, save_dataset, split_reference
from .poison import ContaminationSpec, apply_contamination
from .ratio import WeightTable, compute_weights, ratio_from_score, train_discriminator
from .wbc import TrainConfig, train_policy

__version__ = "0.1.0"
