"""Diff-Net: story ending prediction by comparing the two candidate endings.

Everything runs on numpy: a small reverse-mode autodiff core (``tensor``), the
text pipeline (``text``, ``stemmer``), the model (``model``), training and
checkpoints (``train``), evaluation grids (``harness``) and the ``diffnet``
command line (``cli``).
"""

from .model import ModelConfig, score_pair
from .text import StoryInstance, generate_synthetic
from .train import TrainConfig, fit

__all__ = ["ModelConfig", "TrainConfig", "StoryInstance", "fit", "generate_synthetic", "score_pair"]
__version__ = "0.1.0"
