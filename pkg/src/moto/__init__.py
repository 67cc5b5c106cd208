"""Latent world-model actor-critic with offline pre-training and online fine-tuning."""

from .config import Config
from .data import Trajectory, TrajectoryStore
from .world_model import ImaginedRollout, LatentState, WorldModel

__all__ = ["Config", "Trajectory", "TrajectoryStore", "WorldModel", "LatentState",
           "ImaginedRollout"]

__version__ = "0.1.0"
