"""Synchronized frame/video query embeddings for video instance segmentation, at desk scale."""

from .config import ModelConfig, TrainConfig
from .model import SyncVIS

__all__ = ["ModelConfig", "TrainConfig", "SyncVIS"]
