"""Scene-graph question answering with instruction-conditioned graph neural networks."""

from .config import TrainConfig
from .model import SceneGraphQA

__all__ = ["SceneGraphQA", "TrainConfig"]
__version__ = "0.1.0"
