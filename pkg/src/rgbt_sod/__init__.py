"""RGB-thermal salient object detection with a multi-interactive Siamese decoder."""
from .decoder import SaliencyOutputs
from .losses import LossBreakdown, total_loss
from .model import ModelConfig, RGBTSaliencyNet

__all__ = ["ModelConfig", "RGBTSaliencyNet", "SaliencyOutputs", "LossBreakdown", "total_loss"]
__version__ = "0.1.0"
