"""Multi-resolution aggregation transformer for 2D keypoint estimation."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, no_grad  # noqa: F401
from .model import AggPose, ModelConfig, VARIANTS  # noqa: F401
from .schemas import coco17, infant21  # noqa: F401
