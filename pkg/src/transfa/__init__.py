"""Face attribute recognition with a windowed-attention transformer backbone,
attention-specific attribute branches and an identity-constraint loss.

Everything runs on numpy through the small reverse-mode autodiff engine in
:mod:`transfa.autodiff`.
"""

from .config import AttributeGroupSpec, Config, LossWeights, ModelConfig, TrainConfig, load_config, lr_at
from .errors import TransFAError
from .model import TransFA

__version__ = "0.1.0"

__all__ = [
    "AttributeGroupSpec", "Config", "LossWeights", "ModelConfig", "TrainConfig", "TransFA", "TransFAError",
    "load_config", "lr_at",
]
