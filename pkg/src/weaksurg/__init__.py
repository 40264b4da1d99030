"""Weakly supervised surgical instrument segmentation at desk scale.

Image-level labels train a multi-class-token vision transformer. Two
temporal regularisers shape its class maps: patch-token propagation
across frames (PTER) and class-token continuity over local crops (CTSC).
The maps then become instance pseudo masks through connectivity.
"""

from .errors import CheckpointError, ConfigurationError, DatasetIOError, NumericFault

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigurationError", "DatasetIOError", "NumericFault", "__version__"]
