"""Winograd-domain convolution layers, sparse inference and pruning in numpy."""
from .errors import (BoundsError, CapabilityError, ConsistencyError, CorruptFormatError,
                     InvariantError, NumericError, ShapeError, TrainingError, WinoError)
from .layer import backward_input, backward_weights, forward
from .reference import OpCounter, direct_conv, finite_diff_grad
from .sparse import compress, sparse_forward
from .transforms import (TileGeometry, TransformSet, cook_toom_transforms,
                         f2x2_3x3_transforms, lift, make_transforms)

__version__ = "0.1.0"
