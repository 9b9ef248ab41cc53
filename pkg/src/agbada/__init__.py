"""From-scratch VGG-style CNN pipeline for binary gender classification of
clothing images: layers, transfer-learning freeze control, augmentation,
mini-batch SGD with validation callbacks, and evaluation reports."""

__version__ = "0.1.0"

from .errors import (AgbadaError, BadMagicError, ChecksumError, DimensionError, ImageError,  # noqa: E402
                     ParameterError, ShapeConflictError, StateError, TrainingDivergedError,
                     TruncatedFileError, ValidationError, WeightFileError)
from .model import (CLASS_NAMES, SequentialModel, build_gender_classifier, build_model,  # noqa: E402
                    build_vgg16_base, build_vgg_base, load_weights, save_weights, set_trainable)
