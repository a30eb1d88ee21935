"""Prompt tuning with image-guided distribution alignment on small dual encoders."""
from .alignment import FeatureBank, IFTParams, build_domain_banks, build_feature_bank, ift_forward
from .datagen import SyntheticShiftSpec, generate_synthetic
from .encoder import EncoderConfig, FrozenWeights, PromptSet, encode_images, encode_text
from .errors import (BankConstructionError, ContractError, DataError, DegenerateInputError,
                     DeterminismError, DimensionError, FormatError, NumericalError, PDAError,
                     ParameterError)
from .estimator import PDAClassifier
from .metrics import class_distance_stats, kl_gaussian, mmd
from .training import PDAModel, TrainConfig, UDADataset, predict, pseudo_label, train

__version__ = "0.1.0"

__all__ = [
    "BankConstructionError", "ContractError", "DataError", "DegenerateInputError",
    "DeterminismError", "DimensionError", "EncoderConfig", "FeatureBank", "FormatError",
    "FrozenWeights", "IFTParams", "NumericalError", "PDAClassifier", "PDAError", "PDAModel",
    "ParameterError", "PromptSet", "SyntheticShiftSpec", "TrainConfig", "UDADataset",
    "build_domain_banks", "build_feature_bank", "class_distance_stats", "encode_images",
    "encode_text", "generate_synthetic", "ift_forward", "kl_gaussian", "mmd", "predict",
    "pseudo_label", "train",
]
