"""Depthwise-Inception deepfake speech detector with contrastive training.

Pipeline: STFT + linear filterbank spectrograms -> Depthwise-Inception
backbone -> bonafide Gaussian -> Mahalanobis distance scores.
"""

from dinspoof.errors import ConfigError, DataError, DinError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DinError", "NumericalError", "__version__"]
