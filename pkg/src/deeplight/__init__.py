"""Lightning occurrence nowcasting with a dual-encoder multi-branch ConvLSTM."""

from .estimator import DeepLightForecaster, PersistenceForecaster
from .grid import DatasetManifest, FeatureFrame, GridSpec, SampleWindow, build_windows
from .loss import LossConfig
from .network import DeepLight, ModelConfig

__all__ = [
    "DatasetManifest",
    "DeepLight",
    "DeepLightForecaster",
    "FeatureFrame",
    "GridSpec",
    "LossConfig",
    "ModelConfig",
    "PersistenceForecaster",
    "SampleWindow",
    "build_windows",
]

__version__ = "0.1.0"
