"""Exception types raised across the package."""


class DeepLightError(Exception):
    """Base class for all package errors."""


class ConfigError(DeepLightError, ValueError):
    """Inconsistent shapes, unknown variants or invalid hyperparameters."""


class ManifestError(DeepLightError, ValueError):
    """A dataset manifest is malformed or internally inconsistent."""


class StorageError(DeepLightError, OSError):
    """A stored frame is missing or does not match the manifest."""


class CoverageError(DeepLightError, ValueError):
    """No usable observations to build a frame from."""


class FetchError(DeepLightError, OSError):
    """A remote product could not be downloaded after retries."""


class TrainingError(DeepLightError, RuntimeError):
    """Training diverged (non-finite loss)."""
