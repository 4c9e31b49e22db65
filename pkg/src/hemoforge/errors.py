"""Exception hierarchy. Everything raised on purpose derives from HemoforgeError."""


class HemoforgeError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(HemoforgeError):
    """Invalid configuration file, key, value, or CLI usage."""


class RegistryError(HemoforgeError):
    """Malformed class registry."""


class ManifestError(HemoforgeError):
    """Manifest construction, merging, or fold-assignment failure."""


class DenoiseError(HemoforgeError):
    """Invalid input to the denoising stage."""


class SamplerError(HemoforgeError):
    """Invalid class weights or sampling request."""


class AugmentError(HemoforgeError):
    """Invalid augmentation request."""


class ModelBuildError(HemoforgeError):
    """Unknown backbone or inconsistent model specification."""


class BackboneUnavailableError(ModelBuildError):
    """Backbone is registered but its implementation dependency is missing."""


class WeightFetchError(ModelBuildError):
    """Pretrained weights could not be retrieved (missing file / transport)."""


class WeightChecksumError(ModelBuildError):
    """Pretrained weight file was retrieved but failed digest verification."""


class TrainingError(HemoforgeError):
    """Training loop failure (empty split, diverged loss, bad fold id)."""


class InferenceError(HemoforgeError):
    """Ensemble inference failure (bad checkpoints, excessive failed samples)."""


class MetricsError(HemoforgeError):
    """Invalid metric computation request."""


class AnalysisError(HemoforgeError):
    """Invalid label-issue analysis request."""
