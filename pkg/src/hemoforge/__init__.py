"""hemoforge: training and ensemble inference for highly imbalanced
white-blood-cell image classification.

The pipeline covers dataset preparation (manifest building, merging, and
stratified fold assignment), adaptive non-local-means denoising, effective-
number weighted sampling with focal-loss training of a backbone-by-fold model
grid, dihedral test-time-augmented ensemble inference, leakage-free
out-of-fold evaluation, and confident-learning label-error analysis.
"""

__version__ = "0.1.0"

from .errors import (
    AnalysisError,
    AugmentError,
    BackboneUnavailableError,
    ConfigError,
    DenoiseError,
    HemoforgeError,
    InferenceError,
    ManifestError,
    MetricsError,
    ModelBuildError,
    RegistryError,
    SamplerError,
    TrainingError,
    WeightChecksumError,
    WeightFetchError,
)
from .registry import ClassEntry, ClassRegistry, Lineage, default_registry
from .manifest import (
    Manifest,
    SampleRecord,
    Source,
    assign_stratified_folds,
    build_manifest,
    merge_manifests,
)
from .denoise import (
    DenoiseConfig,
    NoiseEstimate,
    adaptive_denoise,
    estimate_sigma,
    nlm_denoise,
    psnr,
)
from .imbalance import (
    ClassWeights,
    compute_class_weights,
    effective_number,
    record_probabilities,
    weighted_sample_stream,
)
from .augment import (
    AugmentConfig,
    MixedBatch,
    MixMode,
    apply_batch_mixing,
    cutmix,
    dihedral,
    dihedral_inverse_index,
    mixup,
    train_augment,
    tta_views,
)
from .models import (
    CACHE_ENV_VAR,
    CacheWeightProvider,
    HeadSpec,
    ModelSpec,
    WbcClassifier,
    build_model,
    parameter_count,
    registered_backbones,
)
from .metrics import (
    ClassMetrics,
    ConfusionMatrix,
    MetricReport,
    compute_metrics,
    confusion_matrix,
)
from .training import (
    Checkpoint,
    EmaTracker,
    GridEntry,
    TrainConfig,
    cosine_lr,
    derive_seed,
    ema_update,
    focal_loss,
    load_grid,
    save_grid,
    train_fold,
    train_grid,
)
from .inference import (
    EnsembleSpec,
    InferenceSummary,
    LogitMatrix,
    Prediction,
    ensemble_logits,
    infer_dataset,
    model_logits,
    predict,
)
from .oof import OofResult, out_of_fold_eval
from .confident import (
    LabelIssue,
    class_thresholds,
    confident_joint,
    find_label_issues,
    misclassification_matrix,
)
from .config import PipelineConfig
from .synth import flip_labels, synth_dataset, uniform_flip_matrix

__all__ = [name for name in dir() if not name.startswith("_")]
