"""Weakly supervised classification and localization of heterogeneous concept
pairs in bags of tracks, via a constrained stacked integrative Indian Buffet
Process with truncated mean-field variational inference."""

from .decode import (
    DecodedBag,
    MetricsReport,
    average_precision,
    decode_dataset,
    decode_tracks,
    localize,
    score,
    threshold_sweep,
)
from .inference import (
    MODE_FREE_ANNOTATION,
    MODE_WITH_LABELS,
    VARIANTS,
    FitOptions,
    FitReport,
    InferenceEngine,
    InferenceScratch,
    TrainedModel,
    fit,
    predict,
)
from .sampler import GenConfig, PlantedTruth, sample_dataset, sample_dataset_with_truth, sample_stick_breaking
from .types import (
    ConceptSpace,
    ConstraintSet,
    Dataset,
    HyperParams,
    LabelTuple,
    NumericalError,
    Track,
    ValidationError,
    VariationalState,
    VideoBag,
    build_all_constraints,
    build_constraints,
)

__version__ = "0.1.0"

__all__ = [
    "ConceptSpace",
    "ConstraintSet",
    "Dataset",
    "DecodedBag",
    "FitOptions",
    "FitReport",
    "GenConfig",
    "HyperParams",
    "InferenceEngine",
    "InferenceScratch",
    "LabelTuple",
    "MetricsReport",
    "MODE_FREE_ANNOTATION",
    "MODE_WITH_LABELS",
    "NumericalError",
    "PlantedTruth",
    "Track",
    "TrainedModel",
    "ValidationError",
    "VariationalState",
    "VideoBag",
    "VARIANTS",
    "average_precision",
    "build_all_constraints",
    "build_constraints",
    "decode_dataset",
    "decode_tracks",
    "fit",
    "localize",
    "predict",
    "sample_dataset",
    "sample_dataset_with_truth",
    "sample_stick_breaking",
    "score",
    "threshold_sweep",
]
