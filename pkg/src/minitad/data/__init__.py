from minitad.data.annotations import (
    AnnotationDatabase,
    AnnotationFormatError,
    load_annotations,
    save_annotations,
)
from minitad.data.mapping import (
    TemporalMappingConfig,
    WindowSpec,
    random_crop,
    remap_annotations,
    rescale,
    rescale_segments,
    slice_window,
    sliding_windows,
)
from minitad.data.store import FeatureStore, FeatureStoreError
from minitad.data.synthetic import (
    SyntheticDataset,
    SyntheticSpec,
    correlation_detector,
    generate_synthetic,
)
from minitad.data.dataset import DetectionDataset

__all__ = [
    "AnnotationDatabase",
    "AnnotationFormatError",
    "DetectionDataset",
    "FeatureStore",
    "FeatureStoreError",
    "SyntheticDataset",
    "SyntheticSpec",
    "TemporalMappingConfig",
    "WindowSpec",
    "correlation_detector",
    "generate_synthetic",
    "load_annotations",
    "random_crop",
    "remap_annotations",
    "rescale",
    "rescale_segments",
    "save_annotations",
    "slice_window",
    "sliding_windows",
]
