"""Coarse-to-fine residual refinement segmentation toolkit."""

from .backbone import (
    ConfigurationError,
    NetworkConfig,
    UNetBackbone,
    init_parameters,
    parameter_count,
    read_checkpoint,
    save_checkpoint,
)
from .data import (
    DatasetSplit,
    SubImage,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    load_subimages,
    random_flip,
    sample_patch,
    split_dataset,
    write_dataset,
)
from .geometry import (
    InvalidAnnotationError,
    PolygonAnnotation,
    point_in_polygon,
    rasterize_polygons,
)
from .loss import (
    binarize,
    default_weights,
    dice_loss,
    dsc,
    evaluation_report,
    multiresolution_loss,
    total_loss,
    upsample_to_gt,
)
from .resseg import (
    MODEL_KINDS,
    SCHEME_FIXED,
    SCHEME_NONFIXED,
    BottomHead,
    PyramidOutput,
    RefineUnit,
    ResSegNet,
    ResSegNetHorz,
    UNetBaseline,
    build_model,
    load_model,
    save_model,
    supervised_maps,
    truncated_relu,
)
from .train import (
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    evaluate,
    predict_full,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BottomHead",
    "ConfigurationError",
    "DatasetSplit",
    "InvalidAnnotationError",
    "MODEL_KINDS",
    "NetworkConfig",
    "PolygonAnnotation",
    "PyramidOutput",
    "RefineUnit",
    "ResSegNet",
    "ResSegNetHorz",
    "SCHEME_FIXED",
    "SCHEME_NONFIXED",
    "SubImage",
    "SynthConfig",
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "UNetBackbone",
    "UNetBaseline",
    "binarize",
    "build_model",
    "default_weights",
    "dice_loss",
    "dsc",
    "evaluate",
    "evaluation_report",
    "generate_synthetic",
    "init_parameters",
    "load_manifest",
    "load_model",
    "load_subimages",
    "multiresolution_loss",
    "parameter_count",
    "point_in_polygon",
    "predict_full",
    "random_flip",
    "rasterize_polygons",
    "read_checkpoint",
    "sample_patch",
    "save_checkpoint",
    "save_model",
    "split_dataset",
    "supervised_maps",
    "total_loss",
    "train",
    "truncated_relu",
    "upsample_to_gt",
    "write_dataset",
]
