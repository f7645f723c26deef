"""Contour-regression models and EF pipelines for echo-style image sequences.

The package covers the full loop: synthetic ultrasound-like data with
exact ground truth (syndata), ring/spatio-temporal graphs and spiral
orderings (graph), a small numpy layer toolkit with hand-written
backprop (layers), encoder/decoder keypoint models with EF heads
(model, training), volume geometry by the method of disks (geometry),
cycle detection and whole-video EF aggregation (temporal), evaluation
metrics (metrics), and a CLI tying them together (cli).
"""

from .errors import (
    AnnotationParseError,
    CheckpointError,
    ConfigError,
    DegenerateContourError,
    DegenerateVolumeError,
    DimensionError,
    EchoGraphError,
    GenerationError,
    InputTooShortError,
    InvalidGraphError,
    InvalidSpiralError,
    LabelError,
    NegativeEfWarning,
    NonFiniteError,
    ParseError,
    TrainingDivergedError,
    VideoFormatError,
)
from .geometry import (
    KeypointSet,
    LongAxis,
    VolumeEstimate,
    ef_from_keypoints,
    ef_from_volumes,
    long_axis,
    method_of_disks_volume,
    polygon_area,
)
from .graph import (
    ContourGraph,
    SpiralSequence,
    build_ring_graph,
    build_spatiotemporal_graph,
    ring_spirals,
    spiral_sequence,
    spiral_sequence_st,
    spirals_to_matrix,
    st_spirals,
)
from .layers import (
    Adam,
    Conv2d,
    Dense,
    Elu,
    GlobalAvgPool,
    LayerNorm,
    MaxPool2x2,
    Parameter,
    Relu,
    SpiralConv,
    finite_diff_check,
    glorot_uniform,
    parameter_count,
)
from .metrics import (
    EfMetrics,
    SegmentationScores,
    dice,
    ef_metrics,
    hausdorff,
    mean_keypoint_error,
    polygon_mask,
    score_case,
    summary_stats,
)
from .model import (
    MODES,
    ClipOutputs,
    EfPrediction,
    ModelConfig,
    MultiFrameModel,
    SingleFrameModel,
    build_model,
    edes_classifier_loss,
    ef_loss,
    expected_parameter_count,
    keypoint_loss,
    load_checkpoint,
    multi_frame_forward,
    save_checkpoint,
    single_frame_forward,
)
from .syndata import (
    ShapeParams,
    SyntheticCase,
    generate_case,
    generate_dataset,
    read_annotations,
    read_video,
    sample_params,
    split_dataset,
    write_annotations,
    write_video,
)
from .temporal import (
    CyclePair,
    LikelihoodDecode,
    SlidingWindowReport,
    TwoStageReport,
    VolumeCurve,
    decode_edes_likelihoods,
    detect_peaks,
    moving_average,
    sliding_window_ef,
    two_stage_ef,
    volume_curve,
)
from .training import EpochStats, TrainingReport, TrainSchedule, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AnnotationParseError",
    "CheckpointError",
    "ClipOutputs",
    "ConfigError",
    "ContourGraph",
    "Conv2d",
    "CyclePair",
    "DegenerateContourError",
    "DegenerateVolumeError",
    "Dense",
    "DimensionError",
    "EchoGraphError",
    "EfMetrics",
    "EfPrediction",
    "Elu",
    "EpochStats",
    "GenerationError",
    "GlobalAvgPool",
    "InputTooShortError",
    "InvalidGraphError",
    "InvalidSpiralError",
    "KeypointSet",
    "LabelError",
    "LayerNorm",
    "LikelihoodDecode",
    "LongAxis",
    "MODES",
    "MaxPool2x2",
    "ModelConfig",
    "MultiFrameModel",
    "NegativeEfWarning",
    "NonFiniteError",
    "Parameter",
    "ParseError",
    "Relu",
    "SegmentationScores",
    "ShapeParams",
    "SingleFrameModel",
    "SlidingWindowReport",
    "SpiralConv",
    "SpiralSequence",
    "SyntheticCase",
    "TrainSchedule",
    "TrainingDivergedError",
    "TrainingReport",
    "TwoStageReport",
    "VideoFormatError",
    "VolumeCurve",
    "VolumeEstimate",
    "build_model",
    "build_ring_graph",
    "build_spatiotemporal_graph",
    "decode_edes_likelihoods",
    "detect_peaks",
    "dice",
    "edes_classifier_loss",
    "ef_from_keypoints",
    "ef_from_volumes",
    "ef_loss",
    "ef_metrics",
    "expected_parameter_count",
    "finite_diff_check",
    "generate_case",
    "generate_dataset",
    "glorot_uniform",
    "hausdorff",
    "keypoint_loss",
    "load_checkpoint",
    "long_axis",
    "mean_keypoint_error",
    "method_of_disks_volume",
    "moving_average",
    "multi_frame_forward",
    "parameter_count",
    "polygon_area",
    "polygon_mask",
    "read_annotations",
    "read_video",
    "ring_spirals",
    "sample_params",
    "save_checkpoint",
    "score_case",
    "single_frame_forward",
    "sliding_window_ef",
    "spiral_sequence",
    "spiral_sequence_st",
    "spirals_to_matrix",
    "split_dataset",
    "st_spirals",
    "summary_stats",
    "train",
    "two_stage_ef",
    "volume_curve",
    "write_annotations",
    "write_video",
]
