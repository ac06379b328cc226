"""Moving-object segmentation on bird's-eye-view LiDAR images."""

from ._limoseg import (
    BevWindow,
    Frame,
    LimosegError,
    Model,
    benchmark,
    bev_windows,
    class_weight,
    count_motion_points,
    evaluate,
    generate_scene,
    int8_scale,
    load_sequence,
    model_size,
    motion_compensate,
    rasterize,
    rasterize_labels,
    residual,
    round_fp16,
    train,
    write_sequence,
)

__all__ = [
    "BevWindow",
    "Frame",
    "LimosegError",
    "Model",
    "benchmark",
    "bev_windows",
    "class_weight",
    "count_motion_points",
    "evaluate",
    "generate_scene",
    "int8_scale",
    "load_sequence",
    "model_size",
    "motion_compensate",
    "rasterize",
    "rasterize_labels",
    "residual",
    "round_fp16",
    "train",
    "write_sequence",
]
