"""Chained versus composite CNN/transformer pipelines on synthetic nearest-square maps."""

from .connector import FormatSpec, TokenSeq, decode_value, encode_sequence, encode_value, soft_digit_embed
from .evalreport import EvalResult, build_report, evaluate, point_error
from .scenegen import DatasetConfig, Point, Scene, generate_dataset, nearest_square, rasterize, sample_scene

__version__ = "0.1.0"

__all__ = [
    "DatasetConfig", "EvalResult", "FormatSpec", "Point", "Scene", "TokenSeq", "build_report",
    "decode_value", "encode_sequence", "encode_value", "evaluate", "generate_dataset", "nearest_square",
    "point_error", "rasterize", "sample_scene", "soft_digit_embed",
]
