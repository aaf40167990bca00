"""Keypoint detection, descriptor matching and distance-based outlier rejection."""

from .cache import read_features, write_features
from .detector import DESCRIPTOR_SIZE, DetectorParams, Feature, FeatureSet, detect_features
from .matching import (
    FeatureMatchSet,
    RawMatch,
    distance_rejector,
    match_features,
    match_frame,
    reject_outliers,
)

__all__ = [
    "DESCRIPTOR_SIZE",
    "DetectorParams",
    "Feature",
    "FeatureMatchSet",
    "FeatureSet",
    "RawMatch",
    "detect_features",
    "distance_rejector",
    "match_features",
    "match_frame",
    "read_features",
    "reject_outliers",
    "write_features",
]
