"""Trap-and-replace backdoor defense."""

from ._core import (
    ConfigError,
    ShapeError,
    centroid_separation,
    cross_entropy,
    evaluate,
    fingerprint,
    pca2,
    pca_scatter,
    poison,
    resolve_config,
    run,
    total_variation,
)

__all__ = [
    "ConfigError",
    "ShapeError",
    "centroid_separation",
    "cross_entropy",
    "evaluate",
    "fingerprint",
    "pca2",
    "pca_scatter",
    "poison",
    "resolve_config",
    "run",
    "total_variation",
]
