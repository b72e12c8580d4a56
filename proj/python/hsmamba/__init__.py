"""Dual-domain selective-scan hyperspectral image classifier.

Thin Python surface over the C++ core: synthetic scenes, stratified pixel
splits, the state-space scan primitives, and the full per-pixel model.
"""

from ._core import (
    HsmError,
    Model,
    benchmark_scan,
    compute_metrics,
    discretize_zoh,
    kernel_scan,
    normalize,
    positional_encoding,
    read_cube,
    read_labels,
    recurrent_scan,
    selective_scan,
    stratified_split,
    synth_scene,
    write_cube,
    write_labels,
)

__all__ = [
    "HsmError",
    "Model",
    "benchmark_scan",
    "compute_metrics",
    "discretize_zoh",
    "kernel_scan",
    "normalize",
    "positional_encoding",
    "read_cube",
    "read_labels",
    "recurrent_scan",
    "selective_scan",
    "stratified_split",
    "synth_scene",
    "write_cube",
    "write_labels",
]
