"""Classification scores and efficiency accounting (size, MACs, energy proxy)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .errors import ShapeError
from .models import ModelGraph

MIB = 1024 * 1024


def accuracy(preds, labels) -> float:
    p, y = np.asarray(preds), np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("accuracy needs two non-empty arrays of equal length")
    return float(np.mean(p == y))


def macro_f1(preds, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1.

    A class that never occurs in ``labels`` and is never predicted is left out
    of the average; any other class with no true positives scores 0.
    """
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    p, y = np.asarray(preds), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("preds and labels differ in length")
    if p.size and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= n_classes):
        raise ValueError(f"class index outside [0, {n_classes})")
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((p == c) & (y == c)))
        fp = int(np.sum((p == c) & (y != c)))
        fn = int(np.sum((p != c) & (y == c)))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def model_size_mb(param_count: int, bit_length: int) -> float:
    """Every parameter stored at ``bit_length`` bits, in MiB, rounded to 2 decimals."""
    if param_count < 0 or bit_length < 1:
        raise ValueError("param_count must be >= 0 and bit_length >= 1")
    return round(param_count * bit_length / 8 / MIB, 2)


def conv1d_macs(kernel: int, c_in: int, c_out: int, out_frames: int) -> int:
    return kernel * c_in * c_out * out_frames


def dense_macs(fan_in: int, fan_out: int, frames: int = 1) -> int:
    return fan_in * fan_out * frames


def count_macs(model: ModelGraph, input_frames: int) -> int:
    """Multiply-accumulates for one utterance of ``input_frames`` frames (shape-only)."""
    if input_frames is None or input_frames < 1:
        raise ShapeError("count_macs needs a resolved positive frame count")
    frames = input_frames
    total = 0
    for layer in model.layers:
        if layer.kind == "conv1d":
            k, c_in, c_out = layer.weight.shape
            if frames < k:
                raise ShapeError(f"{layer.name}: {frames} frames shorter than kernel {k}")
            frames = (frames - k) // layer.stride + 1
            total += conv1d_macs(k, c_in, c_out, frames)
        else:
            total += dense_macs(*layer.weight.shape, frames)
    if model.head is not None:
        total += dense_macs(*model.head.weight.shape)
    return total


def count_gmacs(model: ModelGraph, input_frames: int) -> float:
    return count_macs(model, input_frames) / 1e9


def energy_proxy(gmacs: float, bit_length: int, energy_table: Mapping[int, float]) -> float:
    """``MACs x energy-per-MAC`` for a user-supplied table keyed by bit length."""
    if bit_length not in energy_table:
        raise KeyError(f"energy table has no entry for {bit_length}-bit MACs")
    return gmacs * 1e9 * energy_table[bit_length]


@dataclass
class EfficiencyReport:
    param_count: int
    bit_length: int
    size_mb_paper_convention: float
    size_mb_serialized: float
    gmacs: float
    energy_proxy: float | None = None

    def as_row(self) -> dict:
        return asdict(self)


def efficiency_report(
    model: ModelGraph,
    bit_length: int,
    input_frames: int,
    serialized_bytes: int,
    energy_table: Mapping[int, float] | None = None,
) -> EfficiencyReport:
    params = model.param_count()
    gmacs = count_gmacs(model, input_frames)
    energy = energy_proxy(gmacs, bit_length, energy_table) if energy_table else None
    return EfficiencyReport(
        param_count=params,
        bit_length=bit_length,
        size_mb_paper_convention=model_size_mb(params, bit_length),
        size_mb_serialized=serialized_bytes / MIB,
        gmacs=gmacs,
        energy_proxy=energy,
    )
