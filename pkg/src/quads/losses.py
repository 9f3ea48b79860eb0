"""Scalar training objectives and the per-step loss record."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ShapeError

NAN = float("nan")


@dataclass
class LossBreakdown:
    """Loss terms of one step or epoch. Terms the active phase does not evaluate are NaN."""

    l1: float = NAN
    l_gt: float = NAN
    l_dis: float = NAN
    l_centroid: float = NAN
    l_quant: float = NAN
    total: float = NAN
    alpha: float = 0.5
    gamma: int = 1

    def check(self, rel: float = 0.0) -> None:
        """Assert the blend identities hold for whichever branch was evaluated."""

        def close(a, b):
            return a == b or abs(a - b) <= rel * max(1.0, abs(b))

        if self.gamma not in (0, 1):
            raise AssertionError(f"gamma must be 0 or 1, got {self.gamma}")
        if self.gamma == 1:
            expect = self.alpha * self.l1 + (1 - self.alpha) * self.l_gt
            if not close(self.l_dis, expect):
                raise AssertionError(f"l_dis {self.l_dis} != {expect}")
            if not close(self.total, self.l_dis):
                raise AssertionError("total != l_dis at gamma=1")
        else:
            if not close(self.l_quant, self.l_centroid + self.l_gt):
                raise AssertionError(f"l_quant {self.l_quant} != l_centroid + l_gt")
            if not close(self.total, self.l_quant):
                raise AssertionError("total != l_quant at gamma=0")


def _check_reduction(reduction):
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def l1_feature_loss(z_teacher, z_student: Tensor, reduction: str = "mean") -> Tensor:
    """Summed absolute difference between teacher and student latents.

    The teacher side is treated as a constant. With ``reduction="mean"`` the
    total is divided by the batch size.
    """
    _check_reduction(reduction)
    zt = z_teacher.data if isinstance(z_teacher, Tensor) else np.asarray(z_teacher)
    if zt.shape != z_student.shape:
        raise ShapeError(f"l1_feature_loss: teacher {zt.shape} vs student {z_student.shape}")
    neg_t = Tensor._wrap(np.asarray(-zt, dtype=z_student.dtype))
    total = ad.sum_(ad.abs_(ad.add(z_student, neg_t)))
    if reduction == "mean" and z_student.data.ndim > 1:
        total = ad.mul_scalar(total, 1.0 / z_student.shape[0])
    return total


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    _check_reduction(reduction)
    lab = np.atleast_1d(np.asarray(labels))
    # a single (k,) logit vector becomes a (1, k) batch, still on the tape
    x = logits if logits.data.ndim == 2 else ad.gather_rows(logits, np.arange(logits.shape[0])[None, :])
    n, k = x.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows of logits but labels shape {lab.shape}")
    if lab.dtype.kind not in "iu" or lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"cross_entropy: labels must be integers in [0, {k})")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), lab] = 1
    picked = ad.sum_(ad.mul(ad.log_softmax(x), Tensor._wrap(onehot)))
    scale = -1.0 / n if reduction == "mean" else -1.0
    return ad.mul_scalar(picked, scale)


def _value(x) -> float:
    return float(x.data.reshape(-1)[0]) if isinstance(x, Tensor) else float(x)


def distillation_loss(l1, l_gt, alpha: float):
    """``alpha * l1 + (1 - alpha) * l_gt``; works on floats or taped scalars."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(l1, Tensor):
        return ad.add(ad.mul_scalar(l1, alpha), ad.mul_scalar(l_gt, 1.0 - alpha))
    return alpha * l1 + (1.0 - alpha) * l_gt


def quantization_loss(l_centroid, l_gt):
    for v in (l_centroid, l_gt):
        if not math.isfinite(_value(v)):
            raise NumericalError("quantization_loss: non-finite input")
    if isinstance(l_centroid, Tensor):
        return ad.add(l_centroid, l_gt)
    return l_centroid + l_gt


def combined_loss(l_dis, l_quant, gamma):
    """Phase selector: returns ``l_dis`` when gamma is 1 and ``l_quant`` when gamma is 0.

    Arguments may be zero-argument callables so the unselected branch is never built.
    """
    if isinstance(gamma, bool) or gamma not in (0, 1):
        raise ValueError(f"gamma must be 0 or 1, got {gamma!r}")
    chosen = l_dis if gamma == 1 else l_quant
    return chosen() if callable(chosen) else chosen
