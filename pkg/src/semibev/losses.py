"""Training losses: Dice supervision and the two flip-consistency terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 2e-3  # segmentation consistency
    lambda2: float = 2e-4  # feature consistency

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def dice_loss(pred: Tensor, gt, eps: float = DICE_EPS) -> Tensor:
    """Multi-label Dice loss, one minus the class-averaged Dice coefficient.

    ``pred`` is C×Z×X (or N×C×Z×X, in which case every cell of the batch
    counts as one pixel of the sum). ``gt`` is a binary array or tensor of
    the same shape and never receives gradient.
    """
    gt = T.as_tensor(gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ValueError(f"dice_loss: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim not in (3, 4):
        raise ValueError(f"dice_loss: expected C×Z×X or N×C×Z×X, got {pred.shape}")
    # class axis is third from the end; sum over everything else
    axes = (0, 2, 3) if pred.ndim == 4 else (1, 2)
    inter = T.sum(T.mul(pred, gt), axes)
    denom = T.add(T.add(T.sum(pred, axes), T.sum(gt, axes)), eps)
    coef = T.div(T.mul(inter, 2.0), denom)
    return T.add(T.neg(T.mean(coef)), 1.0)


def _mean_square(a: Tensor, b: Tensor, name: str) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    d = T.sub(a, b)
    return T.mean(T.mul(d, d))


def seg_consistency(y_teacher: Tensor, y_student_flipped: Tensor) -> Tensor:
    """Mean squared gap between the teacher's map and the student's flipped-back map.

    The teacher side is detached here, so callers cannot leak gradient into it.
    """
    return _mean_square(T.detach(y_teacher), y_student_flipped, "seg_consistency")


def feat_consistency(f_teacher: Tensor, f_student_flipped: Tensor) -> Tensor:
    """Same as :func:`seg_consistency`, on BEV features."""
    return _mean_square(T.detach(f_teacher), f_student_flipped, "feat_consistency")


def flip_x(t: Tensor) -> Tensor:
    """Mirror a BEV tensor along its last (x) axis."""
    return T.flip(t, t.ndim - 1)


def total_loss(l_sup: Tensor, l_sc: Tensor, l_fc: Tensor, w: LossWeights) -> Tensor:
    return T.add(T.add(l_sup, T.mul(l_sc, w.lambda1)), T.mul(l_fc, w.lambda2))
