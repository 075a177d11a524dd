"""Conjoint rotation and the horizontal-flip view used for consistency."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (BevGrid, BorderMode, homography_for_rotation, hflip_image,
                       hflip_intrinsics, rotate_bev_map, warp_image)
from .synthworld import DEFAULT_GRID, Sample


@dataclass(frozen=True)
class AugmentConfig:
    alpha_max: float = 35.0  # degrees
    apply_prob: float = 0.5
    border: BorderMode = BorderMode.REPLICATE

    def __post_init__(self):
        if not 0 <= self.alpha_max <= 90:
            raise ValueError(f"alpha_max must be within [0, 90] degrees, got {self.alpha_max}")
        if not 0 <= self.apply_prob <= 1:
            raise ValueError(f"apply_prob must be within [0, 1], got {self.apply_prob}")
        object.__setattr__(self, "border", BorderMode.parse(self.border))


def sample_angle(rng: np.random.Generator, alpha_max: float) -> float:
    """Uniform angle in radians on [-alpha_max, alpha_max] (alpha_max in degrees)."""
    if alpha_max < 0:
        raise ValueError("alpha_max must be non-negative")
    if alpha_max == 0:
        return 0.0
    return math.radians(rng.uniform(-alpha_max, alpha_max))


def conjoint_rotate(sample: Sample, alpha: float,
                    border: BorderMode | str = BorderMode.REPLICATE) -> Sample:
    """Rotate the scene about the vertical camera axis by ``alpha`` radians.

    The image is warped by the pure-rotation homography; the GT map (when
    present) and the visibility mask get the matching planar rotation.
    Intrinsics are unchanged.
    """
    if alpha == 0:
        return replace(sample, image=sample.image.copy())
    H = homography_for_rotation(sample.intrinsics, alpha)
    image = warp_image(sample.image, H, border)
    gt = sample.gt_bev
    spec = gt.spec if gt is not None else DEFAULT_GRID
    if gt is not None:
        gt = BevGrid(rotate_bev_map(gt.values, spec, alpha), spec)
    vis = rotate_bev_map(sample.visibility, spec, alpha)
    return replace(sample, image=image, gt_bev=gt, visibility=vis)


def random_conjoint_rotate(sample: Sample, rng: np.random.Generator,
                           cfg: AugmentConfig) -> tuple[Sample, float | None]:
    """Apply conjoint rotation with probability ``cfg.apply_prob``.

    Returns the (possibly) augmented sample and the angle used, or None.
    Both draws are taken from ``rng`` every time so the stream position
    does not depend on the outcome.
    """
    apply = rng.uniform() < cfg.apply_prob
    alpha = sample_angle(rng, cfg.alpha_max)
    if not apply:
        return sample, None
    return conjoint_rotate(sample, alpha, cfg.border), alpha


def flip_pair(sample: Sample) -> Sample:
    """Horizontally flipped view: image mirrored, principal point mirrored.

    GT and visibility are left as they are; the flipped view only feeds the
    student and its outputs are flipped back before comparison.
    """
    return replace(sample, image=hflip_image(sample.image),
                   intrinsics=hflip_intrinsics(sample.intrinsics))
