import math

import numpy as np
import pytest

from semibev import synthworld as W
from semibev.augment import AugmentConfig, conjoint_rotate, flip_pair, random_conjoint_rotate, sample_angle
from semibev.geometry import BorderMode, hflip_intrinsics
from semibev.seeding import rng_for
from semibev.synthworld import DEFAULT_GRID, DEFAULT_INTRINSICS, WorldParams

K = DEFAULT_INTRINSICS


@pytest.fixture(scope="module")
def scene():
    w = W._sample_world_retrying(21, 0, WorldParams(), DEFAULT_GRID)
    return w, W.make_sample(w, K, DEFAULT_GRID, True, "s")


def test_config_validation():
    assert AugmentConfig() == AugmentConfig(35.0, 0.5, BorderMode.REPLICATE)
    assert AugmentConfig(border="zero").border is BorderMode.ZERO
    for bad in (dict(alpha_max=91), dict(alpha_max=-1), dict(apply_prob=1.5)):
        with pytest.raises(ValueError):
            AugmentConfig(**bad)


def test_zero_angle_leaves_sample_unchanged(scene):
    _, s = scene
    out = conjoint_rotate(s, 0.0)
    assert out.image.tobytes() == s.image.tobytes()
    assert np.array_equal(out.gt_bev.values, s.gt_bev.values)
    assert np.array_equal(out.visibility, s.visibility) and out.intrinsics == s.intrinsics


def test_labeled_rotation_matches_the_geometry(scene):
    # a rendered rotated world is the reference: warped image and rotated GT
    # must agree with it where both are well defined
    w, s = scene
    alpha = math.radians(12)
    out = conjoint_rotate(s, alpha)
    assert out.intrinsics == K
    spec = DEFAULT_GRID
    ids = 1 + np.arange(spec.nz * spec.nx).reshape(spec.nz, spec.nx)
    from semibev.geometry import bev_rotation, rotate_bev_map
    moved = rotate_bev_map(ids, spec, alpha)
    x, z = spec.cell_centers()
    checked = 0
    for r in range(0, spec.nz, 3):
        for c in range(0, spec.nx, 3):
            src = moved[r, c] - 1
            if src < 0:
                continue
            sr, sc = divmod(src, spec.nx)
            assert np.array_equal(out.gt_bev.values[:, r, c], s.gt_bev.values[:, sr, sc])
            # and the source cell really is where H2 came from
            back = bev_rotation(alpha).T @ [x[r, c], z[r, c]]
            assert spec.cell_of(*back) == (sr, sc)
            checked += 1
    assert checked > 100


def test_rotated_image_matches_rendering_of_rotated_ground(scene):
    # ground-only world: rotating the world by R_y is exactly what H1 does to the image
    w, s = scene
    ground = W.World([o for o in w.objects if o.height == 0], w.ground_albedo)
    alpha = math.radians(8)
    base = W.make_sample(ground, K, DEFAULT_GRID, True)
    warped = conjoint_rotate(base, alpha, BorderMode.ZERO).image
    c, sn = math.cos(alpha), math.sin(alpha)
    rotated = W.World([o.__class__(o.class_id, c * o.x - sn * o.z, sn * o.x + c * o.z, o.width, o.length,
                                   o.yaw - alpha, o.height, o.albedo) for o in ground.objects], ground.ground_albedo)
    ref = W.render_fv(rotated, K)
    # compare on the lower half, away from the horizon and label edges
    diff = np.abs(warped[:, 70:, 20:-20] - ref[:, 70:, 20:-20]).max(axis=0)
    assert np.median(diff) < 0.01


def test_unlabeled_rotation_touches_only_image_and_mask(scene):
    _, s = scene
    unl = W.Sample(s.image, s.intrinsics, None, s.visibility, "u")
    out = conjoint_rotate(unl, math.radians(20))
    assert out.gt_bev is None and out.intrinsics == K
    assert not np.array_equal(out.image, s.image)


def test_replicate_keeps_value_range(scene):
    _, s = scene
    out = conjoint_rotate(s, math.radians(35), BorderMode.REPLICATE).image
    lo = s.image.min(axis=(1, 2))[:, None, None]
    hi = s.image.max(axis=(1, 2))[:, None, None]
    assert np.all(out >= lo) and np.all(out <= hi)


def test_sample_angle_statistics():
    assert sample_angle(rng_for(0, "a"), 0.0) == 0.0
    g = rng_for(0, "a")
    draws = np.array([sample_angle(g, 35.0) for _ in range(100_000)])
    bound = math.radians(35)
    assert draws.min() >= -bound and draws.max() <= bound
    sigma = bound / math.sqrt(3) / math.sqrt(len(draws))
    assert abs(draws.mean()) < 3 * sigma
    assert sample_angle(rng_for(4, "a"), 35.0) == sample_angle(rng_for(4, "a"), 35.0)


def test_apply_frequency(scene):
    _, s = scene
    small = W.Sample(s.image[:, :8, :8], s.intrinsics, None, s.visibility[:8, :8], "x")
    cfg = AugmentConfig(apply_prob=0.5, alpha_max=0.0)  # decision only, no warping work
    g = rng_for(0, "freq")
    hits = sum(random_conjoint_rotate(small, g, cfg)[1] is not None for _ in range(10_000))
    sigma = math.sqrt(10_000 * 0.25)
    assert abs(hits - 5000) < 3 * sigma


def test_flip_pair(scene):
    w, s = scene
    f = flip_pair(s)
    assert f.intrinsics.cx == (K.width - 1) - K.cx
    ff = flip_pair(f)
    assert ff.image.tobytes() == s.image.tobytes() and ff.intrinsics == s.intrinsics
    assert f.gt_bev is s.gt_bev and f.visibility is s.visibility
    mirrored = W.render_fv(w.mirrored(), hflip_intrinsics(K))
    assert f.image.tobytes() == mirrored.tobytes()
