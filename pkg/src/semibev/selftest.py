"""Release-gate checks runnable without pytest (``semibev self-test``).

Three suites: the geometry conjoint-consistency oracle, finite-difference
gradient checks, and the EMA recursion. Each raises CheckFailed with a message
on its first failing assertion.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from typing import Callable

import numpy as np

from . import geometry
from . import tensor as T
from .geometry import BevGridSpec, CameraIntrinsics


class CheckFailed(AssertionError):
    pass


# ---------------------------------------------------------- finite differences

def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_mismatch(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> float:
    """Largest violation ratio of |a-n| <= max(rtol*|n|, atol); <= 1 means pass."""
    err = np.abs(analytic - numeric)
    allowed = np.maximum(rtol * np.abs(numeric), atol)
    return float(np.max(err / allowed)) if err.size else 0.0


def check_op_gradients(build: Callable[..., T.Tensor], inputs: list[np.ndarray],
                       rtol: float = 1e-4, atol: float = 1e-7, h: float = 1e-5) -> float:
    """Compare autodiff and central differences for ``sum(build(*inputs) * probe)``.

    A fixed random probe weights the output so every element matters.
    Returns the worst violation ratio over all inputs.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in inputs]
    out = build(*tensors)
    probe = np.random.default_rng(1234).uniform(0.5, 1.5, size=out.shape)

    def scalar(ts):
        return T.sum(T.mul(build(*ts), T.Tensor(probe)))

    loss = scalar(tensors)
    grads = T.backward(loss, tensors)
    worst = 0.0
    for k, arr in enumerate(inputs):
        data = tensors[k].data

        def f():
            with T.no_grad():
                plain = [T.Tensor(t.data) for t in tensors]
                return scalar(plain).item()

        num = numerical_grad(f, data, h)
        worst = max(worst, grad_mismatch(grads[k], num, rtol, atol))
    return worst


# ------------------------------------------------------------------ suites

def _assert(cond: bool, msg: str) -> None:
    if not cond:
        raise CheckFailed(msg)


def geometry_oracle(n_points: int = 200, n_angles: int = 50, seed: int = 0,
                    K: CameraIntrinsics | None = None, grid: BevGridSpec | None = None,
                    camera_height: float = 1.5) -> dict:
    """Conjoint-consistency: image homography and BEV rotation agree with 3D rotation.

    For ground points p in view and angles in [-35°, 35°]:
      (a) H1(α) applied to pixel(p) equals pixel(R_y(α) p) within 1e-9 px;
      (b) the cell of H2(α) p in the rotated BEV map holds the content of
          p's cell, within one cell.
    """
    from .synthworld import DEFAULT_GRID, DEFAULT_INTRINSICS

    K = K or DEFAULT_INTRINSICS
    grid = grid or DEFAULT_GRID
    rng = np.random.default_rng(seed)
    angles = np.radians(rng.uniform(-35.0, 35.0, size=n_angles))

    # ground points well inside the FOV and the grid so rotations stay in view
    pts = []
    while len(pts) < n_points:
        z = rng.uniform(4.0, 14.0)
        x = rng.uniform(-0.3, 0.3) * z
        pts.append((x, camera_height, z))
    pts = np.array(pts)

    ids = 1 + np.arange(grid.nz * grid.nx).reshape(grid.nz, grid.nx)
    worst_px = 0.0
    worst_cell = 0
    checked = 0
    for alpha in angles:
        H1 = geometry.homography_for_rotation(K, alpha)
        R = geometry.rotation_y(alpha)
        H2 = geometry.bev_rotation(alpha)
        rotated = pts @ R.T
        # the 3D rotation restricted to the ground plane must be H2
        ground = pts[:, [0, 2]] @ H2.T
        _assert(np.allclose(rotated[:, [0, 2]], ground, atol=1e-12, rtol=0),
                f"rotation_y and bev_rotation disagree at alpha={alpha:.4f}")
        for p, q in zip(pts, rotated):
            if q[2] <= 0.5:
                continue
            u1, v1 = geometry.project(K, p)
            u2, v2 = geometry.project(K, q)
            hu, hv = geometry.apply_homography(H1, u1, v1)
            worst_px = max(worst_px, abs(hu - u2), abs(hv - v2))

        # BEV transport: rotate a map of cell ids, then read it where H2 sends p
        moved = geometry.rotate_bev_map(ids, grid, alpha)
        rows, cols = grid.cell_of(pts[:, 0], pts[:, 2])
        trows, tcols = grid.cell_of(*(H2 @ pts[:, [0, 2]].T))
        inside = (trows >= 0) & (trows < grid.nz) & (tcols >= 0) & (tcols < grid.nx)
        got = moved[trows[inside], tcols[inside]] - 1
        _assert(np.all(got >= 0), f"BEV cell vanished under rotation alpha={alpha:.4f}")
        dist = np.maximum(np.abs(got // grid.nx - rows[inside]), np.abs(got % grid.nx - cols[inside]))
        if dist.size:
            worst_cell = max(worst_cell, int(dist.max()))
        checked += int(inside.sum())

    _assert(worst_px < 1e-9, f"FV homography off by {worst_px:.3e} px")
    _assert(worst_cell <= 1, f"BEV rotation off by {worst_cell} cells")
    _assert(checked > 0, "no BEV cells checked")
    return {"max_px_error": worst_px, "max_cell_error": worst_cell, "bev_checks": checked}


def gradient_suite(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)

    def r(*shape):
        a = rng.uniform(-2, 2, size=shape)
        # keep clear of the relu kink
        return np.where(np.abs(a) < 1e-3, 0.1, a)

    cases = {
        "add": (lambda a, b: T.add(a, b), [r(3, 4), r(3, 4)]),
        "sub": (lambda a, b: T.sub(a, b), [r(3, 4), r(3, 4)]),
        "mul": (lambda a, b: T.mul(a, b), [r(3, 4), r(3, 4)]),
        "div": (lambda a, b: T.div(a, b), [r(3, 4), rng.uniform(0.5, 2.0, size=(3, 4))]),
        "matmul": (lambda a, b: T.matmul(a, b), [r(3, 4), r(4, 2)]),
        "sigmoid": (lambda a: T.sigmoid(a), [r(5, 3)]),
        "relu": (lambda a: T.relu(a), [r(5, 3)]),
        "sum_axis": (lambda a: T.sum(a, 1), [r(3, 4, 2)]),
        "mean": (lambda a: T.mean(a, (0, 2)), [r(3, 4, 2)]),
        "conv2d": (lambda x, k: T.conv2d(x, k, padding=1), [r(2, 8, 8), r(4, 2, 3, 3)]),
        "conv2d_stride": (lambda x, k, b: T.conv2d(x, k, b, stride=2, padding=(1, 0, 1, 0)),
                          [r(2, 2, 8, 8), r(3, 2, 3, 3), r(3)]),
        "flip": (lambda a: T.flip(a, 1), [r(3, 4)]),
        "expand": (lambda a: T.expand_to(a, (3, 4)), [r(1, 4)]),
        "composite": (lambda x, k: T.mean(T.relu(T.conv2d(x, k, padding=1))), [r(2, 6, 6), r(3, 2, 3, 3)]),
    }
    worst = {}
    for name, (fn, arrays) in cases.items():
        ratio = check_op_gradients(fn, arrays)
        _assert(ratio <= 1.0, f"gradient check failed for {name} (violation ratio {ratio:.3g})")
        worst[name] = ratio
    return worst


def ema_suite() -> dict:
    from .model import ModelConfig, ModelParams, ema_update

    cfg = ModelConfig()
    teacher = ModelParams({"w": T.Tensor([0.0])}, cfg)
    student = ModelParams({"w": T.Tensor([1.0])}, cfg)
    ema_update(teacher, student, 0.999)
    first = float(teacher["w"].data[0])
    ema_update(teacher, student, 0.999)
    second = float(teacher["w"].data[0])
    _assert(abs(first - 0.001) < 1e-12, f"EMA step 1 gave {first}")
    _assert(abs(second - 0.001999) < 1e-12, f"EMA step 2 gave {second}")
    return {"step1": first, "step2": second}


@contextmanager
def flipped_bev_rotation():
    """Test hook: swap the sign of the BEV rotation to prove the oracle bites."""
    original = geometry.bev_rotation

    def wrong(alpha):
        return original(-alpha)

    geometry.bev_rotation = wrong
    try:
        yield
    finally:
        geometry.bev_rotation = original


SUITES = {
    "geometry": geometry_oracle,
    "gradients": gradient_suite,
    "ema": ema_suite,
}


def run_all(out=print) -> bool:
    """Run every suite, stopping at the first failure."""
    for name, fn in SUITES.items():
        start = time.perf_counter()
        try:
            fn()
        except CheckFailed as e:
            out(f"FAIL  {name}: {e}")
            return False
        out(f"pass  {name} ({time.perf_counter() - start:.2f} s)")
    return True
