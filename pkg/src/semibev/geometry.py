"""Camera and BEV geometry.

Conventions used throughout the package:

* Camera frame: +x right, +y down, +z forward. The ground plane is
  ``y = camera_height``.
* Pixels: (u, v) = (column, row); pixel (u, v) covers
  ``[u-0.5, u+0.5] x [v-0.5, v+0.5]``.
* BEV grids are C×Z×X. Row ``i`` has metric depth
  ``z_min + cell*(i+0.5)`` (row 0 nearest the camera), column ``j`` has
  ``x_min + cell*(j+0.5)``. The camera's ground point is metric (0, 0).
* A rotation angle ``alpha`` turns the ground plane counter-clockwise when
  seen from above, i.e. metric (x, z) goes to ``bev_rotation(alpha) @ (x, z)``.
  :func:`rotation_y` is built so that its action on (x, z) is exactly that
  matrix, which is what keeps the image warp and the BEV warp in agreement.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]),
                   int(width), int(height))

    def key(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class BorderMode(enum.Enum):
    REPLICATE = "replicate"
    ZERO = "zero"
    REFLECT = "reflect"

    @classmethod
    def parse(cls, value) -> "BorderMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown border mode {value!r}; "
                             f"expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class BevGridSpec:
    """Metric layout of a BEV grid (no values)."""

    cell_size: float = 0.25
    z_min: float = 1.0
    z_max: float = 17.0
    x_min: float = -8.0
    x_max: float = 8.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for lo, hi in ((self.z_min, self.z_max), (self.x_min, self.x_max)):
            n = (hi - lo) / self.cell_size
            if hi <= lo or abs(n - round(n)) > 1e-9:
                raise ValueError(f"extent [{lo}, {hi}] is not a whole number of cells")

    @property
    def nz(self) -> int:
        return int(round((self.z_max - self.z_min) / self.cell_size))

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_size))

    def z_centers(self) -> np.ndarray:
        return self.z_min + self.cell_size * (np.arange(self.nz) + 0.5)

    def x_centers(self) -> np.ndarray:
        return self.x_min + self.cell_size * (np.arange(self.nx) + 0.5)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, z) of every cell, each shaped (Z, X)."""
        z, x = np.meshgrid(self.z_centers(), self.x_centers(), indexing="ij")
        return x, z

    def cell_of(self, x, z):
        """Row/column index containing metric (x, z); may fall outside the grid."""
        row = np.floor((np.asarray(z) - self.z_min) / self.cell_size).astype(int)
        col = np.floor((np.asarray(x) - self.x_min) / self.cell_size).astype(int)
        return row, col


@dataclass
class BevGrid:
    """C×Z×X values on a metric grid."""

    values: np.ndarray
    spec: BevGridSpec = BevGridSpec()

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape[-2:] != (self.spec.nz, self.spec.nx):
            raise ValueError(f"grid values {self.values.shape} do not match "
                             f"spec {self.spec.nz}x{self.spec.nx}")

    @property
    def cell_size(self) -> float:
        return self.spec.cell_size


# ---------------------------------------------------------------- rotations

def rotation_y(alpha: float) -> np.ndarray:
    """3×3 rotation about the vertical camera axis.

    Acting on (x, z) it equals :func:`bev_rotation`; rotation_y(pi/2)
    sends (0, 0, 1) to (-1, 0, 0).
    """
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, 0.0, -s],
                     [0.0, 1.0, 0.0],
                     [s, 0.0, c]])


def bev_rotation(alpha: float) -> np.ndarray:
    """2×2 planar rotation of metric (x, z) by ``alpha``."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s],
                     [s, c]])


def homography_for_rotation(K: CameraIntrinsics, alpha: float) -> np.ndarray:
    """Pixel homography K·R·K⁻¹ induced by rotating the scene by ``alpha``."""
    return K.as_matrix() @ rotation_y(alpha) @ K.inverse_matrix()


# --------------------------------------------------------------- projection

def project(K: CameraIntrinsics, p) -> tuple[float, float]:
    x, y, z = (float(c) for c in p)
    if z <= 0:
        raise ValueError(f"point {tuple(p)} is behind the camera (z={z})")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy


def project_points(K: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`project` over an (N, 3) array; returns (N, 2)."""
    pts = np.asarray(pts, dtype=float)
    if np.any(pts[:, 2] <= 0):
        raise ValueError("some points are behind the camera")
    return np.stack([K.fx * pts[:, 0] / pts[:, 2] + K.cx,
                     K.fy * pts[:, 1] / pts[:, 2] + K.cy], axis=1)


def apply_homography(H, u, v, tol: float = 1e-12):
    """Map pixel coordinates through H with the projective division.

    Works on scalars or arrays. Raises if any denominator is within ``tol``
    of zero (the point maps to infinity).
    """
    H = np.asarray(H, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    den = H[2, 0] * u + H[2, 1] * v + H[2, 2]
    if np.any(np.abs(den) <= tol):
        raise ValueError("homography maps a point to infinity")
    u2 = (H[0, 0] * u + H[0, 1] * v + H[0, 2]) / den
    v2 = (H[1, 0] * u + H[1, 1] * v + H[1, 2]) / den
    if u2.ndim == 0:
        return float(u2), float(v2)
    return u2, v2


# ------------------------------------------------------------------ warping

def _border_index(idx: np.ndarray, n: int, border: BorderMode) -> tuple[np.ndarray, np.ndarray]:
    """Resolve integer sample indices; returns (valid index, in-range mask)."""
    inside = (idx >= 0) & (idx < n)
    if border is BorderMode.REFLECT and n > 1:
        period = 2 * (n - 1)
        m = np.mod(idx, period)
        idx = np.where(m >= n, period - m, m)
    else:
        idx = np.clip(idx, 0, n - 1)
    return idx, inside


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray,
                    border: BorderMode = BorderMode.REPLICATE) -> np.ndarray:
    """Bilinear lookup of C×H×W ``img`` at float pixel coordinates (x, y)."""
    _, h, w = img.shape
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xa_in = _border_index(x0, w, border)
    xb, xb_in = _border_index(x0 + 1, w, border)
    ya, ya_in = _border_index(y0, h, border)
    yb, yb_in = _border_index(y0 + 1, h, border)

    def tap(yi, xi, ok):
        val = img[:, yi, xi]
        if border is BorderMode.ZERO:
            val = val * ok
        return val

    taps = (tap(ya, xa, ya_in & xa_in), tap(ya, xb, ya_in & xb_in),
            tap(yb, xa, yb_in & xa_in), tap(yb, xb, yb_in & xb_in))
    out = (taps[0] * ((1 - fx) * (1 - fy)) + taps[1] * (fx * (1 - fy))
           + taps[2] * ((1 - fx) * fy) + taps[3] * (fx * fy))
    # the weights sum to one only up to rounding; keep results inside the taps' hull
    lo = np.minimum(np.minimum(taps[0], taps[1]), np.minimum(taps[2], taps[3]))
    hi = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
    return np.clip(out, lo, hi)


def warp_image(img: np.ndarray, H, border: BorderMode | str = BorderMode.REPLICATE) -> np.ndarray:
    """Warp a C×H×W image forward by homography H.

    Each output pixel q takes the bilinear sample at H⁻¹(q), so the result
    has no holes. Samples whose neighbours fall outside the source follow
    ``border``: ZERO contributes 0, REPLICATE clamps to the edge, REFLECT
    mirrors about the edge pixel without repeating it.
    """
    border = BorderMode.parse(border)
    img = np.asarray(img, dtype=float)
    H = np.asarray(H, dtype=float)
    if abs(np.linalg.det(H)) <= 1e-12:
        raise ValueError("homography is singular")
    if np.array_equal(H, np.eye(3)):
        return img.copy()
    _, h, w = img.shape
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    su, sv = apply_homography(np.linalg.inv(H), uu, vv)
    return sample_bilinear(img, su, sv, border)


def rotate_bev_map(values: np.ndarray, spec: BevGridSpec, alpha: float) -> np.ndarray:
    """Rotate a (C×)Z×X map about the camera ground point by ``alpha``.

    Inverse warp with nearest-neighbour sampling; cells whose preimage leaves
    the grid become 0.
    """
    values = np.asarray(values)
    if alpha == 0:
        return values.copy()
    x, z = spec.cell_centers()
    inv = bev_rotation(alpha).T
    sx = inv[0, 0] * x + inv[0, 1] * z
    sz = inv[1, 0] * x + inv[1, 1] * z
    row, col = spec.cell_of(sx, sz)
    ok = (row >= 0) & (row < spec.nz) & (col >= 0) & (col < spec.nx)
    row = np.clip(row, 0, spec.nz - 1)
    col = np.clip(col, 0, spec.nx - 1)
    out = values[..., row, col]
    return np.where(ok, out, np.zeros((), dtype=values.dtype))


# -------------------------------------------------------------------- flips

def hflip_image(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[..., ::-1])


def hflip_bev(values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values)[..., ::-1])


def hflip_intrinsics(K: CameraIntrinsics) -> CameraIntrinsics:
    return replace(K, cx=(K.width - 1) - K.cx)
