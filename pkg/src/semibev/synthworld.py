"""Synthetic street scenes: world sampling, front-view raycasting, BEV labels.

A world is a handful of rectangles on the ground plane (roads, walkways)
plus boxes standing on it (cars, pedestrians). The camera sits at the
origin, ``camera_height`` metres above the ground, looking along +z.

All geometric tests are written so that mirroring the world about x=0 and
flipping the principal point gives bit-identical mirrored outputs. Keep
that in mind before "simplifying" any of the arithmetic below.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import BevGrid, BevGridSpec, CameraIntrinsics
from .seeding import rng_for

DRIVABLE, WALKWAY, CAR, PEDESTRIAN = range(4)
CLASS_NAMES = ("drivable", "walkway", "car", "pedestrian")
NUM_CLASSES = len(CLASS_NAMES)

SKY = np.array([0.62, 0.76, 0.95])
OCCLUSION_HEIGHT = 0.5


@dataclass(frozen=True)
class WorldObject:
    class_id: int
    x: float
    z: float
    width: float  # extent along the object's local x
    length: float  # extent along the object's local z
    yaw: float = 0.0
    height: float = 0.0
    albedo: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.width <= 0 or self.length <= 0:
            raise ValueError("footprint must have positive area")
        if self.class_id in (DRIVABLE, WALKWAY) and self.height != 0:
            raise ValueError("ground classes have zero height")
        if self.class_id in (CAR, PEDESTRIAN) and self.height <= 0:
            raise ValueError("object classes need a positive height")

    def to_local(self, x, z):
        """Metric (x, z) into the footprint frame (centred, unrotated)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = x - self.x
        dz = z - self.z
        return c * dx + s * dz, c * dz - s * dx

    def contains(self, x, z):
        lx, lz = self.to_local(x, z)
        return (np.abs(lx) <= 0.5 * self.width) & (np.abs(lz) <= 0.5 * self.length)

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hw, hl = 0.5 * self.width, 0.5 * self.length
        local = np.array([[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]])
        # inverse of to_local
        return np.stack([self.x + c * local[:, 0] - s * local[:, 1],
                         self.z + s * local[:, 0] + c * local[:, 1]], axis=1)

    def mirrored(self) -> "WorldObject":
        return replace(self, x=-self.x, yaw=-self.yaw)


@dataclass
class World:
    objects: list = field(default_factory=list)
    ground_albedo: tuple = (0.32, 0.45, 0.26)
    seed: int | None = None

    def of_class(self, class_id: int) -> list:
        return [o for o in self.objects if o.class_id == class_id]

    def mirrored(self) -> "World":
        return World([o.mirrored() for o in self.objects], self.ground_albedo, self.seed)


@dataclass(frozen=True)
class WorldParams:
    """Ranges for world sampling. Counts are inclusive [min, max]."""

    road_width: tuple = (5.0, 9.0)
    road_offset: tuple = (-3.5, 3.5)
    road_yaw: tuple = (-0.35, 0.35)
    road_length: float = 80.0
    cross_road_prob: float = 0.4
    cross_road_z: tuple = (6.0, 14.0)
    walkway_width: tuple = (1.5, 2.5)
    walkway_prob: float = 0.85
    cars: tuple = (1, 4)
    pedestrians: tuple = (0, 3)
    car_size: tuple = (1.8, 4.2)
    pedestrian_size: tuple = (0.7, 0.7)
    car_height: tuple = (1.4, 1.8)
    pedestrian_height: tuple = (1.6, 1.9)
    min_object_z: float = 3.0
    max_tries: int = 200


@dataclass
class Sample:
    image: np.ndarray  # 3×H×W in [0, 1]
    intrinsics: CameraIntrinsics
    gt_bev: BevGrid | None
    visibility: np.ndarray  # Z×X, {0, 1}
    id: str = ""

    @property
    def labeled(self) -> bool:
        return self.gt_bev is not None


DEFAULT_INTRINSICS = CameraIntrinsics(fx=100.0, fy=100.0, cx=63.5, cy=47.5, width=128, height=96)
DEFAULT_GRID = BevGridSpec()
DEFAULT_CAMERA_HEIGHT = 1.5


# ----------------------------------------------------------------- sampling

def _jitter(rng, base, amount=0.06):
    return tuple(float(np.clip(b + rng.uniform(-amount, amount), 0.0, 1.0)) for b in base)


def _overlaps(a: WorldObject, b: WorldObject, margin: float = 0.3) -> bool:
    """Separating-axis test for two footprints grown by ``margin``."""
    ca, cb = a.corners(), b.corners()
    for obj in (a, b):
        c, s = math.cos(obj.yaw), math.sin(obj.yaw)
        for axis in ((c, s), (-s, c)):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
                return False
    return True


def _separated(obj: WorldObject, placed: list) -> bool:
    return not any(_overlaps(obj, o) for o in placed)


def sample_world(rng: np.random.Generator, params: WorldParams = WorldParams(),
                 grid: BevGridSpec = DEFAULT_GRID) -> World:
    """Draw a random street scene. Deterministic given the generator state."""
    p = params
    objects: list[WorldObject] = []
    roads = []

    yaw = rng.uniform(*p.road_yaw)
    width = rng.uniform(*p.road_width)
    offset = rng.uniform(*p.road_offset)
    # the road axis passes through (offset, z_mid)
    z_mid = 0.5 * (grid.z_min + grid.z_max)
    road = WorldObject(DRIVABLE, offset, z_mid, width, p.road_length, yaw,
                       albedo=_jitter(rng, (0.36, 0.36, 0.39), 0.04))
    roads.append(road)
    if rng.uniform() < p.cross_road_prob:
        roads.append(WorldObject(DRIVABLE, offset, rng.uniform(*p.cross_road_z),
                                 p.road_length, rng.uniform(*p.road_width) * 0.8,
                                 yaw + rng.uniform(-0.2, 0.2),
                                 albedo=road.albedo))
    objects.extend(roads)

    c, s = math.cos(yaw), math.sin(yaw)
    walk_albedo = _jitter(rng, (0.72, 0.64, 0.52))
    for side in (-1.0, 1.0):
        if rng.uniform() >= p.walkway_prob:
            continue
        ww = rng.uniform(*p.walkway_width)
        # local lateral offset; overlaps the road edge by a quarter metre
        lat = side * (0.5 * width + 0.5 * ww - 0.25)
        objects.append(WorldObject(WALKWAY, offset + c * lat, z_mid + s * lat,
                                   ww, p.road_length, yaw, albedo=walk_albedo))

    placed: list[WorldObject] = []

    def place(class_id, size, height_range, albedo_fn, count):
        for _ in range(count):
            for _attempt in range(p.max_tries):
                rd = roads[rng.integers(len(roads))]
                lx = rng.uniform(-0.5, 0.5) * max(rd.width - size[0], 0.1)
                lz = rng.uniform(-0.5, 0.5) * min(rd.length, grid.z_max - grid.z_min + 4.0)
                rc, rs = math.cos(rd.yaw), math.sin(rd.yaw)
                x = rd.x + rc * lx - rs * lz
                z = rd.z + rs * lx + rc * lz
                if not (grid.x_min < x < grid.x_max and p.min_object_z < z < grid.z_max):
                    continue
                obj = WorldObject(class_id, x, z, size[0], size[1],
                                  rd.yaw + rng.uniform(-0.15, 0.15),
                                  rng.uniform(*height_range), albedo_fn())
                if _separated(obj, placed):
                    placed.append(obj)
                    break
            else:
                raise RuntimeError(f"rejection budget exhausted placing class {class_id}")

    n_cars = rng.integers(p.cars[0], p.cars[1] + 1)
    n_peds = rng.integers(p.pedestrians[0], p.pedestrians[1] + 1)
    place(CAR, p.car_size, p.car_height,
          lambda: tuple(float(v) for v in rng.uniform(0.15, 0.95, size=3)), n_cars)
    place(PEDESTRIAN, p.pedestrian_size, p.pedestrian_height,
          lambda: _jitter(rng, (0.92, 0.28, 0.18), 0.08), n_peds)
    objects.extend(placed)

    return World(objects, _jitter(rng, (0.32, 0.45, 0.26), 0.04), None)


# ---------------------------------------------------------------- rendering

def _slab(o, d, half):
    """Entry/exit ray parameters for |o + t*d| <= half, elementwise."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = d == 0
    if np.any(parallel):
        inside = np.abs(o) <= half
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    return lo, hi


def pixel_rays(K: CameraIntrinsics):
    """Unnormalized ray directions (dx, dy, 1) for every pixel, each H×W."""
    v, u = np.meshgrid(np.arange(K.height, dtype=float), np.arange(K.width, dtype=float),
                       indexing="ij")
    return (u - K.cx) / K.fx, (v - K.cy) / K.fy


def render_fv(world: World, K: CameraIntrinsics = DEFAULT_INTRINSICS,
              camera_height: float = DEFAULT_CAMERA_HEIGHT, max_range: float = 80.0) -> np.ndarray:
    """Raycast the world into a 3×H×W float image in [0, 1]."""
    dx, dy = pixel_rays(K)
    dz = np.ones_like(dx)
    norm = np.sqrt(dx * dx + dy * dy + 1.0)

    # ground plane
    with np.errstate(divide="ignore"):
        t_ground = np.where(dy > 0, camera_height / dy, np.inf)
    t_ground = np.where(t_ground * norm <= max_range, t_ground, np.inf)
    ground = np.isfinite(t_ground)
    gx = np.where(ground, t_ground * dx, 0.0)
    gz = np.where(ground, t_ground * dz, 0.0)
    color = np.broadcast_to(np.asarray(world.ground_albedo, float)[:, None, None],
                            (3,) + dx.shape).copy()
    for cls in (DRIVABLE, WALKWAY):
        for obj in world.of_class(cls):
            hit = obj.contains(gx, gz) & ground
            color[:, hit] = np.asarray(obj.albedo, float)[:, None]

    best_t = t_ground.copy()
    for obj in world.objects:
        if obj.height <= 0:
            continue
        # ray origin is the camera (0, 0); move into the footprint frame
        ox, oz = obj.to_local(0.0, 0.0)
        c, s = math.cos(obj.yaw), math.sin(obj.yaw)
        ddx = c * dx + s * dz
        ddz = c * dz - s * dx
        lo_x, hi_x = _slab(ox, ddx, 0.5 * obj.width)
        lo_z, hi_z = _slab(oz, ddz, 0.5 * obj.length)
        half_h = 0.5 * obj.height
        lo_y, hi_y = _slab(-(camera_height - half_h), dy, half_h)
        t_in = np.maximum(np.maximum(lo_x, lo_z), lo_y)
        t_out = np.minimum(np.minimum(hi_x, hi_z), hi_y)
        hit = (t_in <= t_out) & (t_in > 0) & (t_in < best_t)
        if not np.any(hit):
            continue
        # top faces brightest, side faces darker
        shade = np.where(t_in == lo_y, 1.0, np.where(t_in == lo_x, 0.72, 0.86))
        albedo = np.asarray(obj.albedo, float)[:, None, None]
        color = np.where(hit[None], albedo * shade[None], color)
        best_t = np.where(hit, t_in, best_t)

    rng_dist = best_t * norm
    lit = color / (1.0 + 0.05 * rng_dist)[None]
    sky = np.broadcast_to(SKY[:, None, None], lit.shape)
    return np.where(np.isfinite(best_t)[None], lit, sky)


# ------------------------------------------------------------- BEV targets

def rasterize_bev(world: World, grid: BevGridSpec = DEFAULT_GRID) -> BevGrid:
    """Binary C×Z×X map; a cell is set when its centre lies in a footprint."""
    x, z = grid.cell_centers()
    values = np.zeros((NUM_CLASSES, grid.nz, grid.nx), dtype=np.uint8)
    for obj in world.objects:
        values[obj.class_id] |= obj.contains(x, z).astype(np.uint8)
    return BevGrid(values, grid)


def _segment_hits(obj: WorldObject, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Does the segment from (0, 0) to each (x, z) cross the footprint?"""
    ox, oz = obj.to_local(0.0, 0.0)
    ex, ez = obj.to_local(x, z)
    lo_x, hi_x = _slab(ox, ex - ox, 0.5 * obj.width)
    lo_z, hi_z = _slab(oz, ez - oz, 0.5 * obj.length)
    t_in = np.maximum(np.maximum(lo_x, lo_z), 0.0)
    t_out = np.minimum(np.minimum(hi_x, hi_z), 1.0)
    return t_in <= t_out


def fov_mask(K: CameraIntrinsics, grid: BevGridSpec = DEFAULT_GRID) -> np.ndarray:
    """Cells whose centre projects inside the image's horizontal extent."""
    x, z = grid.cell_centers()
    # compare slopes rather than pixel columns so mirroring stays exact
    left = (-0.5 - K.cx) / K.fx
    right = (K.width - 0.5 - K.cx) / K.fx
    slope = x / z
    return ((slope >= left) & (slope <= right)).astype(np.uint8)


def visibility_mask(world: World, K: CameraIntrinsics = DEFAULT_INTRINSICS,
                    grid: BevGridSpec = DEFAULT_GRID,
                    occlusion_height: float = OCCLUSION_HEIGHT) -> np.ndarray:
    """FOV wedge minus the shadows cast by tall objects (Z×X, uint8).

    Cells inside an occluder's own footprint stay visible; cells whose
    sight line from the camera crosses a footprint they are not part of do not.
    """
    x, z = grid.cell_centers()
    visible = fov_mask(K, grid).astype(bool)
    for obj in world.objects:
        if obj.height < occlusion_height:
            continue
        shadow = _segment_hits(obj, x, z) & ~obj.contains(x, z)
        visible &= ~shadow
    return visible.astype(np.uint8)


def make_sample(world: World, K: CameraIntrinsics = DEFAULT_INTRINSICS,
                grid: BevGridSpec = DEFAULT_GRID, labeled: bool = True, sample_id: str = "",
                camera_height: float = DEFAULT_CAMERA_HEIGHT) -> Sample:
    image = render_fv(world, K, camera_height)
    gt = rasterize_bev(world, grid) if labeled else None
    return Sample(image, K, gt, visibility_mask(world, K, grid), sample_id)


# ------------------------------------------------------------------ on disk

def write_ppm(path, image: np.ndarray) -> None:
    """Write a 3×H×W float image in [0, 1] (or uint8) as binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a 3×H×W uint8 array."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    vals = " ".join(repr(float(v)) for v in K.as_matrix().reshape(-1))
    Path(path).write_text(f"{vals} {K.width} {K.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    parts = Path(path).read_text().split()
    if len(parts) != 11:
        raise ValueError(f"{path}: expected 9 matrix entries plus width and height")
    K = np.array([float(p) for p in parts[:9]]).reshape(3, 3)
    return CameraIntrinsics.from_matrix(K, int(parts[9]), int(parts[10]))


def write_bev(path, grid: BevGrid) -> None:
    c, nz, nx = grid.values.shape
    with open(path, "wb") as f:
        f.write(f"{c} {nz} {nx} {grid.cell_size!r}\n".encode("ascii"))
        f.write(np.asarray(grid.values, dtype=np.uint8).tobytes())


def read_bev(path, spec: BevGridSpec = DEFAULT_GRID) -> BevGrid:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    c, nz, nx, cell = raw[:nl].decode("ascii").split()
    c, nz, nx = int(c), int(nz), int(nx)
    if float(cell) != spec.cell_size:
        spec = replace(spec, cell_size=float(cell))
    values = np.frombuffer(raw, dtype=np.uint8, count=c * nz * nx, offset=nl + 1)
    return BevGrid(values.reshape(c, nz, nx).copy(), spec)


def write_mask(path, mask: np.ndarray) -> None:
    nz, nx = mask.shape
    with open(path, "wb") as f:
        f.write(f"{nz} {nx}\n".encode("ascii"))
        f.write(np.asarray(mask, dtype=np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    nz, nx = (int(t) for t in raw[:nl].split())
    return np.frombuffer(raw, dtype=np.uint8, count=nz * nx, offset=nl + 1).reshape(nz, nx).copy()


def save_sample(sample: Sample, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "image.ppm", sample.image)
    write_intrinsics(d / "intrinsics.txt", sample.intrinsics)
    if sample.gt_bev is not None:
        write_bev(d / "bev.bin", sample.gt_bev)
    write_mask(d / "visibility.bin", sample.visibility)


def load_sample(directory, grid: BevGridSpec = DEFAULT_GRID, with_labels: bool = True) -> Sample:
    d = Path(directory)
    image = read_ppm(d / "image.ppm").astype(np.float64) / 255.0
    K = read_intrinsics(d / "intrinsics.txt")
    bev_path = d / "bev.bin"
    gt = read_bev(bev_path, grid) if with_labels and bev_path.exists() else None
    return Sample(image, K, gt, read_mask(d / "visibility.bin"), d.name)


def n_labeled(n: int, labeled_fraction: float) -> int:
    """Size of the labeled prefix: floor(n·fraction), but never zero.

    Floor reproduces the worked 512 × 0.1 → 51 split; the product is
    rounded first so float fuzz (0.29·100 = 28.999...) cannot drop a sample.
    """
    return max(1, int(math.floor(round(n * labeled_fraction, 9))))


def _sample_world_retrying(seed: int, i: int, params: WorldParams, grid: BevGridSpec,
                           attempts: int = 20) -> World:
    # a crowded draw can exhaust the placement budget; redraw on a fresh stream
    for attempt in range(attempts):
        try:
            world = sample_world(rng_for(seed, "world", i, attempt), params, grid)
        except RuntimeError:
            continue
        world.seed = seed
        return world
    raise RuntimeError(f"could not sample world {i} in {attempts} attempts")


def gen_dataset(n: int, labeled_fraction: float, seed: int, out_dir,
                params: WorldParams = WorldParams(), K: CameraIntrinsics = DEFAULT_INTRINSICS,
                grid: BevGridSpec = DEFAULT_GRID,
                camera_height: float = DEFAULT_CAMERA_HEIGHT) -> list[tuple[str, str]]:
    """Generate ``n`` samples under ``out_dir``; the first ``n_labeled(n, fraction)`` are labeled.

    Returns the manifest rows (id, split), also written to ``manifest.tsv``.
    """
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if n <= 0:
        raise ValueError("n must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    n_lab = n_labeled(n, labeled_fraction)
    rows = []
    for i in range(n):
        sid = f"{i:06d}"
        world = _sample_world_retrying(seed, i, params, grid)
        labeled = i < n_lab
        sample = make_sample(world, K, grid, labeled, sid, camera_height)
        save_sample(sample, out / sid)
        rows.append((sid, "labeled" if labeled else "unlabeled"))
    with open(out / "manifest.tsv", "w") as f:
        f.write("id\tsplit\n")
        for sid, split in rows:
            f.write(f"{sid}\t{split}\n")
    return rows


def read_manifest(root) -> list[tuple[str, str]]:
    lines = Path(root, "manifest.tsv").read_text().splitlines()
    if not lines or lines[0].split("\t") != ["id", "split"]:
        raise ValueError(f"{root}: malformed manifest.tsv")
    return [tuple(line.split("\t")) for line in lines[1:] if line]


def load_dataset(root, grid: BevGridSpec = DEFAULT_GRID, split: str | None = None,
                 with_labels: bool = True) -> list[Sample]:
    rows = read_manifest(root)
    return [load_sample(Path(root) / sid, grid, with_labels)
            for sid, sp in rows if split is None or sp == split]
