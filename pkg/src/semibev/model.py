"""Toy monocular BEV segmentation network plus Student/Teacher bookkeeping.

Layout::

    image 3×H×W
      -> 3 × (conv3x3 stride 2 + relu)             FV feature  Cf×H/8×W/8
      -> per-column dense layer over (Cf, H/8)      polar       Cf×D×W/8
      -> fixed bilinear polar-to-Cartesian resample BEV feature Cf×Z×X
      -> conv1x1 + relu, conv3x3 + relu, conv1x1, sigmoid       C×Z×X

The resampling weights are computed from K, so flipping the principal
point changes where each BEV cell reads from. They are constant (not
learned) and cached per intrinsics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .geometry import BevGridSpec, CameraIntrinsics
from .tensor import Tensor

# stride-2 convs on even sizes: pad one row/column at the top/left only,
# so feature column j is centred on image column 8*j
_DOWN_PAD = (1, 0, 1, 0)


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 96
    image_width: int = 128
    enc_channels: tuple = (16, 32, 32)
    n_depth: int = 16
    dec_channels: tuple = (16, 16)
    dec_kernels: tuple = (1, 3)
    num_classes: int = 4
    grid: BevGridSpec = field(default_factory=BevGridSpec)

    @property
    def feature_channels(self) -> int:
        return self.enc_channels[-1]

    @property
    def downsample(self) -> int:
        return 2 ** len(self.enc_channels)

    @property
    def feature_size(self) -> tuple[int, int]:
        d = self.downsample
        if self.image_height % d or self.image_width % d:
            raise ValueError(f"image size must be divisible by {d}")
        return self.image_height // d, self.image_width // d


class ModelParams:
    """Ordered name -> Tensor map shared in layout by Student and Teacher."""

    def __init__(self, tensors: dict, config: ModelConfig):
        self.tensors = dict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        out = {}
        for name, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[name] = Tensor(t.data, requires_grad=rg)
        return ModelParams(out, self.config)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def check_compatible(self, other: "ModelParams") -> None:
        if self.names() != other.names():
            raise ValueError("parameter names differ")
        for name in self.tensors:
            if self[name].shape != other[name].shape:
                raise ValueError(f"shape mismatch for {name}: {self[name].shape} vs {other[name].shape}")


@dataclass
class ForwardOutput:
    bev_feature: Tensor  # (N×)Cf×Z×X, the tap point for feature consistency
    segmentation: Tensor  # (N×)C×Z×X, after the sigmoid


# ----------------------------------------------------------------- init

def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) in declaration order."""
    shapes = []
    cin = 3
    for i, cout in enumerate(cfg.enc_channels):
        shapes.append((f"enc{i}.weight", (cout, cin, 3, 3), cin * 9))
        shapes.append((f"enc{i}.bias", (cout,), cin * 9))
        cin = cout
    cf = cfg.feature_channels
    hf, _ = cfg.feature_size
    shapes.append(("vt.weight", (cf * hf, cf * cfg.n_depth), cf * hf))
    shapes.append(("vt.bias", (1, cf * cfg.n_depth), cf * hf))
    cin = cf
    for i, (cout, k) in enumerate(zip(cfg.dec_channels, cfg.dec_kernels)):
        shapes.append((f"dec{i}.weight", (cout, cin, k, k), cin * k * k))
        shapes.append((f"dec{i}.bias", (cout,), cin * k * k))
        cin = cout
    shapes.append(("head.weight", (cfg.num_classes, cin, 1, 1), cin))
    shapes.append(("head.bias", (cfg.num_classes,), cin))
    return shapes


def init_bound(name: str, fan_in: int) -> float:
    if name.endswith(".bias"):
        return 1.0 / math.sqrt(fan_in)
    gain = 1.0 if name.startswith("head") else math.sqrt(2.0)
    return gain * math.sqrt(3.0 / fan_in)


def init_model(config: ModelConfig, rng: np.random.Generator, requires_grad: bool = True) -> ModelParams:
    """Fan-in scaled uniform (Kaiming-style) initialization."""
    tensors = {}
    for name, shape, fan_in in _layer_shapes(config):
        b = init_bound(name, fan_in)
        tensors[name] = Tensor(rng.uniform(-b, b, size=shape), requires_grad=requires_grad)
    return ModelParams(tensors, config)


# -------------------------------------------------------------- resampler

@lru_cache(maxsize=64)
def _polar_to_bev_cached(key: tuple, cfg: ModelConfig) -> sp.csr_matrix:
    K = CameraIntrinsics(*key)
    return _build_resampler(K, cfg)


def polar_to_bev_matrix(K: CameraIntrinsics, cfg: ModelConfig) -> sp.csr_matrix:
    """Sparse (D·Wf) × (Z·X) bilinear weights from polar bins to BEV cells.

    Cell (z, x) reads image column u = fx·x/z + cx (divided down to feature
    columns) and a depth bin linear in z. Cells outside the horizontal field
    of view get no weight.
    """
    return _polar_to_bev_cached(K.key(), cfg)


def _build_resampler(K: CameraIntrinsics, cfg: ModelConfig) -> sp.csr_matrix:
    grid = cfg.grid
    _, wf = cfg.feature_size
    d = cfg.n_depth
    x, z = grid.cell_centers()
    x = x.reshape(-1)
    z = z.reshape(-1)
    slope = x / z
    in_fov = (slope >= (-0.5 - K.cx) / K.fx) & (slope <= (K.width - 0.5 - K.cx) / K.fx)
    u = K.fx * slope + K.cx
    col = np.clip(u / cfg.downsample, 0.0, wf - 1)
    depth = np.clip((z - grid.z_min) / (grid.z_max - grid.z_min) * d - 0.5, 0.0, d - 1)

    c0 = np.minimum(np.floor(col).astype(int), wf - 2)
    r0 = np.minimum(np.floor(depth).astype(int), d - 2)
    fc = col - c0
    fr = depth - r0
    cells = np.arange(x.size)
    rows, cols, vals = [], [], []
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rows.append((r0 + dr) * wf + (c0 + dc))
            cols.append(cells)
            vals.append(wr * wc * in_fov)
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(d * wf, x.size))
    return m.tocsr()


# ---------------------------------------------------------------- forward

def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ValueError(f"expected 3×H×W or N×3×H×W images, got {arr.shape}")
    return arr, False


def forward(params: ModelParams, images, Ks) -> ForwardOutput:
    """Run the network on one image (3×H×W, one K) or a batch (N×3×H×W, N Ks)."""
    cfg = params.config
    batch, single = _as_batch(images)
    if isinstance(Ks, CameraIntrinsics):
        Ks = [Ks] * batch.shape[0]
    Ks = list(Ks)
    n = batch.shape[0]
    if len(Ks) != n:
        raise ValueError(f"{n} images but {len(Ks)} intrinsics")
    if batch.shape[1:] != (3, cfg.image_height, cfg.image_width):
        raise ValueError(f"image shape {batch.shape[1:]} does not match config "
                         f"(3, {cfg.image_height}, {cfg.image_width})")
    for K in Ks:
        if (K.width, K.height) != (cfg.image_width, cfg.image_height):
            raise ValueError("intrinsics image size does not match config")

    h = T.as_tensor(batch)
    for i in range(len(cfg.enc_channels)):
        h = T.relu(T.conv2d(h, params[f"enc{i}.weight"], params[f"enc{i}.bias"],
                            stride=2, padding=_DOWN_PAD))

    cf = cfg.feature_channels
    hf, wf = cfg.feature_size
    dd = cfg.n_depth
    # one row per image column: (N*Wf) × (Cf*Hf)
    cols = T.reshape(T.transpose(h, (0, 3, 1, 2)), (n * wf, cf * hf))
    polar = T.matmul(cols, params["vt.weight"])
    polar = T.relu(T.add(polar, T.expand_to(params["vt.bias"], polar.shape)))
    # -> (N, Cf, D, Wf) -> rows of (D*Wf) per (image, channel)
    polar = T.transpose(T.reshape(polar, (n, wf, cf, dd)), (0, 2, 3, 1))

    nz, nx = cfg.grid.nz, cfg.grid.nx
    keys = [K.key() for K in Ks]
    if all(k == keys[0] for k in keys):
        flat = T.reshape(polar, (n * cf, dd * wf))
        bev = T.reshape(T.linear_map(flat, polar_to_bev_matrix(Ks[0], cfg)), (n, cf, nz, nx))
    else:
        parts = []
        for i, K in enumerate(Ks):
            one = T.reshape(T.take(polar, i), (cf, dd * wf))
            parts.append(T.reshape(T.linear_map(one, polar_to_bev_matrix(K, cfg)), (1, cf, nz, nx)))
        bev = T.concat(parts, axis=0)

    y = bev
    for i, k in enumerate(cfg.dec_kernels):
        y = T.relu(T.conv2d(y, params[f"dec{i}.weight"], params[f"dec{i}.bias"], padding=k // 2))
    y = T.sigmoid(T.conv2d(y, params["head.weight"], params["head.bias"]))

    if single:
        bev = T.reshape(bev, bev.shape[1:])
        y = T.reshape(y, y.shape[1:])
    return ForwardOutput(bev, y)


# -------------------------------------------------------------------- EMA

def ema_update(teacher: ModelParams, student: ModelParams, decay: float) -> ModelParams:
    """teacher <- decay * teacher + (1 - decay) * student, tensor by tensor, in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
    teacher.check_compatible(student)
    keep = 1.0 - decay
    for name in teacher:
        t = teacher[name]
        t.data = decay * t.data + keep * student[name].data
    return teacher


# ------------------------------------------------------------- checkpoints

_MAGIC = b"SEMIBEV-CKPT 1\n"


def save_checkpoint(params: ModelParams, path) -> None:
    """Header line ``name d0 d1 ...`` per tensor, then its float64 LE values."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for name, t in params.items():
            header = " ".join([name] + [str(s) for s in t.shape])
            f.write(header.encode("ascii") + b"\n")
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, config: ModelConfig | None = None, requires_grad: bool = False) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    tensors = {}
    while pos < len(raw):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ValueError(f"{path}: truncated header")
        parts = raw[pos:nl].decode("ascii", errors="replace").split()
        if not parts:
            raise ValueError(f"{path}: empty header line")
        name, shape = parts[0], tuple(int(s) for s in parts[1:])
        count = int(np.prod(shape)) if shape else 1
        start, end = nl + 1, nl + 1 + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated data for {name}")
        data = np.frombuffer(raw[start:end], dtype="<f8").reshape(shape)
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=requires_grad)
        pos = end
    params = ModelParams(tensors, config or ModelConfig())
    expected = [(n, s) for n, s, _ in _layer_shapes(params.config)]
    got = [(n, t.shape) for n, t in tensors.items()]
    if got != expected:
        raise ValueError(f"{path}: tensors do not match the model config")
    return params

