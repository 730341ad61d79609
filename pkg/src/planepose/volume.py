"""Phantom volumes, oblique slice sampling and slice augmentation.

Volume coordinates are in voxel units centered on the volume midpoint: voxel
``[d, h, w]`` sits at ``(x, y, z) = (w - (W-1)/2, h - (H-1)/2, d - (D-1)/2)``.
Slice pixel ``[i, j]`` is the grid point ``(u_j, v_i)`` with pixel centers
``-E + (k + 1/2) * 2E / res``, so ``v`` grows with the row index.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InvalidInputError
from .geom import (
    GRID_HALF_EXTENT,
    PlanePose,
    RotationParam,
    SimTransform,
    apply_transform,
    canonical_points,
    plane_frame,
)

MAGIC = b"PPV1"


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"volume must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("volume contains non-finite intensities")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @cached_property
    def padded(self) -> np.ndarray:
        """Float64 copy with a one-voxel zero border, shared by all samplers."""
        out = np.pad(self.data.astype(np.float64), 1)
        out.flags.writeable = False
        return out


@dataclass
class SliceImage:
    data: np.ndarray
    pose: PlanePose
    aug_record: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges; rotation ranges are symmetric half-widths in radians."""

    rot_xy_range: float = float(np.deg2rad(20.0))
    rot_z_range: float = float(np.deg2rad(90.0))
    trans_z_range: tuple[float, float] = (-40.0, 60.0)
    scale_range: tuple[float, float] = (0.75, 1.8)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        if self.rot_xy_range < 0 or self.rot_z_range < 0:
            raise ConfigError("rotation ranges must be non-negative half-widths")
        for name in ("trans_z_range", "scale_range", "contrast_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is not ordered: {lo} > {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.scale_range[0] <= 0:
            raise ConfigError("scale bounds must be positive")

    @classmethod
    def none(cls) -> "AugmentConfig":
        """No geometric or intensity variation at all."""
        return cls(0.0, 0.0, (0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0))


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------


# Shared "anatomy": every phantom carries the same asymmetric landmarks (with
# per-seed jitter), so a model trained on some phantoms transfers to others.
# Columns: centre (x, y, z), semi-axes (x, y, z), intensity offset.
_LANDMARKS = np.array(
    [
        [0.35, 0.10, 0.30, 0.18, 0.12, 0.14, 0.40],
        [-0.30, 0.25, -0.20, 0.14, 0.20, 0.12, -0.20],
        [0.10, -0.40, 0.05, 0.22, 0.10, 0.16, 0.30],
        [-0.15, -0.10, 0.45, 0.12, 0.12, 0.10, 0.25],
        [0.20, 0.30, -0.40, 0.16, 0.14, 0.12, -0.15],
        [-0.40, -0.30, 0.10, 0.10, 0.16, 0.20, 0.35],
    ]
)


def _soft_ellipsoid(xx, yy, zz, center, semi, ang=0.0):
    ca, sa = np.cos(ang), np.sin(ang)
    dx, dy, dz = xx - center[0], yy - center[1], zz - center[2]
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    r = np.sqrt((u / semi[0]) ** 2 + (v / semi[1]) ** 2 + (dz / semi[2]) ** 2)
    return 1.0 / (1.0 + np.exp((r - 1.0) / 0.06))


def generate_phantom(seed: int, dims: tuple[int, int, int] = (160, 160, 160)) -> Volume:
    """Deterministic head-like phantom: nested ellipsoidal shells, shared
    asymmetric landmarks, a midline sheet, z-layered intensity bands and per-seed
    blobs plus texture.

    The layout has no rotational symmetry, so distinct planes through the
    volume give distinct images.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ConfigError(f"phantom dims must be >= 16 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    d, h, w = dims
    zz, yy, xx = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij"
    )
    vol = np.zeros(dims)

    axes = np.array([0.85, 0.65, 0.75]) * rng.uniform(0.95, 1.05, 3)
    rho = np.sqrt((xx / axes[0]) ** 2 + (yy / axes[1]) ** 2 + (zz / axes[2]) ** 2)
    inside = rho < 1.0
    # intensity ramp plus tissue bands along z: a tilted plane cuts the bands
    # into stripes whose direction and spacing reveal the tilt
    vol += (0.15 + 0.15 * (zz + 1.0) + 0.12 * np.cos(3.0 * np.pi * zz)) * inside
    # skull-like outer shell and a thinner inner one
    vol += 0.55 * np.exp(-(((rho - 0.97) / 0.035) ** 2))
    vol += 0.25 * np.exp(-(((rho - 0.75) / 0.03) ** 2))
    # midline sheet in the front half only
    vol += 0.3 * np.exp(-((xx / 0.03) ** 2)) * (yy > -0.1) * inside

    for row in _LANDMARKS:
        center = row[:3] + rng.uniform(-0.04, 0.04, 3)
        semi = row[3:6] * rng.uniform(0.9, 1.1, 3)
        vol += row[6] * _soft_ellipsoid(xx, yy, zz, center, semi)

    for _ in range(3):
        center = rng.uniform(-0.45, 0.45, 3)
        semi = rng.uniform(0.06, 0.15, 3)
        level = rng.uniform(0.1, 0.25) * rng.choice([-1.0, 1.0])
        vol += level * _soft_ellipsoid(xx, yy, zz, center, semi, rng.uniform(0, np.pi))

    noise = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=max(dims) / 40.0)
    noise /= np.abs(noise).max() + 1e-12
    vol += 0.1 * noise * (rho < 1.05)
    vol = np.clip(vol, 0.0, 1.0)
    return Volume(vol.astype(np.float32))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def grid_coordinates(half_extent: float, resolution: int) -> np.ndarray:
    step = 2.0 * half_extent / resolution
    return -half_extent + (np.arange(resolution) + 0.5) * step


def trilinear(data: np.ndarray, points: np.ndarray, padded: np.ndarray | None = None) -> np.ndarray:
    """Trilinear interpolation at centered ``(x, y, z)`` points, zero outside."""
    d, h, w = data.shape
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    f = np.stack(
        [flat[:, 2] + (d - 1) / 2.0, flat[:, 1] + (h - 1) / 2.0, flat[:, 0] + (w - 1) / 2.0], -1
    )
    base = np.floor(f)
    frac = f - base
    idx = base.astype(np.int64) + 1  # index into the zero-padded volume
    limits = np.array([d, h, w])
    inside = np.all((idx >= 0) & (idx <= limits), axis=1) & np.all(np.isfinite(f), axis=1)
    idx = np.where(inside[:, None], idx, 0)
    frac = np.where(inside[:, None], frac, 0.0)
    if padded is None:
        padded = np.pad(np.asarray(data, dtype=np.float64), 1)
    out = np.zeros(len(flat))
    for corner in range(8):
        oz, oy, ox = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
        wz = frac[:, 0] if oz else 1.0 - frac[:, 0]
        wy = frac[:, 1] if oy else 1.0 - frac[:, 1]
        wx = frac[:, 2] if ox else 1.0 - frac[:, 2]
        vals = padded[idx[:, 0] + oz, idx[:, 1] + oy, idx[:, 2] + ox]
        out += wz * wy * wx * vals
    out[~inside] = 0.0
    return out.reshape(pts.shape[:-1])


def sample_pose(
    v: Volume,
    pose,
    grid_half_extent: float = GRID_HALF_EXTENT,
    resolution: int = 160,
) -> np.ndarray:
    """Resample the plane spanned by a three-point pose onto the slice grid."""
    if resolution < 2:
        raise InvalidInputError("slice resolution must be >= 2")
    origin, ex, ey = plane_frame(pose, grid_half_extent)
    g = grid_coordinates(grid_half_extent, resolution)
    pts = origin + g[None, :, None] * ex + g[:, None, None] * ey
    return trilinear(v.data, pts, v.padded)


def sample_slice(
    v: Volume,
    x: SimTransform,
    grid_half_extent: float = GRID_HALF_EXTENT,
    resolution: int = 160,
) -> SliceImage:
    pose = apply_transform(x, PlanePose(canonical_points(grid_half_extent)))
    img = sample_pose(v, pose, grid_half_extent, resolution)
    return SliceImage(img, pose, {"transform": x.to_dict()})


def random_transform(rng: np.random.Generator, cfg: AugmentConfig) -> SimTransform:
    rx, ry = rng.uniform(-cfg.rot_xy_range, cfg.rot_xy_range, 2)
    rz = rng.uniform(-cfg.rot_z_range, cfg.rot_z_range)
    tz = rng.uniform(*cfg.trans_z_range)
    s = rng.uniform(*cfg.scale_range)
    return SimTransform(RotationParam("euler", np.array([rx, ry, rz])), np.array([0.0, 0.0, tz]), s)


def apply_intensity(s: SliceImage, a: float, b: float) -> SliceImage:
    out = np.clip(a * s.data + b, 0.0, 1.0)
    return SliceImage(out, s.pose, {**s.aug_record, "contrast": float(a), "brightness": float(b)})


def augment_intensity(
    s: SliceImage, rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> SliceImage:
    cfg = cfg or AugmentConfig()
    a = rng.uniform(*cfg.contrast_range)
    b = rng.uniform(*cfg.brightness_range)
    return apply_intensity(s, a, b)


def _draw_one(v, cfg, seed, grid_half_extent, resolution):
    rng = np.random.default_rng(seed)
    x = random_transform(rng, cfg)
    s = sample_slice(v, x, grid_half_extent, resolution)
    s = augment_intensity(s, rng, cfg)
    s.aug_record["seed"] = int(seed)
    return s


def make_batch(
    v: Volume,
    n: int,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    resolution: int = 160,
    grid_half_extent: float = GRID_HALF_EXTENT,
    workers: int = 1,
) -> list[SliceImage]:
    """Draw ``n`` labelled slices. Each slice gets its own seed drawn from ``rng``
    up front, so the result does not depend on ``workers``."""
    if n < 1:
        raise InvalidInputError("batch size must be >= 1")
    seeds = rng.integers(0, 2**63 - 1, size=n)
    if workers <= 1:
        return [_draw_one(v, cfg, s, grid_half_extent, resolution) for s in seeds]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda s: _draw_one(v, cfg, s, grid_half_extent, resolution), seeds))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_volume(path, v: Volume) -> None:
    d, h, w = v.dims
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", d, h, w))
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InvalidInputError(f"{path}: not a PPV1 volume")
    d, h, w = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * d * h * w
    if len(raw) != expected:
        raise InvalidInputError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(d, h, w)
    return Volume(data.astype(np.float32))


def write_pgm16(path, img: np.ndarray) -> None:
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise InvalidInputError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_slice(out_dir, name: str, s: SliceImage) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm = out_dir / f"{name}.pgm"
    write_pgm16(pgm, s.data)
    meta = {
        "image": pgm.name,
        "height": s.height,
        "width": s.width,
        "pose": s.pose.as_vector().tolist(),
        "aug_record": s.aug_record,
    }
    (out_dir / f"{name}.json").write_text(json.dumps(meta, indent=2))
    return pgm


def read_slice(path) -> SliceImage:
    """Load a PGM slice; the JSON sidecar, when present, supplies its pose."""
    path = Path(path)
    img = read_pgm16(path)
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
        return SliceImage(img, PlanePose(np.asarray(meta["pose"])), meta.get("aug_record", {}))
    return SliceImage(img, PlanePose(canonical_points()), {})
