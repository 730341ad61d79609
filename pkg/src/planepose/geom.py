"""Rotation parameterizations and the plane-pose transform.

Conventions
-----------
- Every function accepts a single rotation or a batch (leading axes are kept).
- Quaternions are ``(w, x, y, z)``; the canonical sign has ``w >= 0``.
- Axis-angle is a rotation vector ``r`` with angle ``|r|``.
- Euler angles ``(rx, ry, rz)`` compose as ``Rz(rz) @ Ry(ry) @ Rx(rx)``.
- A raw 9-vector is read row-major as a 3x3 block; its first two columns are
  Gram-Schmidt orthonormalized and the third is their cross product.
- All angles are radians, all arithmetic is float64.

A plane pose is the stack of three reference points ``[c, br, bl]`` (center,
bottom-right, bottom-left). The canonical pose lives on the ``z = 0`` plane of
the sampling grid ``[-E, E]^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePlaneError, InvalidInputError, SingularInputError

GRID_HALF_EXTENT = 80.0

ROTATION_KINDS = ("quaternion", "axis_angle", "euler", "matrix")

_SMALL_ANGLE_SQ = 1e-8


def _as_float(a, last: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1:] != (last,):
        raise InvalidInputError(f"{name} must have trailing dimension {last}, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2
    )


# ---------------------------------------------------------------------------
# parameters -> matrix
# ---------------------------------------------------------------------------


def quat_to_matrix(q) -> np.ndarray:
    q = _as_float(q, 4, "quaternion")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise InvalidInputError("zero-norm quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def rodrigues_coefficients(theta_sq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``sin(t)/t`` and ``(1 - cos(t))/t**2`` as functions of ``t**2``.

    Below ``t**2 = 1e-8`` the second-order Taylor expansion is used, which keeps
    both coefficients smooth through the origin.
    """
    theta_sq = np.asarray(theta_sq, dtype=np.float64)
    small = theta_sq < _SMALL_ANGLE_SQ
    safe = np.where(small, 1.0, theta_sq)
    theta = np.sqrt(safe)
    a = np.where(small, 1.0 - theta_sq / 6.0, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta_sq / 24.0, (1.0 - np.cos(theta)) / safe)
    return a, b


def axisangle_to_matrix(r) -> np.ndarray:
    r = _as_float(r, 3, "axis-angle")
    a, b = rodrigues_coefficients(np.sum(r * r, axis=-1))
    k = skew(r)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _rot_x(t):
    c, s, o, z = np.cos(t), np.sin(t), np.ones_like(t), np.zeros_like(t)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(t):
    c, s, o, z = np.cos(t), np.sin(t), np.ones_like(t), np.zeros_like(t)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(t):
    c, s, o, z = np.cos(t), np.sin(t), np.ones_like(t), np.zeros_like(t)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def euler_to_matrix(e) -> np.ndarray:
    e = _as_float(e, 3, "Euler angles")
    return _rot_z(e[..., 2]) @ _rot_y(e[..., 1]) @ _rot_x(e[..., 0])


def orthonormalize(raw9) -> np.ndarray:
    raw9 = _as_float(raw9, 9, "raw rotation")
    m = raw9.reshape(raw9.shape[:-1] + (3, 3))
    a1, a2 = m[..., :, 0], m[..., :, 1]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 < 1e-9) or np.any(n2 < 1e-9):
        raise SingularInputError("raw rotation has a vanishing column")
    c1 = a1 / n1
    u2 = a2 - np.sum(c1 * a2, axis=-1, keepdims=True) * c1
    nu2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(nu2 < 1e-9 * n2):
        raise SingularInputError("raw rotation has parallel columns")
    c2 = u2 / nu2
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], -1)


# ---------------------------------------------------------------------------
# matrix -> parameters
# ---------------------------------------------------------------------------


def canonical_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def matrix_to_quat(m) -> np.ndarray:
    """Shepperd's method: pick the largest of the four squared components."""
    m = np.asarray(m, dtype=np.float64)
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    diag = np.stack([m00 + m11 + m22, m00 - m11 - m22, -m00 + m11 - m22, -m00 - m11 + m22], -1)
    pick = np.argmax(diag, axis=-1)
    s = np.sqrt(np.maximum(1.0 + np.take_along_axis(diag, pick[..., None], -1)[..., 0], 0.0)) * 2.0
    d21, d02, d10 = m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]
    s21, s02, s10 = m[..., 2, 1] + m[..., 1, 2], m[..., 0, 2] + m[..., 2, 0], m[..., 1, 0] + m[..., 0, 1]
    cands = np.stack(
        [
            np.stack([s / 4, d21 / s, d02 / s, d10 / s], -1),
            np.stack([d21 / s, s / 4, s10 / s, s02 / s], -1),
            np.stack([d02 / s, s10 / s, s / 4, s21 / s], -1),
            np.stack([d10 / s, s02 / s, s21 / s, s / 4], -1),
        ],
        -2,
    )
    q = np.take_along_axis(cands, pick[..., None, None], -2)[..., 0, :]
    return canonical_quaternion(q)


def matrix_to_axisangle(m) -> np.ndarray:
    q = matrix_to_quat(m)
    v = q[..., 1:]
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(vn, q[..., :1])
    # angle/sin(angle/2) -> 2 as the rotation vanishes
    scale = np.where(vn < 1e-12, 2.0, angle / np.where(vn < 1e-12, 1.0, vn))
    return v * scale


def matrix_to_euler(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    ry = np.arctan2(-m[..., 2, 0], np.hypot(m[..., 0, 0], m[..., 1, 0]))
    cy = np.hypot(m[..., 0, 0], m[..., 1, 0])
    locked = cy < 1e-9
    rx = np.where(locked, 0.0, np.arctan2(m[..., 2, 1], m[..., 2, 2]))
    rz = np.where(
        locked,
        np.arctan2(-m[..., 0, 1], m[..., 1, 1]),
        np.arctan2(m[..., 1, 0], m[..., 0, 0]),
    )
    return np.stack([rx, ry, rz], -1)


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed rotation matrices (normalized Gaussian quaternions)."""
    q = rng.standard_normal((n, 4))
    return quat_to_matrix(q)


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotationParam:
    """A rotation stored in one of the four supported parameterizations."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ROTATION_KINDS:
            raise InvalidInputError(f"unknown rotation kind {self.kind!r}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @classmethod
    def identity(cls) -> "RotationParam":
        return cls("euler", np.zeros(3))

    def to_matrix(self) -> np.ndarray:
        if self.kind == "quaternion":
            return quat_to_matrix(self.values)
        if self.kind == "axis_angle":
            return axisangle_to_matrix(self.values)
        if self.kind == "euler":
            return euler_to_matrix(self.values)
        return orthonormalize(self.values)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RotationParam":
        return cls(d["kind"], np.asarray(d["values"]))


@dataclass(frozen=True)
class SimTransform:
    """Similarity transform ``p -> s * R @ p + t``."""

    rotation: RotationParam = field(default_factory=RotationParam.identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if not (np.isfinite(self.s) and self.s > 0):
            raise InvalidInputError(f"scale must be positive, got {self.s}")

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.to_dict(), "t": self.t.tolist(), "s": float(self.s)}

    @classmethod
    def from_dict(cls, d: dict) -> "SimTransform":
        return cls(RotationParam.from_dict(d["rotation"]), np.asarray(d["t"]), float(d["s"]))


@dataclass(frozen=True)
class PlanePose:
    """Center, bottom-right and bottom-left reference points in voxel units."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape == (9,):
            pts = pts.reshape(3, 3)
        if pts.shape != (3, 3):
            raise InvalidInputError(f"a pose needs 3 points in R^3, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    @property
    def c(self) -> np.ndarray:
        return self.points[0]

    @property
    def br(self) -> np.ndarray:
        return self.points[1]

    @property
    def bl(self) -> np.ndarray:
        return self.points[2]

    def as_vector(self) -> np.ndarray:
        return self.points.reshape(9).copy()

    def is_valid(self) -> bool:
        return bool(np.linalg.norm(np.cross(self.br - self.c, self.bl - self.c)) > 1e-6)


def canonical_points(half_extent: float = GRID_HALF_EXTENT) -> np.ndarray:
    e = float(half_extent)
    return np.array([[0.0, 0.0, 0.0], [e, -e, 0.0], [-e, -e, 0.0]])


def canonical_pose(half_extent: float = GRID_HALF_EXTENT) -> PlanePose:
    return PlanePose(canonical_points(half_extent))


def apply_transform(x: SimTransform, canonical: PlanePose | None = None) -> PlanePose:
    pts = canonical_points() if canonical is None else np.asarray(canonical, dtype=np.float64)
    r = x.rotation.to_matrix()
    return PlanePose(x.s * pts @ r.T + x.t)


def plane_normal(p) -> np.ndarray:
    """Unit normal ``(br - c) x (bl - c)``; accepts ``(..., 3, 3)`` point stacks."""
    pts = np.asarray(p, dtype=np.float64)
    if pts.shape[-1] == 9:
        pts = pts.reshape(pts.shape[:-1] + (3, 3))
    n = np.cross(pts[..., 1, :] - pts[..., 0, :], pts[..., 2, :] - pts[..., 0, :])
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm <= 1e-6):
        raise DegeneratePlaneError("reference points are collinear")
    return n / norm


def plane_frame(p, half_extent: float = GRID_HALF_EXTENT) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Origin and in-plane unit steps ``(origin, ex, ey)`` spanned by a pose.

    For a pose produced by ``apply_transform`` the grid point ``(u, v)`` maps to
    ``origin + u * ex + v * ey``, which reproduces ``s * R @ (u, v, 0) + t``.
    Arbitrary (non-rigid) three-point poses get the affine frame they imply.
    """
    c, br, bl = np.asarray(p, dtype=np.float64).reshape(3, 3)
    ex = (br - bl) / (2.0 * half_extent)
    ey = (c - 0.5 * (br + bl)) / half_extent
    return c, ex, ey
