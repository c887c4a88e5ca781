"""Core 3D types and operations.

Point clouds with optional change labels / visibility flags / confidences,
rigid SE(3) poses, voxel quantization by floor division, nearest-neighbour
queries backed by a KD-tree, the SO(3) exponential map, and bounded random
pose perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, InvalidInputError, InvalidParameterError
from .rng import make_rng

STATIC = 0
POSITIVE = 1
NEGATIVE = 2


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class PointCloud:
    """An ordered set of 3D points with optional per-point attributes.

    Attributes:
        points: (N, 3) float64 coordinates in meters, finite.
        labels: optional (N,) uint8 change classes in {0 static, 1 positive
            change, 2 negative change}.
        visibility: optional (N,) uint8 domain flags (0 = map, 1 = scan).
        confidences: optional (N,) float64 values in [0, 1].

    Instances are immutable after construction (arrays are marked read-only)
    and safe to share across threads.  The KD-tree over the points is built
    lazily on first use and reused afterwards.
    """

    __slots__ = ("points", "labels", "visibility", "confidences", "_tree")

    def __init__(self, points, labels=None, visibility=None, confidences=None):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"points must be (N, 3), got {pts.shape}")
        if pts.size and not np.isfinite(pts).all():
            raise InvalidInputError("point coordinates must be finite")
        n = pts.shape[0]
        self.points = _readonly(pts)
        self.labels = self._attr(labels, n, np.uint8, "labels", hi=2)
        self.visibility = self._attr(visibility, n, np.uint8, "visibility", hi=1)
        self.confidences = self._attr(confidences, n, np.float64, "confidences")
        self._tree = None

    @staticmethod
    def _attr(values, n, dtype, name, hi=None):
        if values is None:
            return None
        a = np.ascontiguousarray(values, dtype=dtype)
        if a.shape != (n,):
            raise InvalidInputError(f"{name} must have shape ({n},), got {a.shape}")
        if hi is not None and a.size and a.max(initial=0) > hi:
            raise InvalidInputError(f"{name} values must be <= {hi}")
        if dtype is np.float64 and a.size:
            if not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
                raise InvalidInputError(f"{name} values must lie in [0, 1]")
        return _readonly(a)

    def __len__(self) -> int:
        return self.points.shape[0]

    def kdtree(self) -> cKDTree:
        """KD-tree over the points; built once, shared by all queries."""
        if len(self) == 0:
            raise EmptyInputError("cannot build a KD-tree over an empty cloud")
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def subset(self, index) -> "PointCloud":
        """New cloud restricted to ``index`` (any numpy fancy index)."""
        return PointCloud(
            self.points[index],
            None if self.labels is None else self.labels[index],
            None if self.visibility is None else self.visibility[index],
            None if self.confidences is None else self.confidences[index],
        )

    def replace(self, **kw) -> "PointCloud":
        """Copy of the cloud with the given attributes substituted."""
        args = dict(points=self.points, labels=self.labels,
                    visibility=self.visibility, confidences=self.confidences)
        args.update(kw)
        return PointCloud(**args)


def concat_clouds(clouds) -> PointCloud:
    """Concatenate clouds; an optional attribute survives only if every part has it."""
    clouds = list(clouds)
    if not clouds:
        return PointCloud(np.empty((0, 3)))
    pts = np.concatenate([c.points for c in clouds])

    def gather(name):
        parts = [getattr(c, name) for c in clouds]
        if any(p is None for p in parts):
            return None
        return np.concatenate(parts)

    return PointCloud(pts, gather("labels"), gather("visibility"), gather("confidences"))


@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform: p -> rotation @ p + translation.

    The rotation must be orthonormal with determinant +1 (checked to 1e-9).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise InvalidInputError("pose entries must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidInputError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rt(cls, rt: np.ndarray) -> "Pose":
        """Build from a 3x4 (or 4x4) row-major [R | t] matrix."""
        rt = np.asarray(rt, dtype=np.float64)
        if rt.shape == (4, 4):
            rt = rt[:3]
        if rt.shape != (3, 4):
            raise InvalidInputError("expected a 3x4 or 4x4 matrix")
        return cls(rt[:, :3], rt[:, 3])

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self . other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


class VoxelIndex(NamedTuple):
    ix: int
    iy: int
    iz: int


def transform(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Apply a rigid transform to every point; attributes are preserved."""
    return cloud.replace(points=pose.apply(cloud.points))


def voxel_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """(N, 3) int64 voxel coordinates by floor division (vectorized core)."""
    if voxel_size <= 0:
        raise InvalidParameterError("voxel_size must be positive")
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def quantize(cloud: PointCloud, voxel_size: float) -> dict:
    """Bucket points into voxels of edge ``voxel_size``.

    Returns a mapping VoxelIndex -> int64 array of point indices.  Every point
    lands in exactly one bucket; the cell boundary convention follows floor
    division, so e.g. x = -0.01 at size 0.1 belongs to cell ix = -1.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    keys = voxel_indices(pts, voxel_size)
    if keys.shape[0] == 0:
        return {}
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    cuts = np.flatnonzero((sk[1:] != sk[:-1]).any(axis=1)) + 1
    groups = np.split(order, cuts)
    return {VoxelIndex(*sk[start]): np.sort(g)
            for start, g in zip(np.concatenate([[0], cuts]), groups)}


# 21 bits per axis, biased; enough for |coordinate| < ~1e5 m at 0.1 m voxels.
_KEY_BIAS = 1 << 20


def pack_voxel_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (N, 3) int64 voxel coordinates into sortable scalar int64 keys."""
    k = keys + _KEY_BIAS
    if k.size and (k.min() < 0 or k.max() >= (1 << 21)):
        raise InvalidInputError("voxel index out of packable range")
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


def nearest_neighbor(query, target) -> tuple:
    """Index and Euclidean distance of the nearest point of ``target``.

    Ties are broken toward the smallest index, matching an exhaustive
    first-minimum scan.
    """
    if isinstance(target, PointCloud):
        cloud = target
    else:
        cloud = PointCloud(np.asarray(target, dtype=np.float64))
    if len(cloud) == 0:
        raise EmptyInputError("nearest_neighbor target is empty")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    tree = cloud.kdtree()
    d, _ = tree.query(q)
    # re-rank all candidates at the best radius so exact ties resolve by index
    cand = np.asarray(tree.query_ball_point(q, d * (1.0 + 1e-9) + 1e-300), dtype=np.int64)
    d2 = ((cloud.points[cand] - q) ** 2).sum(axis=1)
    best = cand[d2 == d2.min()].min()
    return int(best), float(np.sqrt(d2.min()))


def nearest_distances(query_points: np.ndarray, tree: cKDTree, k: int = 1,
                      workers: int = 1) -> np.ndarray:
    """Distances from each query to its k nearest tree points (no tie policy)."""
    d, _ = tree.query(np.asarray(query_points, dtype=np.float64), k=k, workers=workers)
    return d


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(w) @ v == cross(w, v)."""
    wx, wy, wz = omega
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rotation matrix for a rotation vector via the exponential map.

    Below ``|omega| = 1e-8`` a second-order Taylor expansion replaces the
    closed form to avoid catastrophic cancellation in sin(t)/t terms.
    """
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    if not np.isfinite(w).all():
        raise InvalidInputError("rotation vector must be finite")
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


@dataclass(frozen=True)
class PerturbationSpec:
    """Bounded SE(3) noise description.

    Translation noise is drawn as N(0, level^2 * sigma_t) and rotation-vector
    noise as N(0, level^2 * sigma_r); each component is then clamped to the
    respective bound (translation per axis, roll/pitch, yaw).  The defaults
    bound the noise at 0.05 m, 1 degree roll/pitch and 2 degrees yaw.

    Attributes:
        level: nonnegative scale L.
        sigma_t: 3x3 symmetric PSD covariance of the translation noise, m^2.
        sigma_r: 3x3 symmetric PSD covariance of the rotation noise, rad^2.
        bound_t: per-axis clamp on |t|, meters.
        bound_rp: clamp on |roll| and |pitch|, radians.
        bound_yaw: clamp on |yaw|, radians.
        seed: RNG seed making the draw reproducible.
    """

    level: float
    sigma_t: np.ndarray = field(default_factory=lambda: np.eye(3) * 0.02 ** 2)
    sigma_r: np.ndarray = field(default_factory=lambda: np.diag(
        [np.deg2rad(0.5) ** 2, np.deg2rad(0.5) ** 2, np.deg2rad(1.0) ** 2]))
    bound_t: float = 0.05
    bound_rp: float = np.deg2rad(1.0)
    bound_yaw: float = np.deg2rad(2.0)
    seed: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise InvalidParameterError("level must be nonnegative")
        if min(self.bound_t, self.bound_rp, self.bound_yaw) < 0:
            raise InvalidParameterError("bounds must be nonnegative")
        for name in ("sigma_t", "sigma_r"):
            s = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if s.shape != (3, 3) or np.abs(s - s.T).max() > 1e-9:
                raise InvalidInputError(f"{name} must be symmetric 3x3")
            if np.linalg.eigvalsh(s).min() < -1e-12:
                raise InvalidInputError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, _readonly(s))


def _sqrt_psd(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T


def perturb_pose(pose: Pose, spec: PerturbationSpec) -> Pose:
    """Left-perturb a pose with bounded Gaussian SE(3) noise.

    Draws t ~ N(0, L^2 sigma_t) and w ~ N(0, L^2 sigma_r) (translation first,
    then rotation, from the seeded stream), clamps each component, and returns
    the pose with rotation exp(hat(w)) @ R and translation exp(hat(w)) @ t0 + t.
    L = 0 returns the pose unchanged.
    """
    if spec.level == 0.0:
        return pose
    rng = make_rng(spec.seed)
    t = spec.level * (_sqrt_psd(spec.sigma_t) @ rng.standard_normal(3))
    w = spec.level * (_sqrt_psd(spec.sigma_r) @ rng.standard_normal(3))
    t = np.clip(t, -spec.bound_t, spec.bound_t)
    w[0] = np.clip(w[0], -spec.bound_rp, spec.bound_rp)
    w[1] = np.clip(w[1], -spec.bound_rp, spec.bound_rp)
    w[2] = np.clip(w[2], -spec.bound_yaw, spec.bound_yaw)
    dr = so3_exp(w)
    return Pose(dr @ pose.rotation, dr @ pose.translation + t)
