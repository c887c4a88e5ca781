"""Static-map construction from a posed session, ground fitting, voxel dedup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, InvalidInputError, InvalidParameterError
from .geometry import (PointCloud, pack_voxel_keys, voxel_indices)
from .io import Session
from .rng import make_rng


@dataclass(frozen=True)
class GroundModel:
    """Plane a*x + b*y + c*z + d = 0 with unit normal oriented upward.

    ``threshold`` is the inlier distance used when the model was fitted.
    """

    normal: np.ndarray
    d: float
    threshold: float = 0.1

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            raise InvalidInputError("ground normal must be unit length")
        if n[2] < 0:  # orient upward so heights are signed consistently
            n = -n
            object.__setattr__(self, "d", -self.d)
        object.__setattr__(self, "normal", n)
        self.normal.setflags(write=False)

    def height_of(self, points: np.ndarray) -> np.ndarray:
        """Signed height of points above the plane."""
        return np.asarray(points, dtype=np.float64) @ self.normal + self.d


def build_static_map(session: Session) -> PointCloud:
    """Union of all posed scans with high-dynamic points removed.

    Each scan is transformed by its pose into the global frame; points marked
    True in the session's dynamic masks are dropped.  All output points carry
    visibility flag 0 (map domain).  Per-point labels survive when every scan
    carries them.
    """
    if len(session) == 0:
        raise InvalidInputError("session has no scans")
    parts_pts, parts_lab = [], []
    have_labels = all(cloud.labels is not None for cloud, _, _ in session.scans)
    for (cloud, pose, _), mask in zip(session.scans, session.dynamic_masks):
        pts = pose.apply(cloud.points)
        lab = cloud.labels
        if mask is not None:
            keep = ~mask
            pts = pts[keep]
            lab = None if lab is None else lab[keep]
        parts_pts.append(pts)
        if have_labels:
            parts_lab.append(lab)
    pts = np.concatenate(parts_pts) if parts_pts else np.empty((0, 3))
    labels = np.concatenate(parts_lab) if have_labels else None
    return PointCloud(pts, labels=labels,
                      visibility=np.zeros(len(pts), dtype=np.uint8))


def segment_ground(scan: PointCloud, threshold: float = 0.1, iterations: int = 200,
                   seed: int = 0):
    """Fit the dominant ground plane by randomized consensus.

    Candidate planes are sampled from the lowest 30th height percentile of the
    cloud; the best plane is refined on its inliers by least squares.  Returns
    ``(GroundModel, indices)`` where the indices select all scan points within
    ``threshold`` of the refined plane.
    """
    pts = scan.points
    if len(pts) < 50:
        raise InsufficientDataError(f"need >= 50 points, got {len(pts)}")
    zcut = np.percentile(pts[:, 2], 30.0)
    low = pts[pts[:, 2] <= zcut]
    if len(low) < 3:
        raise InsufficientDataError("degenerate height distribution")

    rng = make_rng(seed)
    best_count = -1
    best_nd = None
    for _ in range(iterations):
        idx = rng.choice(len(low), size=3, replace=False)
        p0, p1, p2 = low[idx]
        n = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = -n @ p0
        count = int((np.abs(low @ n + d) <= threshold).sum())
        if count > best_count:
            best_count = count
            best_nd = (n, d)
    if best_nd is None:
        raise InsufficientDataError("no valid plane hypothesis found")

    # refine on the consensus set: plane through the centroid along the
    # smallest principal direction
    n, d = best_nd
    inl = low[np.abs(low @ n + d) <= threshold]
    centroid = inl.mean(axis=0)
    u, s, vt = np.linalg.svd(inl - centroid, full_matrices=False)
    n = vt[2]
    n = n / np.linalg.norm(n)
    d = -float(n @ centroid)
    model = GroundModel(n, d, threshold)
    inliers = np.flatnonzero(np.abs(model.height_of(pts)) <= threshold)
    return model, inliers


def _majority_labels(inverse: np.ndarray, labels: np.ndarray, n_voxels: int) -> np.ndarray:
    counts = np.zeros((n_voxels, 3), dtype=np.int64)
    np.add.at(counts, (inverse, labels.astype(np.int64)), 1)
    top = counts.max(axis=1)
    maj = counts.argmax(axis=1)
    # any tie for the maximum resolves to static
    maj[(counts == top[:, None]).sum(axis=1) > 1] = 0
    return maj.astype(np.uint8)


def voxel_dedup(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One representative point (the centroid) per occupied voxel.

    Labels resolve by majority with ties going to static; visibility resolves
    by majority with ties to 0; confidences average.  Output order follows
    sorted voxel keys and the operation is idempotent at a fixed size.
    """
    if voxel_size <= 0:
        raise InvalidParameterError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        return cloud
    keys = pack_voxel_keys(voxel_indices(cloud.points, voxel_size))
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    v = len(uniq)
    centroids = np.empty((v, 3))
    for a in range(3):
        centroids[:, a] = np.bincount(inverse, weights=cloud.points[:, a], minlength=v)
    centroids /= counts[:, None]

    labels = None if cloud.labels is None else _majority_labels(inverse, cloud.labels, v)
    vis = None
    if cloud.visibility is not None:
        ones = np.bincount(inverse, weights=cloud.visibility.astype(np.float64), minlength=v)
        vis = (2 * ones > counts).astype(np.uint8)
    conf = None
    if cloud.confidences is not None:
        conf = np.bincount(inverse, weights=cloud.confidences, minlength=v) / counts
        conf = np.clip(conf, 0.0, 1.0)
    return PointCloud(centroids, labels=labels, visibility=vis, confidences=conf)
