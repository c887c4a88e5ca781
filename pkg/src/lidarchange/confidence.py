"""Cross-visibility confidence from nearest cross-domain distances.

A point observed in both the map and the current scan has a small distance d
to its nearest opposite-domain neighbour; occluded or changed points have a
large one.  Confidence follows a piecewise exponential decay in d: full
confidence up to the voxel size, exponential decay with rate lambda beyond
it, and exactly zero from the occlusion radius on.  This module is the
supervision oracle for the learned confidence head and the gating signal for
non-learned pipelines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import (EmptyInputError, InvalidInputError, InvalidParameterError)
from .geometry import PointCloud, nearest_distances
from .rng import make_rng


@dataclass(frozen=True)
class ConfidenceParams:
    """Decay rate (1/m), inner full-confidence radius and outer cutoff (m)."""

    lam: float = 10.0
    tau_vox: float = 0.1
    tau_ocl: float = 3.0

    def __post_init__(self):
        if self.lam <= 0:
            raise InvalidParameterError("lam must be positive")
        if not 0.0 < self.tau_vox < self.tau_ocl:
            raise InvalidParameterError("need 0 < tau_vox < tau_ocl")


def confidence_of(d, params: ConfidenceParams = ConfidenceParams()):
    """Confidence for distance(s) d >= 0.

    1 for d <= tau_vox, exp(-lam * (d - tau_vox)) between the thresholds, and
    0 for d >= tau_ocl.  Scalar in, scalar out; array in, array out.
    """
    a = np.asarray(d, dtype=np.float64)
    if a.size and (not np.isfinite(a).all() or a.min() < 0.0):
        raise InvalidInputError("distances must be finite and nonnegative")
    mid = np.exp(-params.lam * np.clip(a - params.tau_vox, 0.0, None))
    out = np.where(a <= params.tau_vox, 1.0, np.where(a >= params.tau_ocl, 0.0, mid))
    if np.isscalar(d) or np.ndim(d) == 0:
        return float(out)
    return out


def cross_confidence(map_cloud: PointCloud, scan_cloud: PointCloud,
                     params: ConfidenceParams = ConfidenceParams(),
                     workers: int = 1):
    """Per-point confidences for both clouds from exact nearest-neighbour
    distances into the opposite domain.  Returns (map_conf, scan_conf)."""
    if len(map_cloud) == 0 or len(scan_cloud) == 0:
        raise EmptyInputError("both clouds must be non-empty")
    d_map = nearest_distances(map_cloud.points, scan_cloud.kdtree(), workers=workers)
    d_scan = nearest_distances(scan_cloud.points, map_cloud.kdtree(), workers=workers)
    return confidence_of(d_map, params), confidence_of(d_scan, params)


@dataclass(frozen=True)
class PairSample:
    """One sampled supervision pair.

    ``domain`` is 0 when the source point lives in the map and 1 when it
    lives in the scan; ``match_index`` indexes the opposite domain.
    """

    domain: int
    index: int
    match_index: int
    distance: float
    target: float


def sample_pairs(map_cloud: PointCloud, scan_cloud: PointCloud, count: int,
                 seed: int, params: ConfidenceParams = ConfidenceParams()) -> List[PairSample]:
    """Uniform sample (without replacement) of points from both domains.

    Each sample records its nearest opposite-domain match, the distance, and
    the closed-form target confidence.  Deterministic per seed.
    """
    m, n = len(map_cloud), len(scan_cloud)
    if m == 0 or n == 0:
        raise EmptyInputError("both clouds must be non-empty")
    if count > m + n:
        raise InvalidParameterError(f"count {count} exceeds population {m + n}")
    rng = make_rng(seed)
    chosen = rng.choice(m + n, size=count, replace=False)

    out: List[PairSample] = []
    map_idx = chosen[chosen < m]
    scan_idx = chosen[chosen >= m] - m
    if len(map_idx):
        d, k = scan_cloud.kdtree().query(map_cloud.points[map_idx])
        targets = confidence_of(d, params)
        for j, kk, dd, t in zip(map_idx, np.atleast_1d(k),
                                np.atleast_1d(d), np.atleast_1d(targets)):
            out.append(PairSample(0, int(j), int(kk), float(dd), float(t)))
    if len(scan_idx):
        d, k = map_cloud.kdtree().query(scan_cloud.points[scan_idx])
        targets = confidence_of(d, params)
        for j, kk, dd, t in zip(scan_idx, np.atleast_1d(k),
                                np.atleast_1d(d), np.atleast_1d(targets)):
            out.append(PairSample(1, int(j), int(kk), float(dd), float(t)))
    return out
