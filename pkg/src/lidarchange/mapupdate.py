"""Confidence-gated fusion of per-scan predictions into the prior map.

Each map point carries one-vs-rest log-odds for the three classes.  An
observation only touches points whose estimated confidence clears the map
gate; for those, the observation log-odds minus the prior log-odds is added
and the state clamped.  Points failing the gate keep their accumulated state
untouched (a reset to the prior would discard evidence).

State, prior and log-odds increments all snap to multiples of 2^-34.  Every
value the accumulator can hold stays below 2^5 in magnitude (clamp plus one
increment), so each partial sum needs at most 39 significand bits and float64
addition of these values is exact — a fixed multiset of gated observations
therefore produces bit-identical state in any order.  The snap moves a value
by at most 3e-11, far below every decision threshold.

Scan-side positive changes are extracted with the opposite gate sense: a
low confidence means the point is not explained by map visibility, so class-1
points *below* the scan gate are reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .geometry import NEGATIVE, PointCloud, concat_clouds
from . import io as lio


_GRID = 2.0 ** 34


def _snap(a):
    """Round onto the exact-summation grid (multiples of 2^-34)."""
    return np.round(np.asarray(a, dtype=np.float64) * _GRID) / _GRID


@dataclass(frozen=True)
class GateThresholds:
    tau_scan: float = 0.5
    tau_map: float = 0.7

    def __post_init__(self):
        for name in ("tau_scan", "tau_map"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class LogOddsMap:
    """Per-map-point 3-class log-odds state plus the shared prior."""

    state: np.ndarray               # (N, 3)
    prior: np.ndarray = None        # (3,)
    clamp: float = 10.0

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)
        if self.prior is None:
            self.prior = np.zeros(3)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.state.ndim != 2 or self.state.shape[1] != 3:
            raise InvalidInputError("state must have shape (N, 3)")
        if self.prior.shape != (3,) or not np.all(np.isfinite(self.prior)):
            raise InvalidInputError("prior must be 3 finite log-odds values")
        if self.clamp <= 0:
            raise InvalidParameterError("clamp bound must be positive")
        self.state = _snap(self.state)
        self.prior = _snap(self.prior)
        self.clamp = float(_snap(self.clamp))
        if self.state.size and np.abs(self.state).max() > self.clamp + 1e-12:
            raise InvalidInputError("state exceeds the clamp bound")

    def __len__(self) -> int:
        return self.state.shape[0]

    @classmethod
    def uniform(cls, n: int, clamp: float = 10.0) -> "LogOddsMap":
        """Fresh state at the uniform prior (log-odds zero, p = 0.5)."""
        return cls(np.zeros((n, 3)), np.zeros(3), clamp)

    def posterior(self) -> np.ndarray:
        """Per-class posterior probabilities sigmoid(state)."""
        return 1.0 / (1.0 + np.exp(-self.state))


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1.0 - 1e-6)
    return _snap(np.log(p / (1.0 - p)))


def update_map(state: LogOddsMap, obs: Tuple[np.ndarray, np.ndarray],
               gates: GateThresholds,
               indices: Optional[np.ndarray] = None) -> LogOddsMap:
    """One fusion step; returns a new state, the input is untouched.

    ``obs`` is (class probabilities (M, 3), confidences (M,)).  With
    ``indices`` the observation covers only those map rows (M = len(indices),
    e.g. a cropped map); otherwise it must cover the whole map.
    """
    probs, conf = obs
    probs = np.asarray(probs, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    n_obs = len(indices) if indices is not None else len(state)
    if probs.shape != (n_obs, 3) or conf.shape != (n_obs,):
        raise InvalidInputError(
            f"observation must cover {n_obs} points: got {probs.shape}, {conf.shape}")
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    gated = conf > gates.tau_map
    new = state.state.copy()
    rows = np.flatnonzero(gated) if indices is None else np.asarray(indices)[gated]
    new[rows] += _logit(probs[gated]) - state.prior
    np.clip(new, -state.clamp, state.clamp, out=new)
    return LogOddsMap(new, state.prior.copy(), state.clamp)


def extract_scan_changes(scan_pred: Tuple[np.ndarray, np.ndarray],
                         gate: float) -> np.ndarray:
    """Indices predicted positive-change with confidence below the scan gate."""
    classes, conf = scan_pred
    classes = np.asarray(classes)
    conf = np.asarray(conf, dtype=np.float64)
    if classes.shape != conf.shape:
        raise InvalidInputError("class and confidence vectors must align")
    return np.flatnonzero((classes == 1) & (conf < gate))


def removal_mask(state: LogOddsMap, decision_threshold: float = 0.5) -> np.ndarray:
    """True where the negative-change posterior strictly exceeds the threshold."""
    if not (0.0 <= decision_threshold <= 1.0):
        raise InvalidParameterError("decision_threshold must lie in [0, 1]")
    return state.posterior()[:, NEGATIVE] > decision_threshold


def finalize_map(map_cloud: PointCloud, state: LogOddsMap,
                 decision_threshold: float = 0.5) -> PointCloud:
    """Drop map points confirmed as negative changes; keep everything else."""
    if len(map_cloud) != len(state):
        raise InvalidInputError("state length must equal map size")
    return map_cloud.subset(np.flatnonzero(~removal_mask(state, decision_threshold)))


def insert_positive(map_cloud: PointCloud, state: LogOddsMap,
                    scan_cloud: PointCloud, indices: Sequence[int]
                    ) -> Tuple[PointCloud, LogOddsMap]:
    """Optional post-step: append confirmed scan changes to the map.

    New points start at the uniform prior; map-side visibility flags (0) are
    assigned when the map carries them.
    """
    if len(map_cloud) != len(state):
        raise InvalidInputError("state length must equal map size")
    idx = np.asarray(indices, dtype=np.int64)
    add = scan_cloud.subset(idx)
    if map_cloud.visibility is not None:
        add = add.replace(visibility=np.zeros(len(add), dtype=np.uint8))
    merged = concat_clouds([map_cloud, add])
    grown = np.vstack([state.state, np.zeros((len(add), 3))])
    return merged, LogOddsMap(grown, state.prior.copy(), state.clamp)


def save_state(state: LogOddsMap, path) -> None:
    lio.save_logodds(state.state, path)


def load_state(path, clamp: float = 10.0) -> LogOddsMap:
    return LogOddsMap(lio.load_logodds(path), np.zeros(3), clamp)
