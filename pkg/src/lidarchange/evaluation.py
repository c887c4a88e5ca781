"""Metrics and sweep harness.

Scan-side quality is intersection-over-union on positive-change points;
map-side quality is the preservation rate over statics (PR), the rejection
rate over negative changes (RR), and their harmonic mean (F1).  Degenerate
denominators score 1: an absent truth class that was never touched is a
vacuously perfect outcome, not a failure.

``sweep`` runs the full pipeline over a parameter grid and renders a CSV
with a fixed header, deterministic per seed.  Failures at one grid point
yield a NaN row and the sweep continues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import PipelineConfig
from .errors import InvalidInputError, LidarChangeError

CSV_HEADER = "setting,voxel,noise_level,tau_scan,tau_map,iou,pr,rr,f1,ms_per_scan"


@dataclass(frozen=True)
class ConfusionCounts:
    tc: int
    fc: int
    fs: int

    def __post_init__(self):
        if min(self.tc, self.fc, self.fs) < 0:
            raise InvalidInputError("confusion counts must be nonnegative")

    @property
    def iou(self) -> float:
        denom = self.tc + self.fc + self.fs
        return 1.0 if denom == 0 else self.tc / denom


def _masked(arrays: Sequence[np.ndarray], exclude_mask: Optional[np.ndarray]):
    if exclude_mask is None:
        return arrays
    keep = ~np.asarray(exclude_mask, dtype=bool)
    if keep.shape != arrays[0].shape:
        raise InvalidInputError("exclude mask length must match the inputs")
    return [a[keep] for a in arrays]


def scan_confusion(pred: np.ndarray, truth: np.ndarray,
                   exclude_mask: Optional[np.ndarray] = None) -> ConfusionCounts:
    """Positive-change counts: true changes, false changes, false statics."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidInputError("prediction and truth lengths differ")
    pred, truth = _masked([pred, truth], exclude_mask)
    p = pred == 1
    t = truth == 1
    return ConfusionCounts(int((p & t).sum()), int((p & ~t).sum()),
                           int((~p & t).sum()))


def scan_iou(pred: np.ndarray, truth: np.ndarray,
             exclude_mask: Optional[np.ndarray] = None) -> float:
    """TC / (TC + FC + FS) over positive changes; 1 when all counts are zero."""
    return scan_confusion(pred, truth, exclude_mask).iou


@dataclass(frozen=True)
class MapScores:
    pr: float
    rr: float
    f1: float


def map_scores(prior_map_truth: np.ndarray, kept: np.ndarray,
               exclude_mask: Optional[np.ndarray] = None) -> MapScores:
    """Scores of a finalized map against per-point truth.

    ``prior_map_truth`` labels each prior-map point (2 = negative change,
    anything else static); ``kept`` flags points surviving finalization.
    """
    truth = np.asarray(prior_map_truth)
    kept = np.asarray(kept, dtype=bool)
    if truth.shape != kept.shape:
        raise InvalidInputError("truth must cover every prior-map point")
    truth, kept = _masked([truth, kept], exclude_mask)
    is_nc = truth == 2
    n_static = int((~is_nc).sum())
    n_nc = int(is_nc.sum())
    pr = float(kept[~is_nc].sum() / n_static) if n_static else 1.0
    rr = 1.0 - float(kept[is_nc].sum() / n_nc) if n_nc else 1.0
    f1 = 2.0 * pr * rr / (pr + rr) if pr + rr > 0 else 0.0
    return MapScores(pr, rr, f1)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepConfig:
    """Grid over settings x voxel sizes x noise levels x gate thresholds."""

    base: PipelineConfig = field(default_factory=PipelineConfig)
    settings: Tuple[str, ...] = ("dualhead",)
    voxel_sizes: Tuple[float, ...] = (0.1,)
    noise_levels: Tuple[float, ...] = (0.0,)
    tau_scans: Tuple[float, ...] = (0.5,)
    tau_maps: Tuple[float, ...] = (0.7,)


@dataclass(frozen=True)
class SweepRow:
    setting: str
    voxel: float
    noise_level: float
    tau_scan: float
    tau_map: float
    iou: float
    pr: float
    rr: float
    f1: float
    ms_per_scan: float


def sweep(config: SweepConfig, bundle=None) -> List[SweepRow]:
    """Run the pipeline at every grid point, in declared order.

    A grid-point failure becomes a NaN row; remaining points still run.  The
    prepared scene/model bundle can be passed in to share across calls.
    """
    from . import pipeline  # deferred: pipeline consumes these metrics

    if bundle is None:
        bundle = pipeline.prepare_bundle(config.base)
    rows: List[SweepRow] = []
    nan = float("nan")
    for setting in config.settings:
        for voxel in config.voxel_sizes:
            for noise in config.noise_levels:
                for tau_s in config.tau_scans:
                    for tau_m in config.tau_maps:
                        try:
                            r = pipeline.evaluate_setting(
                                bundle, config.base, setting, voxel_size=voxel,
                                noise_level=noise, tau_scan=tau_s, tau_map=tau_m)
                            rows.append(SweepRow(setting, voxel, noise, tau_s,
                                                 tau_m, r.iou, r.pr, r.rr, r.f1,
                                                 r.ms_per_scan))
                        except (LidarChangeError, ValueError):
                            rows.append(SweepRow(setting, voxel, noise, tau_s,
                                                 tau_m, nan, nan, nan, nan, nan))
    return rows


def _num(x: float) -> str:
    return format(float(x), "g")


def format_csv(rows: Sequence[SweepRow], include_timing: bool = True) -> str:
    """Fixed-header CSV; metric cells use 6 decimals, timing 3.

    With ``include_timing`` off the timing cell is written as 0.000 so that
    repeated runs with one seed compare byte-for-byte.
    """
    lines = [CSV_HEADER]
    for r in rows:
        ms = r.ms_per_scan if include_timing else 0.0
        ms_txt = "nan" if math.isnan(ms) else format(ms, ".3f")
        lines.append(",".join([
            r.setting, _num(r.voxel), _num(r.noise_level), _num(r.tau_scan),
            _num(r.tau_map),
            format(r.iou, ".6f"), format(r.pr, ".6f"), format(r.rr, ".6f"),
            format(r.f1, ".6f"), ms_txt,
        ]))
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[SweepRow], path, include_timing: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_csv(rows, include_timing=include_timing))
