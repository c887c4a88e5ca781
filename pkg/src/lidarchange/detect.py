"""Change detectors.

Three detectors over a (map, scan) pair in a shared global frame:

* ``detect_occupancy`` — voxel co-occupancy rule.
* ``detect_visibility`` — spherical range-image comparison from the sensor
  pose.
* a dual-head classifier on per-voxel geometric features: a class head
  (static / positive change / negative change) fed by neighbourhood-
  aggregated "high-level" features and a confidence head (cross-visibility
  estimate in [0, 1]) fed by the local "low-level" features, trained jointly
  with a weighted sum of cross-entropy and mean-squared-error losses.

The feature extractor voxelizes both clouds on a grid anchored at their joint
minimum corner (making the channels invariant to common translations),
computes per-voxel occupancy statistics and distances to the opposite
domain, and broadcasts voxel rows to points.  Hidden layers use tanh, which
keeps analytic gradients verifiable against central finite differences to
high accuracy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .confidence import ConfidenceParams, sample_pairs
from .errors import (EmptyInputError, InvalidInputError, InvalidModelError,
                     InvalidParameterError, TrainingDivergedError)
from .geometry import (NEGATIVE, PointCloud, Pose, pack_voxel_keys,
                       voxel_indices)
from .mapping import GroundModel, _majority_labels
from .rng import make_rng

LOW_DIM = 6
HIGH_DIM = 12
_OFFSETS = [(dx << 42) + (dy << 21) + dz
            for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass
class VoxelFeatures:
    """Per-voxel features of one domain plus the point-to-voxel map."""

    keys: np.ndarray        # (V,) sorted packed voxel keys
    inverse: np.ndarray     # (N,) row index of each point's voxel
    counts: np.ndarray      # (V,)
    centroids: np.ndarray   # (V, 3)
    low: np.ndarray         # (V, LOW_DIM)
    high: np.ndarray        # (V, HIGH_DIM)


@dataclass
class FeatureSet:
    """Per-point feature rows (broadcast from the voxel grid)."""

    low: np.ndarray
    high: np.ndarray


def _table(points: np.ndarray, anchor: np.ndarray, voxel_size: float):
    keys = pack_voxel_keys(np.floor((points - anchor) / voxel_size).astype(np.int64))
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    v = len(uniq)
    centroids = np.empty((v, 3))
    for a in range(3):
        centroids[:, a] = np.bincount(inverse, weights=points[:, a], minlength=v)
    centroids /= counts[:, None]
    return uniq, inverse, counts, centroids


def _lookup(keys: np.ndarray, targets: np.ndarray):
    """(found mask, row indices) of ``targets`` in sorted ``keys``."""
    if len(keys) == 0:
        return np.zeros(len(targets), dtype=bool), np.zeros(len(targets), dtype=np.int64)
    pos = np.searchsorted(keys, targets)
    pos_c = np.minimum(pos, len(keys) - 1)
    found = keys[pos_c] == targets
    return found, pos_c


def _domain_features(nu, keys, counts, centroids, opp_keys, opp_counts,
                     opp_tree, ground: GroundModel, tau_ocl: float,
                     k_cross: int, workers: int):
    v = len(keys)
    if opp_tree is not None:
        k = min(k_cross, opp_tree.n)
        d = opp_tree.query(centroids, k=k, workers=workers)[0]
        if k == 1:
            d = d[:, None] if d.ndim == 1 else d
        d = np.minimum(d, tau_ocl)
        dmin = d[:, 0]
        dmean = d.mean(axis=1)
    else:
        dmin = np.full(v, tau_ocl)
        dmean = np.full(v, tau_ocl)
    found, pos = _lookup(opp_keys, keys)
    opp_here = np.where(found, opp_counts[pos] if len(opp_counts) else 0, 0)
    height = ground.height_of(centroids)

    low = np.column_stack([
        np.full(v, float(nu)),
        np.log1p(counts.astype(np.float64)),
        np.log1p(opp_here.astype(np.float64)),
        dmin,
        dmean,
        height,
    ])

    own_win = counts.astype(np.float64).copy()
    opp_win = opp_here.astype(np.float64).copy()
    own_present = np.ones(v)
    opp_present = found.astype(np.float64)
    d_sum = dmin.copy()
    d_min_win = dmin.copy()
    for off in _OFFSETS:
        if off == 0:
            continue
        t = keys + off
        f_own, p_own = _lookup(keys, t)
        own_win += np.where(f_own, counts[p_own], 0)
        own_present += f_own
        d_sum += np.where(f_own, dmin[p_own], 0.0)
        d_min_win = np.minimum(d_min_win, np.where(f_own, dmin[p_own], np.inf))
        f_opp, p_opp = _lookup(opp_keys, t)
        if len(opp_counts):
            opp_win += np.where(f_opp, opp_counts[p_opp], 0)
        opp_present += f_opp

    high = np.column_stack([
        low,
        np.log1p(own_win),
        np.log1p(opp_win),
        d_sum / own_present,
        d_min_win,
        own_present / 27.0,
        opp_present / 27.0,
    ])
    return low, high


def voxel_features(map_cloud: PointCloud, scan_cloud: PointCloud, voxel_size: float,
                   ground: GroundModel, tau_ocl: float = 3.0, k_cross: int = 4,
                   workers: int = 1) -> Tuple[VoxelFeatures, VoxelFeatures]:
    """Voxel-level feature tables for both domains (map first)."""
    if voxel_size <= 0:
        raise InvalidParameterError("voxel_size must be positive")
    if len(map_cloud) == 0 or len(scan_cloud) == 0:
        raise EmptyInputError("both clouds must be non-empty")
    anchor = np.minimum(map_cloud.points.min(axis=0), scan_cloud.points.min(axis=0))
    mk, mi, mc, mcen = _table(map_cloud.points, anchor, voxel_size)
    sk, si, sc, scen = _table(scan_cloud.points, anchor, voxel_size)
    # cross distances run voxel-to-voxel: a centroid tree is density-
    # independent and two orders of magnitude smaller than the raw cloud
    m_low, m_high = _domain_features(0, mk, mc, mcen, sk, sc, cKDTree(scen),
                                     ground, tau_ocl, k_cross, workers)
    s_low, s_high = _domain_features(1, sk, sc, scen, mk, mc, cKDTree(mcen),
                                     ground, tau_ocl, k_cross, workers)
    return (VoxelFeatures(mk, mi, mc, mcen, m_low, m_high),
            VoxelFeatures(sk, si, sc, scen, s_low, s_high))


def extract_features(map_cloud: PointCloud, scan_cloud: PointCloud,
                     voxel_size: float, ground: GroundModel,
                     tau_ocl: float = 3.0, workers: int = 1
                     ) -> Tuple[FeatureSet, FeatureSet]:
    """Per-point features for (map, scan); rows repeat per voxel."""
    mv, sv = voxel_features(map_cloud, scan_cloud, voxel_size, ground,
                            tau_ocl=tau_ocl, workers=workers)
    return (FeatureSet(mv.low[mv.inverse], mv.high[mv.inverse]),
            FeatureSet(sv.low[sv.inverse], sv.high[sv.inverse]))


# ---------------------------------------------------------------------------
# classical baselines
# ---------------------------------------------------------------------------

def detect_occupancy(map_cloud: PointCloud, scan_cloud: PointCloud,
                     voxel_size: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-voxel co-occupancy rule.

    Voxels holding both domains are static; map-only voxels mark their map
    points negative changes; scan-only voxels mark their scan points positive
    changes.  Returns (map_classes, scan_classes).
    """
    if voxel_size <= 0:
        raise InvalidParameterError("voxel_size must be positive")
    mk = pack_voxel_keys(voxel_indices(map_cloud.points, voxel_size))
    sk = pack_voxel_keys(voxel_indices(scan_cloud.points, voxel_size))
    m_uniq = np.unique(mk)
    s_uniq = np.unique(sk)
    map_static = np.isin(mk, s_uniq)
    scan_static = np.isin(sk, m_uniq)
    map_classes = np.where(map_static, 0, 2).astype(np.uint8)
    scan_classes = np.where(scan_static, 0, 1).astype(np.uint8)
    return map_classes, scan_classes


def _pixels(points_sensor: np.ndarray, res: float):
    r = np.linalg.norm(points_sensor, axis=1)
    safe = np.maximum(r, 1e-12)
    az = np.arctan2(points_sensor[:, 1], points_sensor[:, 0])
    el = np.arcsin(np.clip(points_sensor[:, 2] / safe, -1.0, 1.0))
    ncol = max(1, int(np.ceil(2.0 * np.pi / res)))
    nrow = max(1, int(np.ceil(np.pi / res)))
    col = np.clip(np.floor((az + np.pi) / res).astype(np.int64), 0, ncol - 1)
    row = np.clip(np.floor((el + np.pi / 2.0) / res).astype(np.int64), 0, nrow - 1)
    return row * ncol + col, r, nrow * ncol


def detect_visibility(map_cloud: PointCloud, scan_cloud: PointCloud,
                      sensor_pose: Pose, angular_res: float,
                      range_margin: float) -> Tuple[np.ndarray, np.ndarray]:
    """Spherical range-image comparison from the sensor viewpoint.

    A map point whose pixel's scan surface lies farther by more than the
    margin was seen through, hence a negative change.  A scan point whose
    pixel contains map returns but none within the margin of its own range is
    new geometry, hence a positive change.  Pixels lacking either domain stay
    static (nothing can be concluded there).
    """
    if angular_res <= 0 or range_margin < 0:
        raise InvalidParameterError("need angular_res > 0 and range_margin >= 0")
    inv = sensor_pose.inverse()
    mp = inv.apply(map_cloud.points)
    sp = inv.apply(scan_cloud.points)
    pix_m, r_m, npix = _pixels(mp, angular_res)
    pix_s, r_s, _ = _pixels(sp, angular_res)

    zbuf = np.full(npix, np.inf)
    np.minimum.at(zbuf, pix_s, r_s)
    seen_through = np.isfinite(zbuf[pix_m]) & (zbuf[pix_m] > r_m + range_margin)
    map_classes = np.where(seen_through, 2, 0).astype(np.uint8)

    # composite (pixel, range) key keeps per-pixel ranges contiguous + sorted
    scale = float(max(r_m.max(initial=0.0), r_s.max(initial=0.0)) + range_margin + 1.0)
    key_m = np.sort(pix_m * scale + r_m)
    pix_sorted = np.sort(pix_m)
    has_map = (np.searchsorted(pix_sorted, pix_s, "right")
               - np.searchsorted(pix_sorted, pix_s, "left")) > 0
    lo = pix_s * scale + np.maximum(r_s - range_margin, 0.0)
    hi = pix_s * scale + np.minimum(r_s + range_margin, scale)
    matched = (np.searchsorted(key_m, hi, "right")
               - np.searchsorted(key_m, lo, "left")) > 0
    scan_classes = np.where(has_map & ~matched, 1, 0).astype(np.uint8)
    return map_classes, scan_classes


# ---------------------------------------------------------------------------
# dual-head model
# ---------------------------------------------------------------------------

_PARAM_ORDER = ["w1", "b1", "w2", "b2", "wc", "bc", "v1", "c1", "v2", "c2"]


@dataclass
class DualHeadModel:
    """Trunk (high-level features -> two tanh layers) with a 3-way class head,
    plus a confidence head (low-level features -> tanh layer -> sigmoid)."""

    params: Dict[str, np.ndarray]
    alpha: float = 0.01

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidParameterError("alpha must be nonnegative")
        for name in _PARAM_ORDER:
            if name not in self.params:
                raise InvalidInputError(f"missing parameter {name}")

    @property
    def high_dim(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def low_dim(self) -> int:
        return self.params["v1"].shape[0]

    def copy(self) -> "DualHeadModel":
        return DualHeadModel({k: v.copy() for k, v in self.params.items()}, self.alpha)


def init_model(seed: int = 0, low_dim: int = LOW_DIM, high_dim: int = HIGH_DIM,
               hidden: int = 64, alpha: float = 0.01) -> DualHeadModel:
    rng = make_rng(seed, 77)
    def w(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    params = {
        "w1": w(high_dim, hidden), "b1": np.zeros(hidden),
        "w2": w(hidden, hidden), "b2": np.zeros(hidden),
        "wc": w(hidden, 3), "bc": np.zeros(3),
        "v1": w(low_dim, hidden), "c1": np.zeros(hidden),
        "v2": w(hidden, 1), "c2": np.zeros(1),
    }
    return DualHeadModel(params, alpha)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def class_probabilities(model: DualHeadModel, x_high: np.ndarray) -> np.ndarray:
    if x_high.shape[1] != model.high_dim:
        raise InvalidModelError(
            f"model expects {model.high_dim} high-level features, got {x_high.shape[1]}")
    p = model.params
    h1 = np.tanh(x_high @ p["w1"] + p["b1"])
    h2 = np.tanh(h1 @ p["w2"] + p["b2"])
    return _softmax(h2 @ p["wc"] + p["bc"])


def confidence_estimates(model: DualHeadModel, x_low: np.ndarray) -> np.ndarray:
    if x_low.shape[1] != model.low_dim:
        raise InvalidModelError(
            f"model expects {model.low_dim} low-level features, got {x_low.shape[1]}")
    p = model.params
    g = np.tanh(x_low @ p["v1"] + p["c1"])
    z = (g @ p["v2"] + p["c2"])[:, 0]
    return 1.0 / (1.0 + np.exp(-z))


def classes_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax with any tie for the maximum resolving to static."""
    top = probs.max(axis=1, keepdims=True)
    classes = probs.argmax(axis=1).astype(np.uint8)
    classes[(probs == top).sum(axis=1) > 1] = 0
    return classes


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_cls(predictions: np.ndarray, labels: np.ndarray,
             weights: Optional[np.ndarray] = None) -> float:
    """Cross-entropy over 3-class probability rows, averaged per element.

    ``weights``, when given, holds one multiplier per class; the average is
    then weighted accordingly.  Logs are clamped at probabilities >= 1e-12.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or p.shape[1] != 3 or y.shape != (p.shape[0],):
        raise InvalidInputError("predictions must be (N, 3) with labels (N,)")
    if p.shape[0] == 0:
        raise InvalidInputError("empty prediction set")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise InvalidInputError("probability rows must sum to 1")
    picked = np.clip(p[np.arange(len(y)), y.astype(np.int64)], 1e-12, None)
    nll = -np.log(picked)
    if weights is None:
        return float(nll.mean())
    w = np.asarray(weights, dtype=np.float64)[y.astype(np.int64)]
    return float((w * nll).sum() / w.sum())


def loss_conf(predicted: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error between predicted and target confidences."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(targets, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("predicted and targets must be equal-length vectors")
    if a.size == 0:
        raise InvalidInputError("empty confidence sample set")
    return float(((b - a) ** 2).mean())


@dataclass
class Batch:
    """Training rows: class rows (high-level) + confidence rows (low-level)."""

    x_high: np.ndarray
    y: np.ndarray
    x_low: np.ndarray
    t_conf: np.ndarray


def loss_and_grads(model: DualHeadModel, batch: Batch,
                   class_weights: Optional[np.ndarray] = None):
    """Total loss (cls + alpha * conf) and gradients for every parameter."""
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    n = batch.x_high.shape[0]
    m = batch.x_low.shape[0]

    # class branch
    h1 = np.tanh(batch.x_high @ p["w1"] + p["b1"])
    h2 = np.tanh(h1 @ p["w2"] + p["b2"])
    logits = h2 @ p["wc"] + p["bc"]
    probs = _softmax(logits)
    y = batch.y.astype(np.int64)
    picked = np.clip(probs[np.arange(n), y], 1e-12, None)
    if class_weights is None:
        row_w = np.full(n, 1.0 / n)
        l_cls = float(-np.log(picked).mean())
    else:
        w = np.asarray(class_weights, dtype=np.float64)[y]
        row_w = w / w.sum()
        l_cls = float((row_w * -np.log(picked)).sum())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= row_w[:, None]
    grads["wc"] = h2.T @ dlogits
    grads["bc"] = dlogits.sum(axis=0)
    dh2 = (dlogits @ p["wc"].T) * (1.0 - h2 * h2)
    grads["w2"] = h1.T @ dh2
    grads["b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ p["w2"].T) * (1.0 - h1 * h1)
    grads["w1"] = batch.x_high.T @ dh1
    grads["b1"] = dh1.sum(axis=0)

    # confidence branch
    l_conf = 0.0
    if m > 0:
        g = np.tanh(batch.x_low @ p["v1"] + p["c1"])
        z = (g @ p["v2"] + p["c2"])[:, 0]
        chat = 1.0 / (1.0 + np.exp(-z))
        diff = chat - batch.t_conf
        l_conf = float((diff * diff).mean())
        dz = (2.0 / m) * diff * chat * (1.0 - chat) * model.alpha
        grads["v2"] = g.T @ dz[:, None]
        grads["c2"] = np.array([dz.sum()])
        dg = np.outer(dz, p["v2"][:, 0]) * (1.0 - g * g)
        grads["v1"] = batch.x_low.T @ dg
        grads["c1"] = dg.sum(axis=0)

    total = l_cls + model.alpha * l_conf
    return total, l_cls, l_conf, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class PairExamples:
    """Prepared rows for one augmented pair (all frames pooled)."""

    x_high: np.ndarray
    y: np.ndarray
    x_low: np.ndarray
    t_conf: np.ndarray


def build_examples(pair, voxel_size: float, conf_params: ConfidenceParams,
                   class_rows_per_frame: int, conf_pairs_per_frame: int,
                   seed: int, workers: int = 1,
                   supervise_radius: float = 1.0) -> PairExamples:
    """Voxel-level class rows + point-level confidence rows for one pair.

    Class rows keep every changed voxel and subsample static voxels to the
    per-frame cap; confidence targets come from the closed-form law on
    sampled points, paired with their voxel's low-level features.

    Map voxels labelled as removed but farther than ``supervise_radius`` from
    every scan point are left out of the class rows: a single frame cannot
    attest a removal it does not see, and supervising those voxels teaches
    the classifier to read mere absence of scan returns as change.
    """
    xh, yy, xl, tt = [], [], [], []
    rng = make_rng(seed, 5)
    for frame, scan in enumerate(pair.scans):
        mv, sv = voxel_features(pair.map, scan, voxel_size, pair.ground,
                                tau_ocl=conf_params.tau_ocl, workers=workers)
        rows = []
        labs = []
        for dom_cloud, vf in ((pair.map, mv), (scan, sv)):
            if dom_cloud.labels is None:
                raise InvalidInputError("training pairs must carry labels")
            vl = _majority_labels(vf.inverse, dom_cloud.labels, len(vf.keys))
            if dom_cloud is pair.map:
                seen = (vl != NEGATIVE) | (vf.high[:, 3] <= supervise_radius)
                rows.append(vf.high[seen])
                labs.append(vl[seen])
                continue
            rows.append(vf.high)
            labs.append(vl)
        rows = np.concatenate(rows)
        labs = np.concatenate(labs)
        changed = np.flatnonzero(labs != 0)
        static = np.flatnonzero(labs == 0)
        n_static = min(len(static), max(class_rows_per_frame - len(changed), 0))
        keep = np.concatenate([changed, rng.choice(static, size=n_static, replace=False)])
        xh.append(rows[keep])
        yy.append(labs[keep])

        count = min(conf_pairs_per_frame, len(pair.map) + len(scan))
        for smp in sample_pairs(pair.map, scan, count, int(rng.integers(2 ** 62)),
                                conf_params):
            vf = sv if smp.domain == 1 else mv
            xl.append(vf.low[vf.inverse[smp.index]])
            tt.append(smp.target)
    return PairExamples(np.concatenate(xh), np.concatenate(yy),
                        np.array(xl), np.array(tt))


def _eval_loss(model, examples: List[PairExamples], class_weights):
    xh = np.concatenate([e.x_high for e in examples])
    yy = np.concatenate([e.y for e in examples])
    xl = np.concatenate([e.x_low for e in examples])
    tt = np.concatenate([e.t_conf for e in examples])
    probs = class_probabilities(model, xh)
    l_cls = loss_cls(probs, yy, class_weights)
    l_conf = loss_conf(confidence_estimates(model, xl), tt)
    return l_cls + model.alpha * l_conf, l_cls, l_conf


def class_weight_vector(labels: np.ndarray) -> np.ndarray:
    """Inverse-frequency class weights, normalized to unit mean exposure."""
    counts = np.bincount(labels.astype(np.int64), minlength=3).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    w = counts.sum() / (3.0 * counts)
    return w / (w * counts / counts.sum()).sum()


def fit_examples(model: DualHeadModel, train: List[PairExamples],
                 val: List[PairExamples], epochs: int, batch_pairs: int,
                 lr: float, seed: int,
                 class_weights: Optional[np.ndarray] = None):
    """Adam optimization over pair-level batches; keeps the best-validation
    snapshot.  Returns (best model, history dict)."""
    if not train or not val:
        raise InvalidParameterError("need non-empty train and validation splits")
    model = model.copy()
    rng = make_rng(seed, 11)
    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    history = {"train": [], "val": [], "val_cls": [], "val_conf": []}
    best = (np.inf, model.copy())
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        epoch_losses = []
        for start in range(0, len(order), batch_pairs):
            chunk = [train[i] for i in order[start:start + batch_pairs]]
            batch = Batch(np.concatenate([e.x_high for e in chunk]),
                          np.concatenate([e.y for e in chunk]),
                          np.concatenate([e.x_low for e in chunk]),
                          np.concatenate([e.t_conf for e in chunk]))
            total, _, _, grads = loss_and_grads(model, batch, class_weights)
            if not np.isfinite(total):
                raise TrainingDivergedError(epoch)
            step += 1
            for k in model.params:
                g = grads[k]
                m_state[k] = beta1 * m_state[k] + (1 - beta1) * g
                v_state[k] = beta2 * v_state[k] + (1 - beta2) * g * g
                mhat = m_state[k] / (1 - beta1 ** step)
                vhat = v_state[k] / (1 - beta2 ** step)
                model.params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
            epoch_losses.append(total)
        val_total, val_cls, val_conf = _eval_loss(model, val, class_weights)
        if not np.isfinite(val_total):
            raise TrainingDivergedError(epoch)
        history["train"].append(float(np.mean(epoch_losses)))
        history["val"].append(val_total)
        history["val_cls"].append(val_cls)
        history["val_conf"].append(val_conf)
        if val_total < best[0]:
            best = (val_total, model.copy())
    return best[1], history


def train(model: DualHeadModel, pairs, epochs: int = 50, batch_pairs: int = 2,
          lr: float = 1e-3, seed: int = 0, voxel_size: float = 0.1,
          conf_params: ConfidenceParams = ConfidenceParams(),
          val_split: float = 0.1, class_rows_per_frame: int = 3000,
          conf_pairs_per_frame: int = 1200, use_class_weights: bool = True,
          workers: int = 1):
    """Train on augmented pairs; returns (best model, history).

    Pairs are split into train/validation (at least one validation pair), the
    class head consumes high-level features, the confidence head low-level
    ones, and the returned snapshot minimizes the total validation loss.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise InvalidParameterError("need at least 2 pairs (train + validation)")
    examples = [build_examples(p, voxel_size, conf_params, class_rows_per_frame,
                               conf_pairs_per_frame, seed + 1000 * i, workers=workers)
                for i, p in enumerate(pairs)]
    rng = make_rng(seed, 3)
    order = rng.permutation(len(examples))
    n_val = max(1, int(round(val_split * len(examples))))
    val = [examples[i] for i in order[:n_val]]
    tr = [examples[i] for i in order[n_val:]]
    weights = None
    if use_class_weights:
        weights = class_weight_vector(np.concatenate([e.y for e in tr]))
    return fit_examples(model, tr, val, epochs, batch_pairs, lr, seed,
                        class_weights=weights)


def infer(model: DualHeadModel, map_cloud: PointCloud, scan_cloud: PointCloud,
          voxel_size: float, ground: GroundModel, tau_ocl: float = 3.0,
          workers: int = 1):
    """Per-point (class, confidence) for both clouds.

    Returns ((map_classes, map_conf), (scan_classes, scan_conf)); classes are
    argmax of the class head with ties to static, confidences the squashed
    confidence-head output.
    """
    mv, sv = voxel_features(map_cloud, scan_cloud, voxel_size, ground,
                            tau_ocl=tau_ocl, workers=workers)
    out = []
    for vf in (mv, sv):
        probs = class_probabilities(model, vf.high)
        chat = confidence_estimates(model, vf.low)
        out.append((classes_from_probs(probs)[vf.inverse], chat[vf.inverse]))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# model file format
# ---------------------------------------------------------------------------

_MAGIC = b"CHMK"
_VERSION = 1


def save_model(model: DualHeadModel, path) -> None:
    """Versioned binary: magic, version, dims, then float32 parameters."""
    p = model.params
    hidden = p["w1"].shape[1]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIIf", _VERSION, model.low_dim, model.high_dim,
                            hidden, model.alpha))
        for name in _PARAM_ORDER:
            f.write(np.ascontiguousarray(p[name], dtype="<f4").tobytes())


def load_model(path) -> DualHeadModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise InvalidModelError(f"{path}: bad magic")
    version, low_dim, high_dim, hidden, alpha = struct.unpack_from("<IIIIf", data, 4)
    if version != _VERSION:
        raise InvalidModelError(f"{path}: unsupported version {version}")
    shapes = [("w1", (high_dim, hidden)), ("b1", (hidden,)),
              ("w2", (hidden, hidden)), ("b2", (hidden,)),
              ("wc", (hidden, 3)), ("bc", (3,)),
              ("v1", (low_dim, hidden)), ("c1", (hidden,)),
              ("v2", (hidden, 1)), ("c2", (1,))]
    offset = 4 + struct.calcsize("<IIIIf")
    params = {}
    for name, shape in shapes:
        n = int(np.prod(shape))
        if (len(data) - offset) // 4 < n:
            raise InvalidModelError(f"{path}: truncated parameter block {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
        params[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * n
    return DualHeadModel(params, float(alpha))
