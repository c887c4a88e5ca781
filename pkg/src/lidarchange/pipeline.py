"""End-to-end scan-vs-map processing and experiment orchestration.

One frame goes through: crop the map around the scan, run a detector
(dual-head model or a classical baseline), gate the scan-side positive
changes by low confidence, pool the map-side confidence over vertical
columns, and fuse the gated observation into the per-point log-odds state.
After all frames the map is finalized and scored.

Column pooling exists because the raw confidence of a truly removed object
is low (nothing of it is seen), yet the sensor demonstrably observed its
spot — the revealed ground right under it.  Taking the maximum confidence
over a small horizontal neighbourhood's column transfers that evidence
upward, while fully occluded regions (where the whole column is unseen)
stay gated out.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentedPair, extract_objects, generate_pair
from .config import PipelineConfig
from .confidence import ConfidenceParams, confidence_of
from .detect import (DualHeadModel, class_probabilities, classes_from_probs,
                     confidence_estimates, detect_occupancy, detect_visibility,
                     init_model, train, voxel_features)
from .errors import EmptyInputError, InvalidParameterError
from .evaluation import map_scores, scan_confusion
from .geometry import (PerturbationSpec, PointCloud, Pose, pack_voxel_keys,
                       perturb_pose, voxel_indices)
from .io import Session
from .mapping import GroundModel, build_static_map, segment_ground
from .mapupdate import (GateThresholds, LogOddsMap, extract_scan_changes,
                        removal_mask, update_map)
from .synthscene import (SceneTruth, SensorSpec, World, circle_trajectory,
                         generate_sessions, inject_hd_clutter, random_world)

SETTINGS = ("dualhead", "ungated", "occupancy", "visibility", "oracle")


def resolve_threads(requested: int = 0) -> int:
    """Worker count: the request, or min(8, cpu count) when zero."""
    if requested > 0:
        return int(requested)
    return min(8, os.cpu_count() or 1)


def dedup_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Indices of one representative point (the first) per occupied voxel."""
    keys = pack_voxel_keys(voxel_indices(points, voxel_size))
    _, first = np.unique(keys, return_index=True)
    return np.sort(first)


def crop_indices(map_points: np.ndarray, scan_points: np.ndarray,
                 margin: float) -> np.ndarray:
    """Map rows inside the scan's bounding box grown by ``margin``.

    Points farther than the occlusion cutoff from any scan point can neither
    be observed nor influence scan features, so dropping them changes
    nothing downstream while bounding the per-frame working set.
    """
    lo = scan_points.min(axis=0) - margin
    hi = scan_points.max(axis=0) + margin
    inside = np.all((map_points >= lo) & (map_points <= hi), axis=1)
    return np.flatnonzero(inside)


def column_smooth(points: np.ndarray, values: np.ndarray,
                  radius: float) -> np.ndarray:
    """Per point, the max of ``values`` over the vertical columns of the
    3x3 horizontal grid cells (cell size ``radius``) around it."""
    if radius <= 0:
        return np.asarray(values, dtype=np.float64).copy()
    bias = np.int64(1) << 20
    c = np.floor(points[:, :2] / radius).astype(np.int64) + bias
    keys = (c[:, 0] << 21) | c[:, 1]
    uniq, inv = np.unique(keys, return_inverse=True)
    cell_max = np.full(len(uniq), -np.inf)
    np.maximum.at(cell_max, inv, values)
    pooled = np.full(len(uniq), -np.inf)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            t = uniq + (np.int64(dx) << 21) + dy
            pos = np.searchsorted(uniq, t)
            pos_c = np.minimum(pos, len(uniq) - 1)
            found = uniq[pos_c] == t
            pooled = np.maximum(pooled, np.where(found, cell_max[pos_c], -np.inf))
    return pooled[inv]


def soften_classes(classes: np.ndarray, p_hit: float = 0.8) -> np.ndarray:
    """Hard class decisions as probability rows (p_hit on the decision)."""
    probs = np.full((len(classes), 3), (1.0 - p_hit) / 2.0)
    probs[np.arange(len(classes)), classes.astype(np.int64)] = p_hit
    return probs


@dataclass
class ScanObservation:
    """One frame's detector output, ready for gating and fusion."""

    scan_classes: np.ndarray
    scan_conf: np.ndarray
    scan_changes: np.ndarray      # indices passing the scan gate
    map_indices: np.ndarray       # cropped map rows (into the full map)
    map_probs: np.ndarray         # (M, 3) observation probabilities
    map_gate_conf: np.ndarray     # (M,) confidence used by the map gate


def _closed_form_conf(a: PointCloud, b: PointCloud, params: ConfidenceParams,
                      workers: int) -> np.ndarray:
    d = b.kdtree().query(a.points, workers=workers)[0]
    return confidence_of(d, params)


def process_scan(setting: str, model: Optional[DualHeadModel],
                 map_cloud: PointCloud, scan_cloud: PointCloud,
                 cfg: PipelineConfig, ground: GroundModel,
                 gates: GateThresholds, sensor_pose: Optional[Pose] = None,
                 voxel_size: Optional[float] = None,
                 workers: int = 1) -> ScanObservation:
    """Detect changes for one scan against the map under a named setting.

    ``ungated`` shares the dual-head detector; the caller expresses the
    ablation through the gate thresholds.  ``oracle`` replays ground-truth
    labels with closed-form confidences and bounds what fusion can achieve.
    """
    if setting not in SETTINGS:
        raise InvalidParameterError(f"unknown setting {setting!r}")
    voxel = cfg.voxel_size if voxel_size is None else voxel_size
    conf_params = ConfidenceParams(cfg.conf_lambda, cfg.tau_vox, cfg.tau_ocl)
    idx = crop_indices(map_cloud.points, scan_cloud.points, cfg.tau_ocl)
    if len(idx) == 0:
        raise EmptyInputError("no map points near the scan")
    cropped = map_cloud if len(idx) == len(map_cloud) else map_cloud.subset(idx)

    if setting in ("dualhead", "ungated"):
        if model is None:
            raise InvalidParameterError(f"setting {setting!r} needs a model")
        mv, sv = voxel_features(cropped, scan_cloud, voxel, ground,
                                tau_ocl=cfg.tau_ocl, workers=workers)
        map_probs = class_probabilities(model, mv.high)[mv.inverse]
        scan_probs = class_probabilities(model, sv.high)
        scan_classes = classes_from_probs(scan_probs)[sv.inverse]
        if cfg.gate_source == "oracle":
            map_conf = _closed_form_conf(cropped, scan_cloud, conf_params, workers)
            scan_conf = _closed_form_conf(scan_cloud, cropped, conf_params, workers)
        else:
            map_conf = confidence_estimates(model, mv.low)[mv.inverse]
            scan_conf = confidence_estimates(model, sv.low)[sv.inverse]
    elif setting == "occupancy":
        mc, sc = detect_occupancy(cropped, scan_cloud, voxel)
        map_probs = soften_classes(mc)
        scan_classes = sc
        map_conf = np.ones(len(cropped))
        scan_conf = np.zeros(len(scan_cloud))
    elif setting == "visibility":
        if sensor_pose is None:
            raise InvalidParameterError("visibility setting needs the sensor pose")
        mc, sc = detect_visibility(cropped, scan_cloud, sensor_pose,
                                   math.radians(cfg.angular_res_deg),
                                   cfg.range_margin)
        map_probs = soften_classes(mc)
        scan_classes = sc
        map_conf = np.ones(len(cropped))
        scan_conf = np.zeros(len(scan_cloud))
    else:  # oracle
        if cropped.labels is None or scan_cloud.labels is None:
            raise InvalidParameterError("oracle setting needs labeled clouds")
        map_probs = soften_classes(cropped.labels, 0.98)
        scan_classes = scan_cloud.labels.copy()
        map_conf = _closed_form_conf(cropped, scan_cloud, conf_params, workers)
        scan_conf = _closed_form_conf(scan_cloud, cropped, conf_params, workers)

    gate_conf = column_smooth(cropped.points, map_conf, cfg.conf_smoothing_radius)
    changes = extract_scan_changes((scan_classes, scan_conf), gates.tau_scan)
    return ScanObservation(scan_classes, scan_conf, changes, idx, map_probs,
                           gate_conf)


# ---------------------------------------------------------------------------
# pair-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class PairResult:
    iou: float
    tc: int
    fc: int
    fs: int
    pr: float
    rr: float
    f1: float
    ms_per_scan: float


@dataclass
class SettingResult:
    iou: float
    pr: float
    rr: float
    f1: float
    ms_per_scan: float


def perturbation_from_config(cfg: PipelineConfig, level: float,
                             seed: int) -> PerturbationSpec:
    rp = math.radians(cfg.perturb_sigma_rp_deg)
    yaw = math.radians(cfg.perturb_sigma_yaw_deg)
    return PerturbationSpec(
        level=level,
        sigma_t=(cfg.perturb_sigma_t ** 2) * np.eye(3),
        sigma_r=np.diag([rp * rp, rp * rp, yaw * yaw]),
        bound_t=cfg.bound_t,
        bound_rp=math.radians(cfg.bound_rp_deg),
        bound_yaw=math.radians(cfg.bound_yaw_deg),
        seed=seed,
    )


def evaluate_pair(pair: AugmentedPair, cfg: PipelineConfig, setting: str,
                  model: Optional[DualHeadModel], noise_level: float = 0.0,
                  voxel_size: Optional[float] = None,
                  gates: Optional[GateThresholds] = None, pair_index: int = 0,
                  workers: int = 1) -> PairResult:
    """Full multi-frame pipeline on one labeled pair, scored both ways.

    Registration noise is drawn once per pair — it models the session-level
    map-to-scan alignment error, so every frame is displaced by the same
    transform.  High-dynamic rows are removed up front when enabled,
    otherwise processed but excluded from the metrics.
    """
    voxel = cfg.voxel_size if voxel_size is None else voxel_size
    if gates is None:
        gates = GateThresholds(cfg.tau_scan, cfg.tau_map)
    if setting == "ungated":
        gates = GateThresholds(1.0, 0.0)

    m = pair.map
    map_hd = pair.map_hd
    if cfg.hd_removal and map_hd is not None:
        m = m.subset(np.flatnonzero(~map_hd))
        map_hd = None
    if cfg.dedup_map:
        didx = dedup_indices(m.points, voxel)
        m = m.subset(didx)
        if map_hd is not None:
            map_hd = map_hd[didx]

    err = None
    if noise_level > 0:
        spec = perturbation_from_config(
            cfg, noise_level, cfg.seed * 1_000_003 + 7919 * pair_index)
        err = perturb_pose(Pose.identity(), spec)

    state = LogOddsMap.uniform(len(m), cfg.logodds_clamp)
    ious: List[float] = []
    tc = fc = fs = 0
    elapsed = []
    for i, scan in enumerate(pair.scans):
        hd = None if pair.scan_hd is None else pair.scan_hd[i]
        if cfg.hd_removal and hd is not None:
            scan = scan.subset(np.flatnonzero(~hd))
            hd = None
        pose = pair.poses[i]
        if err is not None:
            scan = scan.replace(points=err.apply(scan.points))
        t0 = time.perf_counter()
        obs = process_scan(setting, model, m, scan, cfg, pair.ground, gates,
                           sensor_pose=pose, voxel_size=voxel, workers=workers)
        state = update_map(state, (obs.map_probs, obs.map_gate_conf), gates,
                           indices=obs.map_indices)
        elapsed.append(time.perf_counter() - t0)
        pred = np.zeros(len(scan), dtype=np.uint8)
        pred[obs.scan_changes] = 1
        counts = scan_confusion(pred, scan.labels, exclude_mask=hd)
        ious.append(counts.iou)
        tc += counts.tc
        fc += counts.fc
        fs += counts.fs

    kept = ~removal_mask(state, cfg.decision_threshold)
    scores = map_scores(m.labels, kept, exclude_mask=map_hd)
    if cfg.micro_iou:
        denom = tc + fc + fs
        iou = 1.0 if denom == 0 else tc / denom
    else:
        iou = float(np.mean(ious))
    return PairResult(iou, tc, fc, fs, scores.pr, scores.rr, scores.f1,
                      1000.0 * float(np.mean(elapsed)))


def evaluate_pairs(pairs: Sequence[AugmentedPair], cfg: PipelineConfig,
                   setting: str, model: Optional[DualHeadModel],
                   noise_level: float = 0.0, voxel_size: Optional[float] = None,
                   tau_scan: Optional[float] = None,
                   tau_map: Optional[float] = None,
                   workers: int = 1) -> SettingResult:
    """Aggregate over pairs: per-pair means (or pooled IoU counts when the
    micro flag is set)."""
    if not pairs:
        raise InvalidParameterError("no pairs to evaluate")
    gates = GateThresholds(cfg.tau_scan if tau_scan is None else tau_scan,
                           cfg.tau_map if tau_map is None else tau_map)
    results = [evaluate_pair(p, cfg, setting, model, noise_level=noise_level,
                             voxel_size=voxel_size, gates=gates, pair_index=i,
                             workers=workers)
               for i, p in enumerate(pairs)]
    if cfg.micro_iou:
        tc = sum(r.tc for r in results)
        fc = sum(r.fc for r in results)
        fs = sum(r.fs for r in results)
        denom = tc + fc + fs
        iou = 1.0 if denom == 0 else tc / denom
    else:
        iou = float(np.mean([r.iou for r in results]))
    return SettingResult(iou,
                         float(np.mean([r.pr for r in results])),
                         float(np.mean([r.rr for r in results])),
                         float(np.mean([r.f1 for r in results])),
                         float(np.mean([r.ms_per_scan for r in results])))


def evaluate_sessions(model: Optional[DualHeadModel], cfg: PipelineConfig,
                      setting: str, prior: Session, current: Session,
                      noise_level: float = 0.0,
                      voxel_size: Optional[float] = None,
                      tau_scan: Optional[float] = None,
                      tau_map: Optional[float] = None,
                      workers: int = 1) -> SettingResult:
    """Real two-session evaluation: prior map vs current scans.

    Both sessions must carry ground-truth labels (map side 0/2, scan side
    0/1), as produced by the synthetic raycaster on a world with scheduled
    changes.  Scoring mirrors ``evaluate_pair``.
    """
    voxel = cfg.voxel_size if voxel_size is None else voxel_size
    gates = GateThresholds(cfg.tau_scan if tau_scan is None else tau_scan,
                           cfg.tau_map if tau_map is None else tau_map)
    if setting == "ungated":
        gates = GateThresholds(1.0, 0.0)
    map_hd = None
    if cfg.hd_removal or all(x is None for x in prior.dynamic_masks):
        m = build_static_map(prior)
    else:
        # keep the marked rows in the map but exclude them from scoring
        m = build_static_map(Session(prior.scans))
        map_hd = np.concatenate(
            [np.zeros(len(cloud), dtype=bool) if msk is None else msk
             for (cloud, _, _), msk in zip(prior.scans, prior.dynamic_masks)])
    if m.labels is None:
        raise InvalidParameterError("prior session must carry labels")
    if cfg.dedup_map:
        didx = dedup_indices(m.points, voxel)
        m = m.subset(didx)
        if map_hd is not None:
            map_hd = map_hd[didx]
    ground = segment_ground(m, cfg.ground_threshold)[0]

    err = None
    if noise_level > 0:
        spec = perturbation_from_config(cfg, noise_level, cfg.seed * 1_000_003)
        err = perturb_pose(Pose.identity(), spec)

    state = LogOddsMap.uniform(len(m), cfg.logodds_clamp)
    ious: List[float] = []
    tc = fc = fs = 0
    elapsed = []
    for i, ((cloud, pose, _), mask) in enumerate(zip(current.scans,
                                                     current.dynamic_masks)):
        if cloud.labels is None:
            raise InvalidParameterError("current session must carry labels")
        hd = mask
        if cfg.hd_removal and hd is not None:
            cloud = cloud.subset(np.flatnonzero(~hd))
            hd = None
        scan = cloud.replace(points=pose.apply(cloud.points))
        if err is not None:
            scan = scan.replace(points=err.apply(scan.points))
        t0 = time.perf_counter()
        obs = process_scan(setting, model, m, scan, cfg, ground, gates,
                           sensor_pose=pose, voxel_size=voxel, workers=workers)
        state = update_map(state, (obs.map_probs, obs.map_gate_conf), gates,
                           indices=obs.map_indices)
        elapsed.append(time.perf_counter() - t0)
        pred = np.zeros(len(scan), dtype=np.uint8)
        pred[obs.scan_changes] = 1
        counts = scan_confusion(pred, scan.labels, exclude_mask=hd)
        ious.append(counts.iou)
        tc += counts.tc
        fc += counts.fc
        fs += counts.fs

    kept = ~removal_mask(state, cfg.decision_threshold)
    scores = map_scores(m.labels, kept, exclude_mask=map_hd)
    if cfg.micro_iou:
        denom = tc + fc + fs
        iou = 1.0 if denom == 0 else tc / denom
    else:
        iou = float(np.mean(ious))
    return SettingResult(iou, scores.pr, scores.rr, scores.f1,
                         1000.0 * float(np.mean(elapsed)))


# ---------------------------------------------------------------------------
# scene preparation and bundles
# ---------------------------------------------------------------------------

def sensor_from_config(cfg: PipelineConfig, center=(0.0, 0.0)) -> SensorSpec:
    poses = circle_trajectory(cfg.traj_frames, cfg.traj_radius,
                              cfg.traj_height, center)
    return SensorSpec(poses, hres=math.radians(cfg.sensor_hres_deg),
                      vfov=math.radians(cfg.sensor_vfov_deg),
                      channels=cfg.sensor_channels, max_range=cfg.sensor_range,
                      sigma=cfg.sensor_sigma)


def _instance_masks(instances: Sequence[np.ndarray], world: World) -> List[np.ndarray]:
    obj_ids = np.array([b.id for b in world.boxes if b.kind == "object"],
                       dtype=np.int64)
    out = []
    for ids in instances:
        ids64 = np.asarray(ids, dtype=np.int64)
        out.append(np.where(np.isin(ids64, obj_ids), ids64, -1))
    return out


@dataclass
class ScenePrep:
    """One synthetic world with its sessions and augmentation inputs."""

    world: World
    sensor: SensorSpec
    session: Session          # prior session used for pair generation
    current: Session
    truth: SceneTruth
    db: object                # ObjectDatabase
    ground: GroundModel
    ground_inliers: np.ndarray


def prepare_scene(cfg: PipelineConfig, seed: int, hd_fraction: float = 0.0,
                  occluders: Optional[int] = None) -> ScenePrep:
    """World -> sessions -> object database -> ground, optionally with
    high-dynamic clutter injected into the prior session (masked)."""
    world = random_world(
        seed, size=cfg.world_size, statics=cfg.world_statics,
        occluders=cfg.world_occluders if occluders is None else occluders,
        nc_changes=cfg.world_changes, pc_changes=cfg.world_changes,
        traj_radius=cfg.traj_radius)
    sensor = sensor_from_config(cfg)
    prior, current, truth = generate_sessions(world, sensor, seed)
    masks = _instance_masks(truth.instances_prior, world)
    db = extract_objects(prior, masks)
    base_map = build_static_map(prior)
    ground, inlier_idx = segment_ground(base_map, cfg.ground_threshold)
    inliers = base_map.points[inlier_idx]
    session = prior
    if hd_fraction > 0:
        session = inject_hd_clutter(prior, hd_fraction, seed)
    return ScenePrep(world, sensor, session, current, truth, db, ground, inliers)


def make_pairs(scene: ScenePrep, cfg: PipelineConfig, count: int, seed: int,
               keep_masked: bool = False) -> List[AugmentedPair]:
    return [generate_pair(scene.session, scene.db, cfg.n_pc, cfg.n_nc,
                          seed=seed + 613 * i, ground=scene.ground,
                          ground_inliers=scene.ground_inliers,
                          keep_masked=keep_masked)
            for i in range(count)]


def train_from_scene(scene: ScenePrep, cfg: PipelineConfig,
                     workers: int = 1) -> Tuple[DualHeadModel, dict]:
    """Pseudo-change pairs from the scene's prior session, then training."""
    pairs = make_pairs(scene, cfg, cfg.pairs, cfg.seed * 1_000_003 + 101)
    conf_params = ConfidenceParams(cfg.conf_lambda, cfg.tau_vox, cfg.tau_ocl)
    return train(init_model(cfg.seed, alpha=cfg.alpha), pairs, epochs=cfg.epochs,
                 batch_pairs=cfg.batch_pairs, lr=cfg.lr, seed=cfg.seed,
                 voxel_size=cfg.voxel_size, conf_params=conf_params,
                 val_split=cfg.val_split,
                 class_rows_per_frame=cfg.class_rows_per_frame,
                 conf_pairs_per_frame=cfg.conf_pairs_per_frame,
                 use_class_weights=cfg.class_weights, workers=workers)


@dataclass
class EvalBundle:
    model: DualHeadModel
    eval_pairs: List[AugmentedPair]
    workers: int


def prepare_bundle(cfg: PipelineConfig,
                   model: Optional[DualHeadModel] = None) -> EvalBundle:
    """Train on the seed world, hold out pairs from the next world seed."""
    workers = resolve_threads(cfg.threads)
    if model is None:
        scene = prepare_scene(cfg, cfg.seed)
        model, _ = train_from_scene(scene, cfg, workers=workers)
    held_out = prepare_scene(cfg, cfg.seed + 1)
    eval_pairs = make_pairs(held_out, cfg, cfg.eval_pairs,
                            cfg.seed * 1_000_003 + 500_009)
    return EvalBundle(model, eval_pairs, workers)


def evaluate_setting(bundle: EvalBundle, cfg: PipelineConfig, setting: str,
                     voxel_size: Optional[float] = None,
                     noise_level: float = 0.0,
                     tau_scan: Optional[float] = None,
                     tau_map: Optional[float] = None) -> SettingResult:
    return evaluate_pairs(bundle.eval_pairs, cfg, setting, bundle.model,
                          noise_level=noise_level, voxel_size=voxel_size,
                          tau_scan=tau_scan, tau_map=tau_map,
                          workers=bundle.workers)
