"""Composition-based pseudo-change generation.

Static objects tracked through a single session are snapshotted per frame
into an object database.  A training pair is then composed by inserting the
union of all snapshots of some objects into the map (negative changes) and
one per-frame snapshot of other objects into every scan (positive changes),
at collision-free placements on observed ground.  The two id sets are
disjoint, so a synthetic two-session dataset with exact labels falls out of
one real session.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (CollisionRejectedError, GenerationFailedError,
                     InvalidInputError, InvalidParameterError,
                     PlacementRejectedError)
from .geometry import NEGATIVE, POSITIVE, PointCloud, Pose, concat_clouds
from .io import Session, load_ply, save_ply
from .mapping import GroundModel, build_static_map, segment_ground
from .rng import make_rng


@dataclass(frozen=True)
class ObjectSnapshot:
    """Points of one object in one frame, in the global frame.

    ``footprint`` is the xy bounding box (xmin, ymin, xmax, ymax).
    """

    points: PointCloud
    object_id: int
    frame_index: int
    footprint: np.ndarray

    def __post_init__(self):
        if len(self.points) == 0:
            raise InvalidInputError("snapshot must be non-empty")
        fp = np.asarray(self.footprint, dtype=np.float64).reshape(4)
        xy = self.points.points[:, :2]
        # tolerance covers the float32 round-trip through PLY files
        if (xy[:, 0].min() < fp[0] - 1e-5 or xy[:, 1].min() < fp[1] - 1e-5
                or xy[:, 0].max() > fp[2] + 1e-5 or xy[:, 1].max() > fp[3] + 1e-5):
            raise InvalidInputError("footprint does not contain the points")
        object.__setattr__(self, "footprint", fp)


class ObjectDatabase:
    """Ordered snapshots per object id."""

    def __init__(self, objects: Optional[Dict[int, List[ObjectSnapshot]]] = None):
        self.objects: Dict[int, List[ObjectSnapshot]] = {}
        for k, snaps in (objects or {}).items():
            if not snaps:
                raise InvalidInputError(f"object {k} has no snapshots")
            self.objects[int(k)] = sorted(snaps, key=lambda s: s.frame_index)

    @property
    def count(self) -> int:
        return len(self.objects)

    def ids(self) -> List[int]:
        return sorted(self.objects)

    def union_points(self, object_id: int) -> PointCloud:
        """All snapshots of one object merged into a single cloud."""
        return concat_clouds([s.points for s in self.objects[object_id]])


def extract_objects(session: Session, instance_masks: Sequence[np.ndarray]) -> ObjectDatabase:
    """Group per-frame points by instance id into an ObjectDatabase.

    ``instance_masks`` holds one signed-integer id per point per scan;
    negative ids mean background/shell and are ignored.  Points of ids that
    the session's dynamic masks flag are dropped; an id left with zero points
    in a frame is skipped for that frame with a warning.  Snapshots are
    stored in the global frame.
    """
    if len(instance_masks) != len(session):
        raise InvalidInputError("one instance-mask array per scan required")
    per_object: Dict[int, List[ObjectSnapshot]] = {}
    for frame, ((cloud, pose, _), ids) in enumerate(zip(session.scans, instance_masks)):
        ids = np.asarray(ids)
        if len(ids) != len(cloud):
            raise InvalidInputError(f"frame {frame}: instance ids length mismatch")
        dyn = session.dynamic_masks[frame]
        world_pts = pose.apply(cloud.points)
        for k in np.unique(ids[ids.astype(np.int64) >= 0]):
            sel = ids == k
            if dyn is not None:
                sel = sel & ~dyn
            if not sel.any():
                warnings.warn(f"object {int(k)} has zero points in frame {frame}; skipped")
                continue
            pts = world_pts[sel]
            fp = np.array([pts[:, 0].min(), pts[:, 1].min(),
                           pts[:, 0].max(), pts[:, 1].max()])
            snap = ObjectSnapshot(PointCloud(pts), int(k), frame, fp)
            per_object.setdefault(int(k), []).append(snap)
    return ObjectDatabase(per_object)


def _footprint_of(points: np.ndarray) -> np.ndarray:
    return np.array([points[:, 0].min(), points[:, 1].min(),
                     points[:, 0].max(), points[:, 1].max()])


def _footprints_collide(a: np.ndarray, b: np.ndarray, gap: float) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0]
                or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def place_points(points: np.ndarray, placement: Tuple[float, float, float],
                 ground: GroundModel) -> np.ndarray:
    """Object points moved to a placement: yaw about the vertical at the
    footprint centre, centre translated to (x, y), lowest point snapped onto
    the ground plane."""
    x, y, yaw = placement
    fp = _footprint_of(points)
    cx, cy = (fp[0] + fp[2]) / 2.0, (fp[1] + fp[3]) / 2.0
    c, s = np.cos(yaw), np.sin(yaw)
    p = points - [cx, cy, 0.0]
    rot = np.column_stack([c * p[:, 0] - s * p[:, 1],
                           s * p[:, 0] + c * p[:, 1], p[:, 2]])
    rot += [x, y, 0.0]
    heights = ground.height_of(rot)
    rot[:, 2] -= heights.min() / ground.normal[2]
    return rot


def insert_object(target: PointCloud, obj_points: np.ndarray,
                  placement: Tuple[float, float, float], ground: GroundModel,
                  label: int, ground_xy: Optional[np.ndarray] = None,
                  reserved: Sequence[np.ndarray] = (), gap: float = 0.1) -> PointCloud:
    """Insert an object into a cloud with the given change label.

    Preconditions: the placement must lie within 0.2 m (xy) of some observed
    ground point when ``ground_xy`` is given, and the placed footprint must
    stay at least ``gap`` away from every footprint in ``reserved``.
    """
    obj_points = np.asarray(obj_points, dtype=np.float64)
    if obj_points.ndim != 2 or obj_points.shape[1] != 3 or not len(obj_points):
        raise InvalidInputError("object points must be a non-empty (N, 3) array")
    x, y, _ = placement
    if ground_xy is not None and len(ground_xy):
        d2 = ((np.asarray(ground_xy)[:, :2] - [x, y]) ** 2).sum(axis=1)
        if d2.min() > 0.2 ** 2:
            raise PlacementRejectedError(f"({x:.2f}, {y:.2f}) is not near observed ground")
    placed = place_points(obj_points, placement, ground)
    fp = _footprint_of(placed)
    for other in reserved:
        if _footprints_collide(fp, np.asarray(other), gap):
            raise CollisionRejectedError("footprint overlaps a reserved footprint")
    n_new = len(placed)
    cloud_labels = target.labels
    if cloud_labels is None:
        cloud_labels = np.zeros(len(target), dtype=np.uint8)
    vis = target.visibility
    new_vis = None
    if vis is not None:
        fill = vis[0] if len(vis) else 0
        new_vis = np.concatenate([vis, np.full(n_new, fill, dtype=np.uint8)])
    return PointCloud(
        np.concatenate([target.points, placed]),
        labels=np.concatenate([cloud_labels, np.full(n_new, label, dtype=np.uint8)]),
        visibility=new_vis,
        confidences=None if target.confidences is None else np.concatenate(
            [target.confidences, np.zeros(n_new)]),
    )


@dataclass
class AugmentedPair:
    """One synthetic two-session training/evaluation unit.

    ``map`` carries labels in {0, 2} (visibility 0); every scan carries
    labels in {0, 1} (visibility 1) and is expressed in the global frame.
    ``poses`` are the session sensor poses, frame-aligned with ``scans``.
    """

    map: PointCloud
    scans: List[PointCloud]
    poses: List[Pose]
    pc_ids: List[int]
    nc_ids: List[int]
    ground: GroundModel
    # set only when high-dynamic points were kept rather than removed
    map_hd: Optional[np.ndarray] = None
    scan_hd: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        if set(self.pc_ids) & set(self.nc_ids):
            raise InvalidInputError("PC and NC object-id sets must be disjoint")
        if self.map_hd is not None and self.map_hd.shape != (len(self.map),):
            raise InvalidInputError("map_hd must flag every map point")
        if self.scan_hd is not None:
            for m, s in zip(self.scan_hd, self.scans):
                if m.shape != (len(s),):
                    raise InvalidInputError("scan_hd must flag every scan point")


def generate_pair(session: Session, db: ObjectDatabase, n_pc: int, n_nc: int,
                  seed: int, ground: Optional[GroundModel] = None,
                  ground_inliers: Optional[np.ndarray] = None,
                  max_retries: int = 100, keep_masked: bool = False) -> AugmentedPair:
    """Compose one labeled (map, scans) pair from a session and its objects.

    Samples ``n_pc + n_nc`` distinct ids; NC objects contribute the union of
    all their snapshots to the map, PC objects contribute one snapshot per
    frame to the corresponding scan, all at one placement per object drawn
    uniformly from observed ground at least 0.5 m inside the map's xy bounds.
    Original object footprints and previously placed ones are kept clear.

    With ``keep_masked`` the session's high-dynamic points are retained
    instead of removed, and the pair records which rows they occupy.
    """
    ids = db.ids()
    if n_pc < 0 or n_nc < 0 or n_pc + n_nc > len(ids):
        raise InvalidParameterError(
            f"need {n_pc}+{n_nc} distinct objects, database has {len(ids)}")
    if keep_masked:
        # rebuild without masks; rows then align with the session scan order
        base_map = build_static_map(Session(session.scans))
        hd_parts = [np.zeros(len(c), dtype=bool) if m is None else m.astype(bool)
                    for (c, _, _), m in zip(session.scans, session.dynamic_masks)]
        map_hd = np.concatenate(hd_parts)
    else:
        base_map = build_static_map(session)
        map_hd = None
    if ground is None or ground_inliers is None:
        clean = build_static_map(session) if keep_masked else base_map
        ground, inlier_idx = segment_ground(clean)
        ground_inliers = clean.points[inlier_idx]
    ground_xy = np.asarray(ground_inliers)[:, :2]

    lo = base_map.points[:, :2].min(axis=0) + 0.5
    hi = base_map.points[:, :2].max(axis=0) - 0.5
    interior = ground_xy[((ground_xy >= lo) & (ground_xy <= hi)).all(axis=1)]
    if not len(interior):
        raise GenerationFailedError("no interior ground available for placement")

    rng = make_rng(seed)
    chosen = list(rng.permutation(np.array(ids))[: n_pc + n_nc])
    pc_ids = [int(k) for k in chosen[:n_pc]]
    nc_ids = [int(k) for k in chosen[n_pc:]]

    # keep placements away from where the source objects actually stand
    reserved = [snap.footprint for k in ids for snap in db.objects[k]]
    placements = {}
    for k in pc_ids + nc_ids:
        obj_pts = db.union_points(k).points
        for attempt in range(max_retries + 1):
            xy = interior[rng.integers(len(interior))]
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            placed = place_points(obj_pts, (xy[0], xy[1], yaw), ground)
            fp = _footprint_of(placed)
            if all(not _footprints_collide(fp, o, 0.1) for o in reserved):
                placements[k] = (float(xy[0]), float(xy[1]), float(yaw))
                reserved.append(fp)
                break
        else:
            raise GenerationFailedError(
                f"object {k}: no collision-free placement in {max_retries} retries")

    aug_map = base_map.replace(labels=np.zeros(len(base_map), dtype=np.uint8))
    for k in nc_ids:
        aug_map = insert_object(aug_map, db.union_points(k).points, placements[k],
                                ground, NEGATIVE)
    if map_hd is not None:
        map_hd = np.concatenate([map_hd, np.zeros(len(aug_map) - len(map_hd),
                                                  dtype=bool)])

    scans = []
    poses = []
    scan_hd = [] if keep_masked else None
    for frame, ((cloud, pose, _), mask) in enumerate(zip(session.scans,
                                                         session.dynamic_masks)):
        pts = pose.apply(cloud.points)
        if mask is not None and not keep_masked:
            pts = pts[~mask]
        scan = PointCloud(pts, labels=np.zeros(len(pts), dtype=np.uint8),
                          visibility=np.ones(len(pts), dtype=np.uint8))
        for k in pc_ids:
            snaps = db.objects[k]
            snap = snaps[int(rng.integers(len(snaps)))]
            scan = insert_object(scan, snap.points.points, placements[k], ground,
                                 POSITIVE)
        if keep_masked:
            hd = np.zeros(len(scan), dtype=bool)
            if mask is not None:
                hd[: len(pts)] = mask
            scan_hd.append(hd)
        scans.append(scan)
        poses.append(pose)
    return AugmentedPair(aug_map, scans, poses, pc_ids, nc_ids, ground,
                         map_hd=map_hd, scan_hd=scan_hd)


def save_database(db: ObjectDatabase, out_dir) -> str:
    """Persist as obj<k>_frame<j>.ply files plus an index manifest."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for k in db.ids():
        for snap in db.objects[k]:
            name = f"obj{k}_frame{snap.frame_index}.ply"
            save_ply(snap.points, os.path.join(out_dir, name))
            lines.append("%d %d %s %.9g %.9g %.9g %.9g" % (
                k, snap.frame_index, name, *snap.footprint))
    index = os.path.join(out_dir, "index.txt")
    with open(index, "w") as f:
        f.write("\n".join(lines) + "\n")
    return index


def load_database(index_path) -> ObjectDatabase:
    base = os.path.dirname(os.path.abspath(index_path))
    per_object: Dict[int, List[ObjectSnapshot]] = {}
    with open(index_path) as f:
        for ln, raw in enumerate(f, start=1):
            tok = raw.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 7:
                raise InvalidInputError(f"{index_path}:{ln}: expected 7 fields")
            cloud = load_ply(os.path.join(base, tok[2]))
            snap = ObjectSnapshot(cloud, int(tok[0]), int(tok[1]),
                                  np.array(tok[3:7], dtype=np.float64))
            per_object.setdefault(int(tok[0]), []).append(snap)
    return ObjectDatabase(per_object)
