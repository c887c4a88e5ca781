"""Synthetic cuboid worlds and LiDAR raycasting with occlusion.

Worlds are collections of axis-aligned cuboids: a structural shell (floor,
boundary walls, interior occluder walls) plus scheduled objects that may be
present in the prior session ("map"), the current session ("scan"), or both.
Raycasting uses exact slab intersections, keeps the first hit per ray, and
adds Gaussian range noise, which makes every occlusion property checkable by
an independent segment-intersection test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .geometry import PointCloud, Pose, so3_exp
from .io import Session
from .rng import make_rng

PRIOR_SESSION = 0
CURRENT_SESSION = 1


@dataclass(frozen=True)
class Cuboid:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not (np.isfinite(lo).all() and np.isfinite(hi).all() and (hi > lo).all()):
            raise InvalidInputError("cuboid needs finite lo < hi per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def footprint(self) -> np.ndarray:
        return np.array([self.lo[0], self.lo[1], self.hi[0], self.hi[1]])


@dataclass(frozen=True)
class WorldBox:
    """One primitive: structural shell or scheduled object."""

    box: Cuboid
    id: int
    kind: str                 # "shell" | "object"
    in_map: bool = True       # present in the prior session
    in_scan: bool = True      # present in the current session

    def __post_init__(self):
        if self.kind not in ("shell", "object"):
            raise InvalidInputError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "shell" and not (self.in_map and self.in_scan):
            raise InvalidInputError("shell primitives must be present in both sessions")


@dataclass(frozen=True)
class World:
    """Floor extent, primitives, and the change schedule between two sessions."""

    extent: np.ndarray        # (xmin, ymin, xmax, ymax) of the floor
    boxes: List[WorldBox]
    seed: int = 0

    def __post_init__(self):
        ext = np.asarray(self.extent, dtype=np.float64).reshape(4)
        if not (ext[2] > ext[0] and ext[3] > ext[1]):
            raise InvalidInputError("extent must be (xmin, ymin, xmax, ymax)")
        ids = [b.id for b in self.boxes]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("primitive ids must be unique")
        pad = 1e-6
        for b in self.boxes:
            if b.kind == "object":
                fp = b.box.footprint()
                if (fp[0] < ext[0] - pad or fp[1] < ext[1] - pad
                        or fp[2] > ext[2] + pad or fp[3] > ext[3] + pad):
                    raise InvalidInputError(f"object {b.id} lies outside the floor extent")
        object.__setattr__(self, "extent", ext)

    def present(self, session: int) -> List[WorldBox]:
        if session == PRIOR_SESSION:
            return [b for b in self.boxes if b.in_map]
        if session == CURRENT_SESSION:
            return [b for b in self.boxes if b.in_scan]
        raise InvalidParameterError(f"session must be 0 or 1, got {session}")

    def change_label(self, box: WorldBox) -> int:
        if box.kind == "shell" or (box.in_map and box.in_scan):
            return 0
        return 2 if box.in_map else 1

    def trackable_ids(self) -> list:
        """Objects present in both sessions — usable as augmentation sources."""
        return sorted(b.id for b in self.boxes
                      if b.kind == "object" and b.in_map and b.in_scan)


@dataclass(frozen=True)
class SensorSpec:
    """Spinning-LiDAR model: pose trajectory plus ray grid and noise."""

    poses: Sequence[Pose]
    hres: float = math.radians(0.5)
    hfov: float = 2.0 * math.pi
    vfov: float = math.radians(30.0)
    channels: int = 16
    max_range: float = 30.0
    sigma: float = 0.01

    def __post_init__(self):
        if self.hres <= 0 or self.hfov <= 0 or self.vfov <= 0:
            raise InvalidParameterError("angular resolutions must be positive")
        if self.max_range <= 0 or self.sigma < 0 or self.channels < 1:
            raise InvalidParameterError("bad range/noise/channel specification")

    def ray_directions(self) -> np.ndarray:
        n_az = int(round(self.hfov / self.hres))
        az = -self.hfov / 2.0 + (np.arange(n_az) + 0.5) * self.hres
        el = np.linspace(-self.vfov / 2.0, self.vfov / 2.0, self.channels)
        azg, elg = np.meshgrid(az, el, indexing="ij")
        ce = np.cos(elg.ravel())
        return np.column_stack([ce * np.cos(azg.ravel()),
                                ce * np.sin(azg.ravel()),
                                np.sin(elg.ravel())])


def _first_hits(origin: np.ndarray, dirs: np.ndarray, boxes: List[Cuboid],
                max_range: float):
    """First-hit parameter t and box index per ray (inf / -1 when no hit)."""
    n = dirs.shape[0]
    if not boxes:
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
    lo = np.stack([b.lo for b in boxes])          # (B, 3)
    hi = np.stack([b.hi for b in boxes])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs                          # (N, 3), +-inf on zero components
        t1 = (lo[None] - origin) * inv[:, None, :]
        t2 = (hi[None] - origin) * inv[:, None, :]
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    zero = dirs == 0.0                            # (N, 3)
    inside = (origin >= lo) & (origin <= hi)      # (B, 3)
    z = zero[:, None, :]
    tlo = np.where(z, np.where(inside[None], -np.inf, np.inf), tlo)
    thi = np.where(z, np.where(inside[None], np.inf, -np.inf), thi)
    tenter = tlo.max(axis=2)
    texit = thi.min(axis=2)
    hit = (tenter <= texit) & (tenter > 1e-9)
    t = np.where(hit, tenter, np.inf)
    best = t.argmin(axis=1)
    tbest = t[np.arange(n), best]
    ok = np.isfinite(tbest) & (tbest <= max_range)
    best = np.where(ok, best, -1)
    tbest = np.where(ok, tbest, np.inf)
    return tbest, best


def raycast_scan(world: World, sensor: SensorSpec, frame: int, seed: int,
                 session: int = CURRENT_SESSION):
    """Cast one frame; returns (world-frame PointCloud, instance-id array).

    One ray per (azimuth, elevation) cell, first hit against every cuboid
    present in the given session, Gaussian range noise of the sensor's sigma.
    Rays without a hit inside max range are dropped.  Points carry the hit
    primitive's scheduled change label; ids are the primitive ids.
    """
    if not (0 <= frame < len(sensor.poses)):
        raise InvalidParameterError(f"frame {frame} outside trajectory")
    pose = sensor.poses[frame]
    present = world.present(session)
    dirs = sensor.ray_directions() @ pose.rotation.T
    origin = pose.translation
    t, box_idx = _first_hits(origin, dirs, [b.box for b in present], sensor.max_range)
    keep = box_idx >= 0
    t = t[keep]
    box_idx = box_idx[keep]
    dirs = dirs[keep]
    if sensor.sigma > 0:
        rng = make_rng(seed, session, frame)
        t = np.maximum(t + sensor.sigma * rng.standard_normal(t.shape), 1e-6)
    pts = origin + t[:, None] * dirs
    labels = np.array([world.change_label(b) for b in present], dtype=np.uint8)
    ids = np.array([b.id for b in present], dtype=np.uint32)
    cloud = PointCloud(pts, labels=labels[box_idx] if len(present) else None)
    return cloud, ids[box_idx] if len(present) else np.empty(0, dtype=np.uint32)


@dataclass
class SceneTruth:
    """Per-session instance ids and the set of augmentation-source object ids."""

    instances_prior: list
    instances_current: list
    trackable_ids: list


def generate_sessions(world: World, sensor: SensorSpec, seed: int):
    """Raycast both sessions over the full trajectory.

    Returns ``(prior, current, truth)``: two Sessions whose scans are in the
    sensor frame with ground-truth labels attached (objects present only in
    the prior session are negative changes, objects present only in the
    current one are positive changes), plus per-scan instance ids.
    """
    sessions = []
    instances = []
    for session_id in (PRIOR_SESSION, CURRENT_SESSION):
        scans = []
        iids = []
        for frame, pose in enumerate(sensor.poses):
            cloud, ids = raycast_scan(world, sensor, frame, seed, session=session_id)
            local = cloud.replace(points=pose.inverse().apply(cloud.points))
            scans.append((local, pose, float(frame)))
            iids.append(ids)
        sessions.append(Session(scans))
        instances.append(iids)
    truth = SceneTruth(instances[0], instances[1], world.trackable_ids())
    return sessions[0], sessions[1], truth


def inject_hd_clutter(session: Session, fraction: float, seed: int,
                      centers_world: Optional[np.ndarray] = None) -> Session:
    """Append high-dynamic clutter blobs and mark them in the dynamic masks.

    Per frame, about ``fraction`` of the scan size is added as points drawn
    uniformly from person-sized cuboids whose centers move frame to frame.
    ``centers_world`` (K, 2) biases half of the blobs toward given xy spots
    (e.g. where changed objects stood); the rest land anywhere in the scan
    footprint.  Existing masks are preserved and OR-ed with the new ones.
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidParameterError("fraction must be in [0, 1)")
    rng = make_rng(seed)
    new_scans = []
    new_masks = []
    for i, (cloud, pose, t) in enumerate(session.scans):
        n_add = int(round(fraction * len(cloud)))
        if n_add == 0:
            new_scans.append((cloud, pose, t))
            new_masks.append(session.dynamic_masks[i])
            continue
        world_pts = pose.apply(cloud.points)
        lo = world_pts.min(axis=0)
        hi = world_pts.max(axis=0)
        n_blobs = max(1, n_add // 60)
        centers = np.empty((n_blobs, 2))
        for b in range(n_blobs):
            if centers_world is not None and len(centers_world) and b % 2 == 0:
                base = centers_world[rng.integers(len(centers_world))]
                centers[b] = base + rng.normal(0.0, 0.4, size=2)
            else:
                centers[b] = rng.uniform(lo[:2], hi[:2])
        sizes = np.full(n_blobs, n_add // n_blobs)
        sizes[: n_add - sizes.sum()] += 1
        blob_pts = []
        for b in range(n_blobs):
            half = np.array([0.25, 0.25, 0.0])
            base = np.array([centers[b, 0], centers[b, 1], 0.0])
            blob_pts.append(rng.uniform(base - half, base + half + [0.0, 0.0, 1.5],
                                        size=(sizes[b], 3)))
        blob_world = np.concatenate(blob_pts)
        blob_local = pose.inverse().apply(blob_world)
        pts = np.concatenate([cloud.points, blob_local])
        labels = None
        if cloud.labels is not None:
            labels = np.concatenate([cloud.labels, np.zeros(n_add, dtype=np.uint8)])
        vis = None
        if cloud.visibility is not None:
            fill = cloud.visibility[0] if len(cloud) else 0
            vis = np.concatenate([cloud.visibility, np.full(n_add, fill, dtype=np.uint8)])
        new_scans.append((PointCloud(pts, labels=labels, visibility=vis), pose, t))
        old = session.dynamic_masks[i]
        mask = np.zeros(len(pts), dtype=bool)
        if old is not None:
            mask[: len(cloud)] = old
        mask[len(cloud):] = True
        new_masks.append(mask)
    return Session(new_scans, new_masks)


def circle_trajectory(frames: int, radius: float, height: float,
                      center=(0.0, 0.0)) -> List[Pose]:
    """Poses evenly spaced on a circle, heading along the tangent."""
    poses = []
    for i in range(frames):
        a = 2.0 * math.pi * i / frames
        r = so3_exp([0.0, 0.0, a + math.pi / 2.0])
        t = np.array([center[0] + radius * math.cos(a),
                      center[1] + radius * math.sin(a), height])
        poses.append(Pose(r, t))
    return poses


def _boxes_clear(fp: np.ndarray, others: List[np.ndarray], gap: float) -> bool:
    for o in others:
        if not (fp[2] + gap <= o[0] or o[2] + gap <= fp[0]
                or fp[3] + gap <= o[1] or o[3] + gap <= fp[1]):
            return False
    return True


def _ring_clear(fp: np.ndarray, radius: float, margin: float) -> bool:
    # the trajectory circle (radius around the origin) must not pass within
    # ``margin`` of the footprint rectangle
    nx = min(max(0.0, fp[0]), fp[2])
    ny = min(max(0.0, fp[1]), fp[3])
    dmin = math.hypot(nx, ny)
    dmax = max(math.hypot(x, y)
               for x in (fp[0], fp[2]) for y in (fp[1], fp[3]))
    return dmax < radius - margin or dmin > radius + margin


def random_world(seed: int, size: float = 12.0, statics: int = 8, occluders: int = 2,
                 nc_changes: int = 0, pc_changes: int = 0,
                 traj_radius: float = 3.0, wall_height: float = 2.5) -> World:
    """Rejection-sampled room: floor, boundary walls, interior occluder walls,
    static furniture boxes, and optionally scheduled changed objects.

    Furniture and occluders keep a clear annulus around the sensor trajectory
    circle and a clear band along the boundary walls.
    """
    rng = make_rng(seed)
    h = size / 2.0
    thick = 0.1
    boxes = [WorldBox(Cuboid([-h, -h, -0.1], [h, h, 0.0]), 0, "shell")]
    walls = [
        Cuboid([-h - thick, -h - thick, 0.0], [-h, h + thick, wall_height]),
        Cuboid([h, -h - thick, 0.0], [h + thick, h + thick, wall_height]),
        Cuboid([-h - thick, -h - thick, 0.0], [h + thick, -h, wall_height]),
        Cuboid([-h - thick, h, 0.0], [h + thick, h + thick, wall_height]),
    ]
    boxes += [WorldBox(w, i + 1, "shell") for i, w in enumerate(walls)]
    next_id = 5
    taken: List[np.ndarray] = []

    def sample_box(size_x, size_y, size_z, gap):
        for _ in range(400):
            sx = rng.uniform(*size_x)
            sy = rng.uniform(*size_y)
            cx_ = rng.uniform(-h + 0.8 + sx / 2, h - 0.8 - sx / 2)
            cy_ = rng.uniform(-h + 0.8 + sy / 2, h - 0.8 - sy / 2)
            fp = np.array([cx_ - sx / 2, cy_ - sy / 2, cx_ + sx / 2, cy_ + sy / 2])
            if not _ring_clear(fp, traj_radius, 0.45):
                continue
            if not _boxes_clear(fp, taken, gap):
                continue
            taken.append(fp)
            hz = rng.uniform(*size_z)
            return Cuboid([fp[0], fp[1], 0.0], [fp[2], fp[3], hz])
        raise InvalidParameterError("could not place a primitive; world too crowded")

    for _ in range(occluders):
        # thin interior wall segment, axis-aligned
        long_side = (2.0, 3.5)
        thin_side = (thick, thick * 1.001)
        if rng.integers(2) == 0:
            c = sample_box(long_side, thin_side, (1.8, 2.2), 0.5)
        else:
            c = sample_box(thin_side, long_side, (1.8, 2.2), 0.5)
        boxes.append(WorldBox(c, next_id, "shell"))
        next_id += 1
    for _ in range(statics):
        c = sample_box((0.35, 0.9), (0.35, 0.9), (0.6, 1.2), 0.35)
        boxes.append(WorldBox(c, next_id, "object"))
        next_id += 1
    for _ in range(nc_changes):
        c = sample_box((0.3, 0.7), (0.3, 0.7), (0.25, 0.5), 0.35)
        boxes.append(WorldBox(c, next_id, "object", in_map=True, in_scan=False))
        next_id += 1
    for _ in range(pc_changes):
        c = sample_box((0.3, 0.7), (0.3, 0.7), (0.5, 0.9), 0.35)
        boxes.append(WorldBox(c, next_id, "object", in_map=False, in_scan=True))
        next_id += 1
    return World(np.array([-h, -h, h, h]), boxes, seed)


def occlusion_world(size: float = 16.0, slot: float = 0.6,
                    wall_y: float = 3.6, wall_height: float = 2.2) -> World:
    """Room split by an interior wall with a narrow viewing slot.

    Three objects removed between the sessions stand against the far boundary,
    deep in the dividing wall's shadow: only trajectory poses roughly aligned
    with the slot ever observe their spot, every other frame sees the wall
    instead.  One removed and one added object stand in the open as controls.
    Stresses fusion under heavy per-frame occlusion.
    """
    h = size / 2.0
    thick = 0.1
    boxes = [WorldBox(Cuboid([-h, -h, -0.1], [h, h, 0.0]), 0, "shell")]
    walls = [
        Cuboid([-h - thick, -h - thick, 0.0], [-h, h + thick, 2.5]),
        Cuboid([h, -h - thick, 0.0], [h + thick, h + thick, 2.5]),
        Cuboid([-h - thick, -h - thick, 0.0], [h + thick, -h, 2.5]),
        Cuboid([-h - thick, h, 0.0], [h + thick, h + thick, 2.5]),
    ]
    boxes += [WorldBox(w, i + 1, "shell") for i, w in enumerate(walls)]
    boxes.append(WorldBox(Cuboid([-4.5, wall_y, 0.0],
                                 [-slot, wall_y + thick, wall_height]),
                          5, "shell"))
    boxes.append(WorldBox(Cuboid([slot, wall_y, 0.0],
                                 [4.5, wall_y + thick, wall_height]),
                          6, "shell"))
    statics = [
        (-5.5, -1.5, 0.8, 0.6, 1.0),
        (5.0, -3.5, 0.6, 0.6, 0.8),
        (-4.8, 2.5, 0.7, 0.5, 1.1),
        (2.0, -5.5, 0.9, 0.7, 0.7),
        (-1.5, -6.0, 0.5, 0.5, 0.9),
        (6.0, 5.5, 0.6, 0.8, 1.0),
        (-6.2, 4.0, 0.7, 0.7, 0.8),
    ]
    nid = 7
    for cx, cy, sx, sy, sz in statics:
        boxes.append(WorldBox(Cuboid([cx - sx / 2, cy - sy / 2, 0.0],
                                     [cx + sx / 2, cy + sy / 2, sz]),
                              nid, "object"))
        nid += 1
    # removed objects against the far boundary wall, visible only through
    # the slot; the wall right behind them feeds the column confidence
    for cx in (-1.0, 0.0, 1.0):
        boxes.append(WorldBox(Cuboid([cx - 0.3, 7.35, 0.0],
                                     [cx + 0.3, 7.85, 0.45]),
                              nid, "object", in_map=True, in_scan=False))
        nid += 1
    boxes.append(WorldBox(Cuboid([4.55, -1.45, 0.0], [5.05, -0.95, 0.4]),
                          nid, "object", in_map=True, in_scan=False))
    boxes.append(WorldBox(Cuboid([4.95, 1.95, 0.0], [5.45, 2.45, 0.7]),
                          nid + 1, "object", in_map=False, in_scan=True))
    return World(np.array([-h, -h, h, h]), boxes, 0)


def write_world_file(world: World, path) -> None:
    lines = ["# extent xmin ymin xmax ymax",
             "extent %.9g %.9g %.9g %.9g" % tuple(world.extent),
             f"seed {world.seed}",
             "# kind id xmin ymin zmin xmax ymax zmax in_map in_scan"]
    for b in world.boxes:
        lines.append("%s %d %.9g %.9g %.9g %.9g %.9g %.9g %d %d" % (
            b.kind, b.id, *b.box.lo, *b.box.hi, int(b.in_map), int(b.in_scan)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def parse_world_file(path) -> World:
    extent = None
    seed = 0
    boxes = []
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            tok = raw.split("#", 1)[0].split()
            if not tok:
                continue
            if tok[0] == "extent":
                extent = np.array(tok[1:5], dtype=np.float64)
            elif tok[0] == "seed":
                seed = int(tok[1])
            elif tok[0] in ("shell", "object"):
                if len(tok) != 10:
                    raise InvalidInputError(f"{path}:{ln}: expected 10 fields")
                lo = np.array(tok[2:5], dtype=np.float64)
                hi = np.array(tok[5:8], dtype=np.float64)
                boxes.append(WorldBox(Cuboid(lo, hi), int(tok[1]), tok[0],
                                      in_map=bool(int(tok[8])), in_scan=bool(int(tok[9]))))
            else:
                raise InvalidInputError(f"{path}:{ln}: unknown record {tok[0]!r}")
    if extent is None:
        raise InvalidInputError(f"{path}: missing extent record")
    return World(extent, boxes, seed)
