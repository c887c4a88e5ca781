"""Shared fixtures: a tiny posed session with trackable box objects."""

import numpy as np

from lidarchange.geometry import PointCloud, Pose
from lidarchange.io import Session


def box_points(cx, cy, half=0.2, zlo=0.1, zhi=0.6, step=0.1):
    xs = np.arange(cx - half, cx + half + 1e-9, step)
    zs = np.arange(zlo, zhi + 1e-9, step)
    g = np.meshgrid(xs, np.arange(cy - half, cy + half + 1e-9, step), zs)
    return np.column_stack([a.ravel() for a in g])


def make_session(n_frames=3, with_dyn=False):
    """Flat floor plus two box objects, seen from slightly shifted poses.

    Returns (session, instance_masks).  Instance ids: floor -1, boxes 0 and 1.
    """
    xs = np.arange(-4.0, 4.0 + 1e-9, 0.25)
    g = np.meshgrid(xs, xs)
    floor = np.column_stack([g[0].ravel(), g[1].ravel(), np.zeros(g[0].size)])
    obj0 = box_points(2.0, 2.0)
    obj1 = box_points(-2.0, -2.5)
    world = np.vstack([floor, obj0, obj1])
    iid = np.concatenate([np.full(len(floor), -1), np.full(len(obj0), 0),
                          np.full(len(obj1), 1)])

    scans, masks, iids = [], [], []
    for i in range(n_frames):
        pose = Pose(np.eye(3), np.array([0.2 * i, -0.1 * i, 0.0]))
        sensor = pose.inverse().apply(world)
        scans.append((PointCloud(sensor), pose, 0.1 * i))
        dyn = None
        if with_dyn:
            dyn = np.zeros(len(world), dtype=bool)
            dyn[len(floor): len(floor) + 5] = True  # 5 object-0 points per frame
        masks.append(dyn)
        iids.append(iid)
    return Session(scans, masks if with_dyn else None), iids
