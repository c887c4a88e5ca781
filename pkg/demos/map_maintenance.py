#!/usr/bin/env python3
"""Map maintenance on a hand-built scene, stepped through the library API.

The scene is small enough to reason about by eye: a shared ground plane,
one box that exists only in the map (it was removed from the world), and
one box that exists only in the scans (it is new).  Four identical scans
replay the same observation, which is exactly the repetition the log-odds
accumulator needs before it commits to deleting map points.

Two things are worth watching in the output:

* The removed box itself is far from every scan point, so its raw
  cross-visibility confidence is ~0 ("absent or just occluded?").  The
  column pool transfers the revealed ground's confidence up to it, which
  is what licenses the update at all.
* The negative-change posterior climbs over four frames and crosses the
  0.5 decision threshold on the way; only then does the finalized map
  drop the box.
"""

import numpy as np

from lidarchange.config import PipelineConfig
from lidarchange.confidence import confidence_of
from lidarchange.geometry import PointCloud, Pose
from lidarchange.mapping import GroundModel
from lidarchange.mapupdate import (GateThresholds, LogOddsMap, finalize_map,
                                   removal_mask, update_map)
from lidarchange.evaluation import map_scores, scan_confusion
from lidarchange.pipeline import process_scan


def floor_grid(half=2.0, step=0.25):
    ax = np.arange(-half, half + 1e-9, step)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)


def raised_box(cx, cy, half=0.2, zlo=0.6, zhi=1.0, step=0.1):
    ax = np.arange(-half, half + 1e-9, step)
    az = np.arange(zlo, zhi + 1e-9, step)
    g = np.meshgrid(ax + cx, ax + cy, az, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def main():
    floor = floor_grid()
    removed = raised_box(1.0, 1.0)     # in the map, gone from the world
    new = raised_box(-1.0, -1.0)       # in the scans, absent from the map

    map_cloud = PointCloud(
        np.vstack([floor, removed]),
        labels=np.concatenate([np.zeros(len(floor)),
                               np.full(len(removed), 2)]).astype(np.uint8))
    scan = PointCloud(
        np.vstack([floor, new]),
        labels=np.concatenate([np.zeros(len(floor)),
                               np.ones(len(new))]).astype(np.uint8))

    print(f"map: {len(floor)} ground + {len(removed)} removed-box points")
    print(f"scan: {len(floor)} ground + {len(new)} new-box points\n")

    print("confidence law (distance to the opposite domain):")
    for d in (0.0, 0.1, 0.2, 0.5, 1.0, 3.0):
        print(f"  c({d:3.1f}) = {confidence_of(d):.4f}")
    print()

    cfg = PipelineConfig(report_timing=False)
    gates = GateThresholds(cfg.tau_scan, cfg.tau_map)
    ground = GroundModel.flat()
    state = LogOddsMap.uniform(len(map_cloud), cfg.logodds_clamp)
    probe = len(floor)                 # first point of the removed box

    print(f"gates: scan < {gates.tau_scan}, map > {gates.tau_map}; "
          f"removal at posterior > {cfg.decision_threshold}\n")
    for frame in range(4):
        obs = process_scan("oracle", None, map_cloud, scan, cfg, ground,
                           gates, sensor_pose=Pose.identity())
        if frame == 0:
            local = np.flatnonzero(obs.map_indices == probe)[0]
            raw = confidence_of(float(np.linalg.norm(
                map_cloud.points[probe] - scan.points, axis=1).min()))
            print(f"removed-box row: raw confidence {raw:.4f} -> "
                  f"column-pooled {obs.map_gate_conf[local]:.4f}\n")
        state = update_map(state, (obs.map_probs, obs.map_gate_conf), gates,
                           indices=obs.map_indices)
        post = state.posterior()[probe, 2]
        flagged = len(obs.scan_changes)
        print(f"frame {frame}: flagged {flagged} new points, "
              f"removal posterior {post:.4f}, "
              f"{int(removal_mask(state, cfg.decision_threshold).sum())} "
              f"points past threshold")

    final = finalize_map(map_cloud, state, cfg.decision_threshold)
    print(f"\nfinal map: {len(map_cloud)} -> {len(final)} points "
          f"({len(map_cloud) - len(final)} removed)")

    pred = np.zeros(len(scan), dtype=np.uint8)
    pred[obs.scan_changes] = 1
    iou = scan_confusion(pred, scan.labels).iou
    kept = ~removal_mask(state, cfg.decision_threshold)
    scores = map_scores(map_cloud.labels, kept)
    print(f"scan IoU {iou:.3f}; map preservation {scores.pr:.3f}, "
          f"removal {scores.rr:.3f}, F1 {scores.f1:.3f}")


if __name__ == "__main__":
    main()
