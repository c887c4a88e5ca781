"""Command-line frontend.

One subcommand per pipeline stage, communicating through files so every
intermediate is inspectable:

    synth      generate a synthetic world and two raycast sessions
    build-map  fuse a session into a deduplicated global map
    augment    extract tracked objects and write the object database
    train      build pseudo-change pairs from one session and fit the model
    detect     classify one scan against a map (dualhead / occupancy / visibility)
    update     fuse a detection into the per-point log-odds state
    eval       score predictions against ground-truth labels
    sweep      run the full pipeline over a parameter grid, emit CSV
    perturb    write a session copy with noise-injected poses

Exit codes: 0 success, 2 missing input file, 3 config parse error,
1 any other pipeline failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .augment import extract_objects, generate_pair, save_database
from .config import PipelineConfig, parse_config
from .detect import load_model, save_model
from .errors import ConfigError, LidarChangeError
from .evaluation import SweepConfig, format_csv, map_scores, scan_iou, sweep
from .geometry import Pose, perturb_pose
from .io import (Session, load_logodds, load_ply, load_session,
                 load_session_instances, save_logodds, save_ply, save_session)
from .mapping import build_static_map, segment_ground, voxel_dedup
from .mapupdate import (GateThresholds, LogOddsMap, finalize_map, removal_mask,
                        update_map)
from .pipeline import (ScenePrep, perturbation_from_config, process_scan,
                       resolve_threads, sensor_from_config, soften_classes,
                       train_from_scene)
from .synthscene import (generate_sessions, inject_hd_clutter, parse_world_file,
                         random_world, write_world_file)

_DEFAULTS = PipelineConfig()


def _require(path, what="input"):
    if path is None or not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_config(args) -> PipelineConfig:
    if args.config is not None:
        cfg = parse_config(_require(args.config, "config file"))
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    elif "CHAMELION_THREADS" in os.environ:
        try:
            cfg.threads = int(os.environ["CHAMELION_THREADS"])
        except ValueError:
            raise LidarChangeError(
                f"CHAMELION_THREADS is not an integer: {os.environ['CHAMELION_THREADS']!r}")
    return cfg


def _parse_pose(text) -> Pose:
    vals = np.array(text.replace(",", " ").split(), dtype=np.float64)
    if vals.size != 12:
        raise LidarChangeError("--pose expects 12 floats (row-major R|t)")
    return Pose.from_rt(vals.reshape(3, 4))


def _object_masks(manifest, world_path):
    """Instance-id masks (-1 = background) for a session, via the world file."""
    world = parse_world_file(_require(world_path, "world file"))
    obj_ids = np.array([b.id for b in world.boxes if b.kind == "object"],
                       dtype=np.int64)
    masks = []
    for ids in load_session_instances(manifest):
        if ids is None:
            raise LidarChangeError(
                f"{manifest}: missing .iid instance sidecars (rerun synth)")
        ids64 = ids.astype(np.int64)
        masks.append(np.where(np.isin(ids64, obj_ids), ids64, -1))
    return masks


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig) -> int:
    world = random_world(cfg.seed, size=cfg.world_size, statics=cfg.world_statics,
                         occluders=cfg.world_occluders, nc_changes=cfg.world_changes,
                         pc_changes=cfg.world_changes, traj_radius=cfg.traj_radius)
    sensor = sensor_from_config(cfg)
    prior, current, truth = generate_sessions(world, sensor, cfg.seed)
    ids_prior = list(truth.instances_prior)
    ids_current = list(truth.instances_current)
    if args.hd_fraction > 0:
        for which, (sess, ids) in enumerate([(prior, ids_prior),
                                             (current, ids_current)]):
            sess = inject_hd_clutter(sess, args.hd_fraction, cfg.seed + which)
            # appended clutter points get background instance id 0
            for i, (cloud, _, _) in enumerate(sess.scans):
                pad = len(cloud) - len(ids[i])
                ids[i] = np.concatenate([ids[i], np.zeros(pad, dtype=np.uint32)])
            if which == 0:
                prior = sess
            else:
                current = sess
    os.makedirs(args.out, exist_ok=True)
    write_world_file(world, os.path.join(args.out, "world.txt"))
    mp = save_session(prior, os.path.join(args.out, "prior"), instance_ids=ids_prior)
    mc = save_session(current, os.path.join(args.out, "current"),
                      instance_ids=ids_current)
    print(f"world: {os.path.join(args.out, 'world.txt')}")
    print(f"prior session: {mp} ({len(prior)} scans)")
    print(f"current session: {mc} ({len(current)} scans)")
    return 0


def cmd_build_map(args, cfg: PipelineConfig) -> int:
    session = load_session(_require(args.session, "session manifest"))
    cloud = build_static_map(session)
    if cfg.dedup_map:
        cloud = voxel_dedup(cloud, cfg.voxel_size)
    save_ply(cloud, args.out)
    print(f"map: {args.out} ({len(cloud)} points)")
    return 0


def cmd_augment(args, cfg: PipelineConfig) -> int:
    manifest = _require(args.session, "session manifest")
    session = load_session(manifest)
    db = extract_objects(session, _object_masks(manifest, args.world))
    index = save_database(db, args.out)
    print(f"object database: {index} ({db.count} objects)")
    for k in range(args.pairs):
        pair = generate_pair(session, db, cfg.n_pc, cfg.n_nc,
                             seed=cfg.seed * 1_000_003 + 613 * k)
        pair_dir = os.path.join(args.out, f"pair{k:03d}")
        os.makedirs(pair_dir, exist_ok=True)
        save_ply(pair.map, os.path.join(pair_dir, "map.ply"))
        with open(os.path.join(pair_dir, "poses.txt"), "w") as f:
            for i, (scan, pose) in enumerate(zip(pair.scans, pair.poses)):
                save_ply(scan, os.path.join(pair_dir, f"scan{i:03d}.ply"))
                f.write(" ".join("%.17g" % v for v in pose.matrix34().ravel()) + "\n")
        print(f"pair {k}: {pair_dir}")
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    manifest = _require(args.session, "session manifest")
    session = load_session(manifest)
    db = extract_objects(session, _object_masks(manifest, args.world))
    base_map = build_static_map(session)
    ground, inlier_idx = segment_ground(base_map, cfg.ground_threshold)

    # only the fields the pair generator and trainer consume are needed here
    scene = ScenePrep(None, None, session, None, None, db, ground,
                      base_map.points[inlier_idx])
    model, history = train_from_scene(scene, cfg,
                                      workers=resolve_threads(cfg.threads))
    save_model(model, args.out)
    best = int(np.argmin(history["val"]))
    print(f"model: {args.out} (best validation loss {history['val'][best]:.4f} "
          f"at epoch {best + 1}/{len(history['val'])})")
    return 0


def cmd_detect(args, cfg: PipelineConfig) -> int:
    map_cloud = load_ply(_require(args.map, "map file"))
    scan_cloud = load_ply(_require(args.scan, "scan file"))
    model = None
    if args.method == "dualhead":
        model = load_model(_require(args.model, "model file (--model)"))
    ground = segment_ground(map_cloud, cfg.ground_threshold)[0]
    pose = _parse_pose(args.pose) if args.pose else Pose.identity()
    gates = GateThresholds(cfg.tau_scan, cfg.tau_map)
    obs = process_scan(args.method, model, map_cloud, scan_cloud, cfg, ground,
                       gates, sensor_pose=pose,
                       workers=resolve_threads(cfg.threads))
    if args.out_scan:
        labels = np.zeros(len(scan_cloud), dtype=np.uint8)
        labels[obs.scan_changes] = 1
        save_ply(scan_cloud.replace(labels=labels,
                                    confidences=np.clip(obs.scan_conf, 0, 1)),
                 args.out_scan)
        print(f"scan output: {args.out_scan} "
              f"({len(obs.scan_changes)}/{len(scan_cloud)} positive changes)")
    if args.out_map:
        labels = np.zeros(len(map_cloud), dtype=np.uint8)
        conf = np.zeros(len(map_cloud))
        labels[obs.map_indices] = obs.map_probs.argmax(axis=1).astype(np.uint8)
        conf[obs.map_indices] = np.clip(obs.map_gate_conf, 0, 1)
        save_ply(map_cloud.replace(labels=labels, confidences=conf), args.out_map)
        print(f"map output: {args.out_map} ({len(obs.map_indices)} observed points)")
    return 0


def cmd_update(args, cfg: PipelineConfig) -> int:
    map_cloud = load_ply(_require(args.map, "map file"))
    obs_cloud = load_ply(_require(args.obs, "observation file"))
    if obs_cloud.labels is None or obs_cloud.confidences is None:
        raise LidarChangeError(
            f"{args.obs}: needs label and confidence properties (from detect)")
    if os.path.exists(args.state):
        state = LogOddsMap(load_logodds(args.state, len(map_cloud)),
                           clamp=cfg.logodds_clamp)
    else:
        state = LogOddsMap.uniform(len(map_cloud), cfg.logodds_clamp)
    gates = GateThresholds(cfg.tau_scan, cfg.tau_map)
    obs = (soften_classes(obs_cloud.labels), obs_cloud.confidences)
    state = update_map(state, obs, gates)
    save_logodds(state.state, args.state)
    print(f"state: {args.state} "
          f"({int(removal_mask(state, cfg.decision_threshold).sum())} points past "
          f"the removal threshold)")
    if args.out:
        final = finalize_map(map_cloud, state, cfg.decision_threshold)
        save_ply(final, args.out)
        print(f"updated map: {args.out} ({len(map_cloud) - len(final)} removed)")
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    if args.side == "scan":
        pred = load_ply(_require(args.pred, "prediction file"))
        truth = load_ply(_require(args.truth, "truth file"))
        if pred.labels is None or truth.labels is None:
            raise LidarChangeError("both files need label properties")
        iou = scan_iou(pred.labels, truth.labels)
        line = f"iou={iou:.6f}"
    else:
        truth = load_ply(_require(args.truth, "truth file"))
        if truth.labels is None:
            raise LidarChangeError(f"{args.truth}: needs label properties")
        state = LogOddsMap(load_logodds(_require(args.state, "state file"),
                                        len(truth)), clamp=cfg.logodds_clamp)
        kept = ~removal_mask(state, cfg.decision_threshold)
        s = map_scores(truth.labels, kept)
        line = f"pr={s.pr:.6f} rr={s.rr:.6f} f1={s.f1:.6f}"
    print(line)
    if args.out:
        with open(args.out, "w") as f:
            f.write(line + "\n")
    return 0


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    sc = SweepConfig(base=cfg,
                     settings=tuple(args.settings.replace(",", " ").split()),
                     voxel_sizes=_floats(args.voxels),
                     noise_levels=_floats(args.noise),
                     tau_scans=_floats(args.tau_scan),
                     tau_maps=_floats(args.tau_map))
    rows = sweep(sc)
    csv = format_csv(rows, include_timing=cfg.report_timing)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(csv)
    sys.stdout.write(csv)
    print(f"report: {args.out} ({len(rows)} rows)")
    return 0


def cmd_perturb(args, cfg: PipelineConfig) -> int:
    manifest = _require(args.session, "session manifest")
    session = load_session(manifest)
    scans = []
    for i, (cloud, pose, t) in enumerate(session.scans):
        spec = perturbation_from_config(cfg, args.level,
                                        cfg.seed * 1_000_003 + i)
        scans.append((cloud, perturb_pose(pose, spec), t))
    out = save_session(Session(scans, session.dynamic_masks), args.out,
                       instance_ids=load_session_instances(manifest))
    print(f"perturbed session: {out} (level {args.level})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lidarchange",
        description="Online LiDAR change detection and long-term map maintenance.")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help=f"override config seed "
                   f"(default {_DEFAULTS.seed})")
    p.add_argument("--threads", type=int,
                   help="worker cap (default: CHAMELION_THREADS or auto)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic world + two sessions")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--hd-fraction", type=float, default=0.0,
                   help="inject this fraction of high-dynamic clutter (default 0)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-map", help="fuse a session into a global map")
    s.add_argument("--session", required=True, help="session manifest path")
    s.add_argument("--out", required=True, help="output PLY path")
    s.set_defaults(func=cmd_build_map)

    s = sub.add_parser("augment", help="extract objects / write pseudo-change pairs")
    s.add_argument("--session", required=True, help="session manifest path")
    s.add_argument("--world", required=True, help="world file from synth")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--pairs", type=int, default=0,
                   help="also render this many example pairs (default 0)")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train the dual-head model on one session")
    s.add_argument("--session", required=True, help="session manifest path")
    s.add_argument("--world", required=True, help="world file from synth")
    s.add_argument("--out", required=True, help="output model path (.chmk)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="classify one scan against a map")
    s.add_argument("--map", required=True, help="map PLY path")
    s.add_argument("--scan", required=True, help="scan PLY path (global frame)")
    s.add_argument("--method", choices=("dualhead", "occupancy", "visibility"),
                   default="dualhead", help="detector (default dualhead)")
    s.add_argument("--model", help="trained model path (dualhead only)")
    s.add_argument("--pose", help="sensor pose, 12 floats row-major R|t "
                   "(default identity; used by the visibility method)")
    s.add_argument("--out-scan", help="labeled scan output PLY")
    s.add_argument("--out-map", help="labeled map observation output PLY")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("update", help="fuse a detection into the log-odds state")
    s.add_argument("--map", required=True, help="map PLY path")
    s.add_argument("--obs", required=True, help="map observation PLY from detect")
    s.add_argument("--state", required=True,
                   help="log-odds state path (created if absent, else updated)")
    s.add_argument("--out", help="also write the finalized map PLY")
    s.set_defaults(func=cmd_update)

    s = sub.add_parser("eval", help="score predictions against truth labels")
    s.add_argument("--side", choices=("scan", "map"), required=True)
    s.add_argument("--pred", help="predicted scan PLY (scan side)")
    s.add_argument("--truth", required=True, help="truth-labeled PLY")
    s.add_argument("--state", help="log-odds state (map side)")
    s.add_argument("--out", help="also write the score line to this file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid evaluation, CSV report")
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--settings", default="dualhead",
                   help="comma list of settings (default dualhead)")
    s.add_argument("--voxels", default=str(_DEFAULTS.voxel_size),
                   help=f"comma list of voxel sizes (default {_DEFAULTS.voxel_size})")
    s.add_argument("--noise", default="0",
                   help="comma list of perturbation levels (default 0)")
    s.add_argument("--tau-scan", default=str(_DEFAULTS.tau_scan),
                   help=f"comma list of scan gates (default {_DEFAULTS.tau_scan})")
    s.add_argument("--tau-map", default=str(_DEFAULTS.tau_map),
                   help=f"comma list of map gates (default {_DEFAULTS.tau_map})")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("perturb", help="noise-inject session poses")
    s.add_argument("--session", required=True, help="session manifest path")
    s.add_argument("--level", type=float, required=True,
                   help="perturbation level L (0 disables)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_perturb)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except LidarChangeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
